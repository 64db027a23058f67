#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ccf/ebf.hpp"
#include "ccf/matrix.hpp"

namespace ccf {

// One concept's embedded prompt pair: the neutral phrase and the phrase
// that names the concept, both already encoded by the text encoder.
struct PromptPairEmbedding {
  std::string name;
  Vector neutral;
  Vector stimuli;
};

inline constexpr double kUnitNormTol = 1e-9;

// Unit direction from the neutral to the stimuli embedding.
inline Vector concept_direction(const PromptPairEmbedding& pair) {
  require(pair.neutral.size() == pair.stimuli.size(), ErrorKind::DimensionMismatch,
          "concept '" + pair.name + "': neutral dim " + std::to_string(pair.neutral.size()) + " != stimuli dim " +
              std::to_string(pair.stimuli.size()));
  Vector diff(pair.stimuli.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = pair.stimuli[i] - pair.neutral[i];
  if (norm2(diff) <= kZeroNormEps) fail(ErrorKind::DegenerateConcept, "concept '" + pair.name + "'");
  return l2_normalize(diff);
}

// Immutable bank of named unit-norm concept directions (one row each).
class ConceptBank {
 public:
  ConceptBank(std::vector<std::string> names, Matrix directions)
      : names_(std::move(names)), directions_(std::move(directions)) {
    validate();
  }

  std::size_t size() const noexcept { return names_.size(); }
  std::size_t dim() const noexcept { return directions_.cols(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const Matrix& directions() const noexcept { return directions_; }
  std::span<const double> direction(std::size_t i) const { return directions_.row(i); }

  std::optional<std::size_t> index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names_.begin());
  }

  bool contains(const std::string& name) const { return index_of(name).has_value(); }

  // sum_i w_i c_i
  Vector combine(std::span<const double> w) const {
    require(w.size() == size(), ErrorKind::DimensionMismatch,
            "weight vector has " + std::to_string(w.size()) + " entries for " + std::to_string(size()) + " concepts");
    return matvec_t(directions_, w);
  }

  friend bool operator==(const ConceptBank&, const ConceptBank&) = default;

 private:
  void validate() const {
    require(!names_.empty(), ErrorKind::EmptyBank, "concept bank has no concepts");
    require(names_.size() == directions_.rows(), ErrorKind::SizeMismatch,
            std::to_string(names_.size()) + " names for " + std::to_string(directions_.rows()) + " directions");
    std::set<std::string> seen;
    for (const auto& n : names_) require(seen.insert(n).second, ErrorKind::DuplicateName, "concept '" + n + "'");
    for (std::size_t i = 0; i < directions_.rows(); ++i) {
      const double n = norm2(directions_.row(i));
      require(std::abs(n - 1.0) <= kUnitNormTol, ErrorKind::DegenerateConcept,
              "concept '" + names_[i] + "' has norm " + std::to_string(n));
    }
  }

  std::vector<std::string> names_;
  Matrix directions_;
};

inline ConceptBank build_bank(const std::vector<PromptPairEmbedding>& pairs) {
  require(!pairs.empty(), ErrorKind::EmptyBank, "no prompt pairs given");
  const std::size_t k = pairs.front().neutral.size();
  std::set<std::string> seen;
  std::vector<std::string> degenerate;
  std::vector<std::string> names;
  Matrix directions(pairs.size(), k);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    require(p.neutral.size() == k && p.stimuli.size() == k, ErrorKind::DimensionMismatch,
            "concept '" + p.name + "' is not " + std::to_string(k) + "-dimensional");
    require(seen.insert(p.name).second, ErrorKind::DuplicateName, "concept '" + p.name + "'");
    names.push_back(p.name);
    try {
      const Vector c = concept_direction(p);
      std::copy(c.begin(), c.end(), directions.row(i).begin());
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateConcept) throw;
      degenerate.push_back(p.name);
    }
  }
  if (!degenerate.empty()) {
    std::string list;
    for (const auto& n : degenerate) list += (list.empty() ? "" : ", ") + n;
    fail(ErrorKind::DegenerateConcept, "stimuli equals neutral for: " + list);
  }
  return ConceptBank(std::move(names), std::move(directions));
}

// Pairs that share one neutral embedding.
inline std::vector<PromptPairEmbedding> pairs_with_shared_neutral(const std::vector<std::string>& names,
                                                                  const Vector& neutral, const Matrix& stimuli) {
  require(names.size() == stimuli.rows(), ErrorKind::SizeMismatch,
          std::to_string(names.size()) + " names for " + std::to_string(stimuli.rows()) + " stimuli rows");
  std::vector<PromptPairEmbedding> pairs;
  pairs.reserve(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) pairs.push_back({names[i], neutral, stimuli.row_vector(i)});
  return pairs;
}

inline ConceptBank add_concept(const ConceptBank& bank, const PromptPairEmbedding& pair) {
  require(!bank.contains(pair.name), ErrorKind::DuplicateName, "concept '" + pair.name + "'");
  require(pair.neutral.size() == bank.dim() && pair.stimuli.size() == bank.dim(), ErrorKind::DimensionMismatch,
          "concept '" + pair.name + "' is not " + std::to_string(bank.dim()) + "-dimensional");
  const Vector c = concept_direction(pair);
  Matrix m(bank.size() + 1, bank.dim());
  for (std::size_t i = 0; i < bank.size(); ++i) std::ranges::copy(bank.direction(i), m.row(i).begin());
  std::ranges::copy(c, m.row(bank.size()).begin());
  auto names = bank.names();
  names.push_back(pair.name);
  return ConceptBank(std::move(names), std::move(m));
}

// Removing the last concept fails with EmptyBank: a bank is never empty.
inline ConceptBank remove_concept(const ConceptBank& bank, const std::string& name) {
  const auto idx = bank.index_of(name);
  require(idx.has_value(), ErrorKind::UnknownConcept, "concept '" + name + "'");
  require(bank.size() > 1, ErrorKind::EmptyBank, "removing '" + name + "' would leave the bank empty");
  Matrix m(bank.size() - 1, bank.dim());
  std::vector<std::string> names;
  for (std::size_t i = 0, r = 0; i < bank.size(); ++i) {
    if (i == *idx) continue;
    std::ranges::copy(bank.direction(i), m.row(r++).begin());
    names.push_back(bank.names()[i]);
  }
  return ConceptBank(std::move(names), std::move(m));
}

// --- persistence ---

inline void save_bank(const ConceptBank& bank, const fs::path& path, Precision precision = Precision::f64,
                      json extra = json::object()) {
  Manifest man{ManifestKind::concept_bank, bank.names(), bank.dim(), std::move(extra)};
  save_matrix(bank.directions(), man, path, precision);
}

// Rows that drifted off unit norm (f32 storage moves norms by ~1e-8) are
// renormalized after widening; f64 rows load bit-exact.
inline ConceptBank load_bank(const fs::path& path) {
  auto [m, man] = load_matrix(path);
  require(man.kind == ManifestKind::concept_bank, ErrorKind::BadManifest, path.string() + " is not a concept bank");
  require(man.names.has_value(), ErrorKind::BadManifest, path.string() + ": bank manifest has no names");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    if (std::abs(norm2(m.row(i)) - 1.0) <= kUnitNormTol) continue;
    const Vector r = l2_normalize(m.row(i));
    std::ranges::copy(r, m.row(i).begin());
  }
  return ConceptBank(*man.names, std::move(m));
}

// Prompt-pair file layouts, recorded as manifest extra "layout":
//   "alternating":    2*N rows, neutral_0, stimuli_0, neutral_1, ...
//   "shared_neutral": N+1 rows, row 0 is the one neutral, then N stimuli
// names lists the N concepts in both cases.
inline std::vector<PromptPairEmbedding> prompt_pairs_from_matrix(const Matrix& m, const Manifest& man) {
  require(man.kind == ManifestKind::prompt_pairs, ErrorKind::BadManifest, "manifest kind is not prompt_pairs");
  require(man.names.has_value(), ErrorKind::BadManifest, "prompt pair manifest has no names");
  const auto& names = *man.names;
  const std::string layout = man.extra.value("layout", std::string("alternating"));
  if (layout == "shared_neutral") {
    require(m.rows() == names.size() + 1, ErrorKind::BadManifest,
            "shared_neutral layout needs " + std::to_string(names.size() + 1) + " rows, got " +
                std::to_string(m.rows()));
    Matrix stimuli(names.size(), m.cols());
    for (std::size_t i = 0; i < names.size(); ++i) std::ranges::copy(m.row(i + 1), stimuli.row(i).begin());
    return pairs_with_shared_neutral(names, m.row_vector(0), stimuli);
  }
  require(layout == "alternating", ErrorKind::BadManifest, "unknown prompt pair layout '" + layout + "'");
  require(m.rows() == 2 * names.size(), ErrorKind::BadManifest,
          "alternating layout needs " + std::to_string(2 * names.size()) + " rows, got " + std::to_string(m.rows()));
  std::vector<PromptPairEmbedding> pairs;
  for (std::size_t i = 0; i < names.size(); ++i)
    pairs.push_back({names[i], m.row_vector(2 * i), m.row_vector(2 * i + 1)});
  return pairs;
}

}  // namespace ccf

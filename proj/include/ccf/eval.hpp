#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "ccf/perturbation.hpp"

namespace ccf {

// Fraction of ground-truth names found among the first k ranked names.
// Duplicate ground-truth names count once.
inline double recall_at_k(std::span<const std::string> ranking, std::span<const std::string> ground_truth,
                          std::size_t k) {
  require(!ground_truth.empty(), ErrorKind::EmptyGroundTruth, "ground truth list is empty");
  require(k >= 1, ErrorKind::InvalidConfig, "k must be >= 1");
  const std::set<std::string> gt(ground_truth.begin(), ground_truth.end());
  std::set<std::string> hits;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i)
    if (gt.contains(ranking[i])) hits.insert(ranking[i]);
  return static_cast<double>(hits.size()) / static_cast<double>(gt.size());
}

inline double recall_at_k(const RankedConcepts& ranking, std::span<const std::string> ground_truth, std::size_t k) {
  std::vector<std::string> names;
  names.reserve(ranking.size());
  for (const auto& r : ranking) names.push_back(r.name);
  return recall_at_k(names, ground_truth, k);
}

inline double coverage(std::span<const ExplanationResult> results) {
  require(!results.empty(), ErrorKind::EmptyList, "no explanation results");
  const auto n = std::ranges::count_if(results, [](const ExplanationResult& r) { return r.flipped; });
  return static_cast<double>(n) / static_cast<double>(results.size());
}

struct LatencySummary {
  std::size_t n = 0;
  double mean = 0.0;
  double p50 = 0.0;
  double p95 = 0.0;
};

// Percentiles use linear interpolation between order statistics.
inline LatencySummary latency_report(std::span<const double> seconds) {
  require(!seconds.empty(), ErrorKind::EmptyList, "no latency samples");
  std::vector<double> s(seconds.begin(), seconds.end());
  std::ranges::sort(s);
  auto pct = [&](double q) {
    const double pos = q * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
  };
  LatencySummary r;
  r.n = s.size();
  for (double x : s) r.mean += x;
  r.mean /= static_cast<double>(s.size());
  r.p50 = pct(0.50);
  r.p95 = pct(0.95);
  return r;
}

struct SanityResult {
  std::size_t n = 0;
  std::size_t flipped = 0;
  std::size_t top1 = 0;
  double fraction() const { return n ? static_cast<double>(top1) / static_cast<double>(n) : 0.0; }
  double coverage() const { return n ? static_cast<double>(flipped) / static_cast<double>(n) : 0.0; }
};

// Explains each selected row toward `target` and counts how often the
// label-aligned concept ranks first (toward_target). Runs that fail to flip
// count against the fraction.
inline SanityResult top1_sanity(const Matrix& features, std::span<const std::size_t> rows, const ConceptBank& bank,
                                const ProjectorPair& pair, const ClassifierHead& head, std::size_t target,
                                const std::string& label_concept, const PerturbationConfig& cfg) {
  const auto label_idx = bank.index_of(label_concept);
  require(label_idx.has_value(), ErrorKind::MissingLabelConcept,
          "label concept '" + label_concept + "' is not in the bank");
  SanityResult s;
  for (std::size_t r : rows) {
    const auto res = optimize_perturbation(features.row(r), bank, pair, head, target, cfg);
    ++s.n;
    if (!res.flipped) continue;
    ++s.flipped;
    if (rank_concepts(res, bank, 1).front().index == *label_idx) ++s.top1;
  }
  return s;
}

// --- recall evaluation over explanation reports ---

struct GroundTruthFindings {
  std::string pathology;
  std::vector<std::string> primary;
  std::vector<std::string> secondary;
};

// What the evaluator needs from one explanation report.
struct ExplanationRecord {
  std::string model;   // free-form tag, one table column group per tag
  std::string target;  // pathology class name
  bool flipped = false;
  std::vector<std::string> ranking;  // full toward_target order over the bank
};

struct RecallRow {
  std::string model;
  std::string pathology;
  std::string finding;  // "primary" or "secondary"
  std::size_t n_findings = 0;
  std::size_t k = 0;
  std::size_t n = 0;  // flipped instances contributing
  double mean_recall = 0.0;
};

struct CoverageRow {
  std::string model;
  std::string pathology;
  std::size_t n = 0;
  std::size_t flipped = 0;
  double coverage = 0.0;
};

struct EvalReport {
  std::vector<RecallRow> recall;
  std::vector<CoverageRow> coverage;
  // Per report (input order) and per (finding, k): recall, or empty when not flipped.
  std::vector<std::map<std::string, double>> per_instance;
  std::optional<LatencySummary> latency;
};

struct RecallOptions {
  std::vector<std::size_t> ks = {5, 10};
  bool missing_as_miss = false;  // score ground-truth names absent from the bank as never retrieved
};

// Mean of per-instance recall over flipped reports, per (model, pathology,
// finding type, k). Failed flips only enter coverage. Ground-truth names
// that are not concepts of a report's bank are an error unless
// missing_as_miss is set.
inline EvalReport evaluate_recall(std::span<const ExplanationRecord> records,
                                  const std::map<std::string, GroundTruthFindings>& ground_truth,
                                  const RecallOptions& opt) {
  require(!records.empty(), ErrorKind::EmptyList, "no explanation reports");
  require(!opt.ks.empty(), ErrorKind::InvalidConfig, "no k values");
  for (std::size_t k : opt.ks) require(k >= 1, ErrorKind::InvalidConfig, "k must be >= 1");

  struct Acc {
    std::size_t n = 0;
    double sum = 0.0;
  };
  std::map<std::tuple<std::string, std::string, std::string, std::size_t>, Acc> acc;
  std::map<std::pair<std::string, std::string>, CoverageRow> cov;
  EvalReport report;

  for (const auto& rec : records) {
    auto it = ground_truth.find(rec.target);
    require(it != ground_truth.end(), ErrorKind::EmptyGroundTruth, "no ground truth for pathology '" + rec.target + "'");
    const auto& gt = it->second;
    require(!gt.primary.empty(), ErrorKind::EmptyGroundTruth, "pathology '" + rec.target + "' has no primary findings");
    const std::set<std::string> bank(rec.ranking.begin(), rec.ranking.end());
    if (!opt.missing_as_miss)
      for (const auto* list : {&gt.primary, &gt.secondary})
        for (const auto& name : *list)
          require(bank.contains(name), ErrorKind::UnknownConcept,
                  "ground-truth finding '" + name + "' for '" + rec.target +
                      "' is not in the concept bank; add it or score missing findings as misses");

    auto& c = cov[{rec.model, rec.target}];
    c.model = rec.model;
    c.pathology = rec.target;
    ++c.n;
    std::map<std::string, double> inst;
    for (const auto& [finding, list] : {std::pair{std::string("primary"), &gt.primary},
                                        std::pair{std::string("secondary"), &gt.secondary}}) {
      if (list->empty()) continue;
      for (std::size_t k : opt.ks) {
        auto& a = acc[{rec.model, rec.target, finding, k}];
        if (!rec.flipped) continue;
        const double r = recall_at_k(rec.ranking, *list, k);
        a.sum += r;
        ++a.n;
        inst[finding + "@" + std::to_string(k)] = r;
      }
    }
    if (rec.flipped) ++c.flipped;
    report.per_instance.push_back(std::move(inst));
  }

  for (const auto& [key, a] : acc) {
    const auto& [model, pathology, finding, k] = key;
    const auto& gt = ground_truth.at(pathology);
    const std::size_t nf = std::set<std::string>(finding == "primary" ? gt.primary.begin() : gt.secondary.begin(),
                                                 finding == "primary" ? gt.primary.end() : gt.secondary.end())
                               .size();
    report.recall.push_back({model, pathology, finding, nf, k, a.n, a.n ? a.sum / static_cast<double>(a.n) : 0.0});
  }
  for (auto& [key, c] : cov) {
    c.coverage = static_cast<double>(c.flipped) / static_cast<double>(c.n);
    report.coverage.push_back(c);
  }
  return report;
}

// Aligned plain-text table: pathology x finding rows, one R@k column per
// (model, k). Cells with no flipped instances print "n=0".
inline std::string format_recall_table(const EvalReport& report) {
  std::vector<std::string> models;
  std::vector<std::size_t> ks;
  std::vector<std::pair<std::string, std::string>> rows;
  std::map<std::tuple<std::string, std::string, std::string, std::size_t>, const RecallRow*> cell;
  std::map<std::pair<std::string, std::string>, std::size_t> counts;
  for (const auto& r : report.recall) {
    if (std::ranges::find(models, r.model) == models.end()) models.push_back(r.model);
    if (std::ranges::find(ks, r.k) == ks.end()) ks.push_back(r.k);
    const std::pair key{r.pathology, r.finding};
    if (std::ranges::find(rows, key) == rows.end()) rows.push_back(key);
    cell[{r.model, r.pathology, r.finding, r.k}] = &r;
    counts[key] = r.n_findings;
  }
  std::ranges::sort(ks);
  std::ranges::stable_sort(rows, [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second == "primary" && b.second != "primary";
  });

  std::vector<std::vector<std::string>> table;
  std::vector<std::string> header = {"Pathology", "Finding"};
  for (const auto& m : models)
    for (std::size_t k : ks) header.push_back((m.empty() ? "" : m + " ") + "R@" + std::to_string(k));
  table.push_back(header);
  for (const auto& [pathology, finding] : rows) {
    std::string label = finding;
    label[0] = static_cast<char>(std::toupper(label[0]));
    std::vector<std::string> line = {pathology, label + "(" + std::to_string(counts[{pathology, finding}]) + ")"};
    for (const auto& m : models)
      for (std::size_t k : ks) {
        auto it = cell.find({m, pathology, finding, k});
        if (it == cell.end()) {
          line.push_back("-");
        } else if (it->second->n == 0) {
          line.push_back("n=0");
        } else {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.2f", it->second->mean_recall);
          line.push_back(buf);
        }
      }
    table.push_back(line);
  }

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : table)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::string out;
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t c = 0; c < table[r].size(); ++c) {
      const auto& s = table[r][c];
      const std::size_t pad = width[c] - s.size();
      if (c < 2)
        out += s + std::string(pad, ' ');
      else
        out += std::string(pad, ' ') + s;
      if (c + 1 < table[r].size()) out += "  ";
    }
    out += "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t w : width) total += w + 2;
      out += std::string(total - 2, '-') + "\n";
    }
  }
  return out;
}

}  // namespace ccf

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ccf/concept_bank.hpp"
#include "ccf/perturbation.hpp"
#include "ccf/projector.hpp"
#include "ccf/rng.hpp"

namespace ccf {

struct SynthConfig {
  std::size_t dim_clf = 32;
  std::size_t dim_vlm = 32;
  std::size_t n_concepts = 24;
  std::size_t n_instances = 100;
  double margin = 1.0;
  std::uint64_t seed = 0;
  std::size_t n_classes = 2;         // class 0 is "No Finding"
  double positive_fraction = 0.0;    // share of instances labelled with a pathology class
  double concept_noise = 0.04;       // max norm of the perturbation added to each basis direction
  double head_scale = 1.0;           // norm of each pathology logit direction

  // k=512 VLM embeddings and the 192-concept bank of the reference setup.
  static SynthConfig paper_scale(std::uint64_t seed, std::size_t dim_clf = 512) {
    SynthConfig c;
    c.dim_clf = dim_clf;
    c.dim_vlm = 512;
    c.n_concepts = 192;
    c.n_instances = 100;
    c.seed = seed;
    return c;
  }
};

// A generated joint-embedding universe with an exact linear map between the
// two spaces (v = A f, A with orthonormal rows or columns, so A+ = A^T) and a
// linear head whose pathology directions are aligned with planted concepts.
struct SynthWorld {
  SynthConfig config;
  Matrix map;  // k x d
  ConceptBank bank;
  ClassifierHead head;
  Matrix instances;             // n x d
  std::vector<std::size_t> labels;
  std::map<std::size_t, std::size_t> planted;  // class -> concept index

  std::size_t dim_clf() const { return map.cols(); }
  std::size_t dim_vlm() const { return map.rows(); }

  ProjectorPair exact_projectors() const {
    return {MlpParams::from_affine(map, Vector(map.rows(), 0.0)),
            MlpParams::from_affine(map.transposed(), Vector(map.cols(), 0.0))};
  }

  // v_I(x) = A f(x) for every instance.
  Matrix vlm_embeddings() const {
    Matrix v(instances.rows(), map.rows());
    for (std::size_t i = 0; i < instances.rows(); ++i) std::ranges::copy(matvec(map, instances.row(i)), v.row(i).begin());
    return v;
  }

  std::vector<std::size_t> instances_of(std::size_t cls) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) out.push_back(i);
    return out;
  }
};

namespace detail {

// Gram-Schmidt (two passes) of `count` random Gaussian vectors in R^dim,
// optionally continuing an existing orthonormal set.
inline std::vector<Vector> orthonormal_vectors(std::size_t dim, std::size_t count, SeededRng& rng,
                                               std::vector<Vector> basis = {}) {
  while (basis.size() < count) {
    Vector v(dim);
    for (double& x : v) x = rng.normal();
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) axpy(-dot(v, b), b, v);
    if (norm2(v) < 1e-6) continue;
    basis.push_back(l2_normalize(v));
  }
  return basis;
}

// Solves the small SPD system G x = r by Gaussian elimination with partial pivoting.
inline Vector solve_small(Matrix g, Vector r) {
  const std::size_t n = r.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t i = c + 1; i < n; ++i)
      if (std::abs(g(i, c)) > std::abs(g(piv, c))) piv = i;
    require(std::abs(g(piv, c)) > 1e-12, ErrorKind::InfeasibleConfig, "singular head direction system");
    if (piv != c) {
      for (std::size_t j = 0; j < n; ++j) std::swap(g(c, j), g(piv, j));
      std::swap(r[c], r[piv]);
    }
    for (std::size_t i = c + 1; i < n; ++i) {
      const double f = g(i, c) / g(c, c);
      for (std::size_t j = c; j < n; ++j) g(i, j) -= f * g(c, j);
      r[i] -= f * r[c];
    }
  }
  Vector x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = r[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= g(i, j) * x[j];
    x[i] = s / g(i, i);
  }
  return x;
}

}  // namespace detail

inline std::string synth_class_name(std::size_t cls) {
  return cls == 0 ? kNoFinding : "Pathology " + std::to_string(cls);
}

// Pure function of its configuration.
//
// Construction:
//  - A (k x d): orthonormal rows if k <= d, orthonormal columns otherwise.
//  - Concept i = normalize(e_i + n_i), e_i from a random orthonormal basis of
//    R^k (spanning col(A) first when k > d), |n_i| <= concept_noise.
//  - Pathology class c has head row head_scale * A^T planted_c and bias 0;
//    the no-finding row is zero.
//  - Each instance is Gaussian, then shifted within span(head rows) so that
//    every pathology logit sits margin + U(0, margin) below the no-finding
//    logit (or, for a positive instance, its own class that far above).
inline SynthWorld gen_world(const SynthConfig& cfg) {
  require(cfg.n_concepts <= cfg.dim_vlm, ErrorKind::InfeasibleConfig,
          std::to_string(cfg.n_concepts) + " concepts cannot be near-orthogonal in " + std::to_string(cfg.dim_vlm) +
              " dimensions");
  require(cfg.margin > 0.0, ErrorKind::InfeasibleConfig, "margin must be > 0");
  require(cfg.n_classes >= 2, ErrorKind::InfeasibleConfig, "need at least 2 classes");
  require(cfg.n_classes - 1 <= cfg.n_concepts && cfg.n_classes - 1 <= std::min(cfg.dim_clf, cfg.dim_vlm),
          ErrorKind::InfeasibleConfig, "too many pathology classes for the concept count or dimensions");
  require(cfg.n_concepts >= 1 && cfg.dim_clf >= 1, ErrorKind::InfeasibleConfig, "empty world");
  require(cfg.positive_fraction >= 0.0 && cfg.positive_fraction <= 1.0, ErrorKind::InfeasibleConfig,
          "positive_fraction must lie in [0, 1]");
  require(cfg.concept_noise >= 0.0 && cfg.concept_noise < 0.5, ErrorKind::InfeasibleConfig,
          "concept_noise must lie in [0, 0.5)");

  SeededRng rng(cfg.seed);
  const std::size_t d = cfg.dim_clf, k = cfg.dim_vlm;

  Matrix a(k, d);
  std::vector<Vector> basis;
  std::size_t in_span = k;  // basis vectors [0, in_span) lie in col(A)
  if (k <= d) {
    const auto rows = detail::orthonormal_vectors(d, k, rng);
    for (std::size_t r = 0; r < k; ++r) std::ranges::copy(rows[r], a.row(r).begin());
    basis = detail::orthonormal_vectors(k, cfg.n_concepts, rng);
  } else {
    const auto cols = detail::orthonormal_vectors(k, d, rng);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t r = 0; r < k; ++r) a(r, c) = cols[c][r];
    basis = detail::orthonormal_vectors(k, cfg.n_concepts, rng, cols);
    in_span = d;
  }

  // Assign basis vectors to concepts by a seeded permutation; pathology
  // classes are planted on concepts whose basis vector lies in col(A).
  std::vector<std::size_t> perm(cfg.n_concepts);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);

  Matrix directions(cfg.n_concepts, k);
  for (std::size_t i = 0; i < cfg.n_concepts; ++i) {
    Vector noise(k);
    for (double& x : noise) x = rng.normal();
    const double scale = cfg.concept_noise * rng.uniform() / std::max(norm2(noise), 1e-300);
    Vector c = basis[perm[i]];
    axpy(scale, noise, c);
    std::ranges::copy(l2_normalize(c), directions.row(i).begin());
  }

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < cfg.n_concepts; ++i)
    if (perm[i] < in_span) candidates.push_back(i);
  rng.shuffle(candidates);
  require(candidates.size() >= cfg.n_classes - 1, ErrorKind::InfeasibleConfig,
          "not enough concepts inside the classifier-visible subspace");

  std::map<std::size_t, std::size_t> planted;
  std::vector<std::string> concept_names(cfg.n_concepts);
  for (std::size_t i = 0; i < cfg.n_concepts; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "concept_%03zu", i);
    concept_names[i] = buf;
  }
  for (std::size_t cls = 1; cls < cfg.n_classes; ++cls) {
    planted[cls] = candidates[cls - 1];
    concept_names[candidates[cls - 1]] = synth_class_name(cls);
  }

  Matrix head_w(cfg.n_classes, d);
  std::vector<std::string> class_names;
  for (std::size_t cls = 0; cls < cfg.n_classes; ++cls) class_names.push_back(synth_class_name(cls));
  for (std::size_t cls = 1; cls < cfg.n_classes; ++cls) {
    const Vector u = matvec_t(a, directions.row(planted[cls]));
    const double n = norm2(u);
    require(n > 1e-9, ErrorKind::InfeasibleConfig, "planted concept invisible to the classifier");
    for (std::size_t j = 0; j < d; ++j) head_w(cls, j) = cfg.head_scale * u[j] / n;
  }
  ClassifierHead head(head_w, Vector(cfg.n_classes, 0.0), class_names);

  // Gram matrix of the pathology rows, for placing instances.
  const std::size_t np = cfg.n_classes - 1;
  Matrix gram(np, np);
  for (std::size_t i = 0; i < np; ++i)
    for (std::size_t j = 0; j < np; ++j) gram(i, j) = dot(head_w.row(i + 1), head_w.row(j + 1));

  Matrix instances(cfg.n_instances, d);
  std::vector<std::size_t> labels(cfg.n_instances, 0);
  const auto n_pos = static_cast<std::size_t>(std::llround(cfg.positive_fraction * static_cast<double>(cfg.n_instances)));
  for (std::size_t i = 0; i < cfg.n_instances; ++i) {
    const std::size_t label = i < n_pos ? 1 + i % np : 0;
    Vector f(d);
    for (double& x : f) x = rng.normal();
    Vector want(np), have(np);
    for (std::size_t c = 0; c < np; ++c) {
      const double gap = cfg.margin * (1.0 + rng.uniform());
      want[c] = label == c + 1 ? gap : -gap;
      have[c] = dot(head_w.row(c + 1), f);
    }
    Vector rhs(np);
    for (std::size_t c = 0; c < np; ++c) rhs[c] = want[c] - have[c];
    const Vector coef = detail::solve_small(gram, rhs);
    for (std::size_t c = 0; c < np; ++c) axpy(coef[c], head_w.row(c + 1), f);
    std::ranges::copy(f, instances.row(i).begin());
    labels[i] = argmax(classify(head, f));
  }

  return SynthWorld{cfg, std::move(a), ConceptBank(std::move(concept_names), std::move(directions)), std::move(head),
                    std::move(instances), std::move(labels), std::move(planted)};
}

struct BruteForceOptions {
  double bound = 100.0;    // largest |s| scanned
  double grid_step = 0.05;
  double tolerance = 1e-6;  // bisection bracket width
};

struct BruteForceResult {
  std::size_t concept_index = 0;
  double magnitude = 0.0;  // minimal |s|
  double scale = 0.0;      // signed s achieving the flip
};

namespace detail {

// Smallest grid-bracketed s in (from, limit] along `sign` that flips the
// prediction, refined by bisection; nullopt if no grid point flips. Grid
// points are multiples of grid_step. Flip regions narrower than the grid
// step can be missed.
template <typename Predicts>
std::optional<double> first_flip(Predicts&& flips_at, double sign, double from, double limit,
                                 const BruteForceOptions& opt) {
  double lo = from;
  for (auto i = static_cast<std::size_t>(std::floor(from / opt.grid_step + 0.5)) + 1;; ++i) {
    const double s = std::min(static_cast<double>(i) * opt.grid_step, limit);
    if (s <= lo) return std::nullopt;
    if (flips_at(sign * s)) {
      double hi = s;
      while (hi - lo > opt.tolerance) {
        const double mid = 0.5 * (lo + hi);
        (flips_at(sign * mid) ? hi : lo) = mid;
      }
      return hi;
    }
    lo = s;
    if (s >= limit) return std::nullopt;
  }
}

}  // namespace detail

// Single-concept oracle: for every concept j, the minimal |s| such that
// g(p_out(p_in(f) + s c_j)) predicts the target, scanning both signs up to
// the bound. Returns the concept with the smallest such |s| (lower index on
// ties).
//
// The scan runs over doubling radius bands (0, r], (r, 2r], ... for all
// concepts at once and stops after the first band containing a flip, so
// the cost scales with the answer rather than with the bound.
inline BruteForceResult brute_force_best_concept(std::span<const double> features, const ConceptBank& bank,
                                                 const ProjectorPair& pair, const ClassifierHead& head,
                                                 std::size_t target, const BruteForceOptions& opt = {}) {
  require(target < head.num_classes(), ErrorKind::InvalidTarget, "target out of range");
  require(opt.grid_step > 0.0 && opt.bound > 0.0 && opt.tolerance > 0.0, ErrorKind::InvalidConfig,
          "brute-force options must be positive");
  const PerturbationProblem problem(features, bank, pair, head);
  Vector w(bank.size(), 0.0);
  require(argmax(problem.logits(w)) != target, ErrorKind::AlreadyTarget, "instance already predicts the target");
  std::optional<BruteForceResult> best;
  double from = 0.0;
  double radius = std::min(opt.bound, 16.0 * opt.grid_step);
  while (!best) {
    for (std::size_t j = 0; j < bank.size(); ++j) {
      auto flips_at = [&](double s) {
        w[j] = s;
        const bool hit = argmax(problem.logits(w)) == target;
        w[j] = 0.0;
        return hit;
      };
      for (double sign : {1.0, -1.0}) {
        const double limit = best ? best->magnitude : radius;
        const auto s = detail::first_flip(flips_at, sign, from, limit, opt);
        if (s && (!best || *s < best->magnitude)) best = BruteForceResult{j, *s, sign * *s};
      }
    }
    if (radius >= opt.bound) break;
    from = radius;
    radius = std::min(opt.bound, 2.0 * radius);
  }
  require(best.has_value(), ErrorKind::Infeasible,
          "no single concept flips the prediction within |s| <= " + std::to_string(opt.bound));
  return *best;
}

inline BruteForceResult brute_force_best_concept(const SynthWorld& world, std::size_t instance, std::size_t target,
                                                 const BruteForceOptions& opt = {}) {
  require(instance < world.instances.rows(), ErrorKind::SizeMismatch, "instance index out of range");
  const ProjectorPair pair = world.exact_projectors();
  return brute_force_best_concept(world.instances.row(instance), world.bank, pair, world.head, target, opt);
}

}  // namespace ccf

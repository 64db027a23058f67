#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "ccf/concept_bank.hpp"
#include "ccf/matrix.hpp"
#include "ccf/projector.hpp"

namespace ccf {

inline const std::string kNoFinding = "No Finding";

// Frozen linear head of the black-box classifier: logits = W f + b.
class ClassifierHead {
 public:
  ClassifierHead(Matrix weights, Vector bias, std::vector<std::string> class_names,
                 std::string no_finding = kNoFinding)
      : w_(std::move(weights)), b_(std::move(bias)), names_(std::move(class_names)), no_finding_(std::move(no_finding)) {
    require(w_.rows() >= 2, ErrorKind::DimensionMismatch, "head needs at least 2 classes");
    require(b_.size() == w_.rows(), ErrorKind::DimensionMismatch,
            "head bias has " + std::to_string(b_.size()) + " entries for " + std::to_string(w_.rows()) + " classes");
    require(names_.size() == w_.rows(), ErrorKind::SizeMismatch,
            std::to_string(names_.size()) + " class names for " + std::to_string(w_.rows()) + " classes");
    require(w_.all_finite() && std::ranges::all_of(b_, [](double v) { return std::isfinite(v); }),
            ErrorKind::NonFiniteEntry, "head has non-finite parameters");
    require(std::ranges::find(names_, no_finding_) != names_.end(), ErrorKind::InvalidTarget,
            "head classes do not include the no-finding class '" + no_finding_ + "'");
  }

  std::size_t num_classes() const noexcept { return w_.rows(); }
  std::size_t input_dim() const noexcept { return w_.cols(); }
  const Matrix& weights() const noexcept { return w_; }
  const Vector& bias() const noexcept { return b_; }
  const std::vector<std::string>& class_names() const noexcept { return names_; }
  const std::string& no_finding() const noexcept { return no_finding_; }

  std::size_t class_index(const std::string& name) const {
    auto it = std::ranges::find(names_, name);
    require(it != names_.end(), ErrorKind::InvalidTarget, "unknown class '" + name + "'");
    return static_cast<std::size_t>(it - names_.begin());
  }

  friend bool operator==(const ClassifierHead&, const ClassifierHead&) = default;

 private:
  Matrix w_;
  Vector b_;
  std::vector<std::string> names_;
  std::string no_finding_;
};

inline Vector classify(const ClassifierHead& head, std::span<const double> features) {
  require(features.size() == head.input_dim(), ErrorKind::DimensionMismatch,
          "features dim " + std::to_string(features.size()) + " != head input dim " + std::to_string(head.input_dim()));
  Vector logits = matvec(head.weights(), features);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += head.bias()[i];
  return logits;
}

enum class L2Mode { norm, squared_norm };

struct PerturbationConfig {
  double alpha = 0.1;
  double beta = 0.1;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  std::size_t max_steps = 100;
  L2Mode l2_mode = L2Mode::norm;

  void validate() const {
    require(alpha >= 0.0 && beta >= 0.0, ErrorKind::InvalidConfig, "alpha and beta must be >= 0");
    require(learning_rate > 0.0, ErrorKind::InvalidConfig, "learning_rate must be > 0");
    require(momentum >= 0.0 && momentum < 1.0, ErrorKind::InvalidConfig, "momentum must lie in [0, 1)");
    require(max_steps >= 1, ErrorKind::InvalidConfig, "max_steps must be >= 1");
  }
};

struct PerturbationLoss {
  double total = 0.0;  // ce + alpha * l1 + beta * l2
  double ce = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;  // |w|_2, or |w|_2^2 under squared_norm
};

inline PerturbationLoss perturbation_loss(std::span<const double> logits, std::size_t target,
                                          std::span<const double> w, const PerturbationConfig& cfg) {
  require(target < logits.size(), ErrorKind::InvalidTarget,
          "target index " + std::to_string(target) + " out of " + std::to_string(logits.size()) + " classes");
  PerturbationLoss l;
  l.ce = log_sum_exp(logits) - logits[target];
  l.l1 = norm1(w);
  l.l2 = cfg.l2_mode == L2Mode::norm ? norm2(w) : dot(w, w);
  l.total = l.ce + cfg.alpha * l.l1 + cfg.beta * l.l2;
  return l;
}

// One explanation problem: a fixed input pushed through frozen projectors,
// bank and head. base = p_in(f_x) is computed once.
class PerturbationProblem {
 public:
  PerturbationProblem(std::span<const double> features, const ConceptBank& bank, const ProjectorPair& pair,
                      const ClassifierHead& head)
      : bank_(bank), pair_(pair), head_(head) {
    require(features.size() == pair.clf_dim(), ErrorKind::DimensionMismatch,
            "features dim " + std::to_string(features.size()) + " != projector input dim " +
                std::to_string(pair.clf_dim()));
    require(bank.dim() == pair.vlm_dim(), ErrorKind::DimensionMismatch,
            "bank dim " + std::to_string(bank.dim()) + " != VLM dim " + std::to_string(pair.vlm_dim()));
    require(head.input_dim() == pair.clf_dim(), ErrorKind::DimensionMismatch,
            "head input dim " + std::to_string(head.input_dim()) + " != classifier dim " +
                std::to_string(pair.clf_dim()));
    base_ = pair.in(features);
  }

  const ConceptBank& bank() const noexcept { return bank_; }
  const ClassifierHead& head() const noexcept { return head_; }

  // p_in(f) + w^T C
  Vector displaced(std::span<const double> w) const {
    Vector z = bank_.combine(w);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += base_[i];
    return z;
  }

  Vector logits(std::span<const double> w) const { return classify(head_, pair_.out(displaced(w))); }

  struct Evaluation {
    Vector logits;
    PerturbationLoss loss;
    Vector grad;  // dL/dw
  };

  Evaluation evaluate(std::span<const double> w, std::size_t target, const PerturbationConfig& cfg) const {
    require(target < head_.num_classes(), ErrorKind::InvalidTarget,
            "target index " + std::to_string(target) + " out of " + std::to_string(head_.num_classes()) + " classes");
    Evaluation ev;
    const Vector z = displaced(w);
    const Vector gz = pair_.out.forward_vjp(z, [&](const Vector& y) {
      ev.logits = classify(head_, y);
      Vector g_logits = softmax(ev.logits);
      g_logits[target] -= 1.0;
      return matvec_t(head_.weights(), g_logits);
    });
    ev.loss = perturbation_loss(ev.logits, target, w, cfg);
    ev.grad = matvec(bank_.directions(), gz);
    // Subgradient 0 at w_i == 0 and at w == 0.
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] > 0.0) ev.grad[i] += cfg.alpha;
      if (w[i] < 0.0) ev.grad[i] -= cfg.alpha;
    }
    if (cfg.l2_mode == L2Mode::squared_norm) {
      axpy(2.0 * cfg.beta, w, ev.grad);
    } else if (ev.loss.l2 > 0.0) {
      axpy(cfg.beta / ev.loss.l2, w, ev.grad);
    }
    return ev;
  }

 private:
  const ConceptBank& bank_;
  const ProjectorPair& pair_;
  const ClassifierHead& head_;
  Vector base_;
};

// g(p_out(p_in(f) + w^T C))
inline Vector perturbed_logits(std::span<const double> features, std::span<const double> w, const ConceptBank& bank,
                               const ProjectorPair& pair, const ClassifierHead& head) {
  return PerturbationProblem(features, bank, pair, head).logits(w);
}

inline Vector perturbation_gradient(std::span<const double> features, std::span<const double> w,
                                    const ConceptBank& bank, const ProjectorPair& pair, const ClassifierHead& head,
                                    std::size_t target, const PerturbationConfig& cfg) {
  return PerturbationProblem(features, bank, pair, head).evaluate(w, target, cfg).grad;
}

struct ExplanationResult {
  Vector w;
  bool flipped = false;
  std::size_t steps_used = 0;
  Vector initial_logits;
  Vector final_logits;
  std::string target_class;
  std::size_t target_index = 0;
  std::size_t source_index = 0;  // prediction at w = 0
  std::vector<double> loss_trace;
};

// Momentum SGD on w from zero, in velocity form:
//   v <- mu v - lr grad;  w <- w + v
// The prediction is checked before the first update and after every
// update; the first step whose argmax equals the target stops the run.
inline ExplanationResult optimize_perturbation(std::span<const double> features, const ConceptBank& bank,
                                               const ProjectorPair& pair, const ClassifierHead& head,
                                               std::size_t target, const PerturbationConfig& cfg) {
  cfg.validate();
  require(target < head.num_classes(), ErrorKind::InvalidTarget,
          "target index " + std::to_string(target) + " out of " + std::to_string(head.num_classes()) + " classes");
  const PerturbationProblem problem(features, bank, pair, head);
  ExplanationResult r;
  r.target_index = target;
  r.target_class = head.class_names()[target];
  r.w.assign(bank.size(), 0.0);
  r.initial_logits = problem.logits(r.w);
  r.final_logits = r.initial_logits;
  r.source_index = argmax(r.initial_logits);
  if (r.source_index == target) {
    r.flipped = true;
    return r;
  }
  Vector velocity(bank.size(), 0.0);
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    const auto ev = problem.evaluate(r.w, target, cfg);
    require(std::isfinite(ev.loss.total), ErrorKind::NonFiniteLoss, "loss is non-finite at step " + std::to_string(step));
    r.loss_trace.push_back(ev.loss.total);
    for (std::size_t i = 0; i < velocity.size(); ++i) {
      velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * ev.grad[i];
      r.w[i] += velocity[i];
    }
    r.steps_used = step;
    r.final_logits = problem.logits(r.w);
    if (argmax(r.final_logits) == target) {
      r.flipped = true;
      break;
    }
  }
  return r;
}

enum class RankDirection { toward_target, away_from_source };

struct RankedConcept {
  std::string name;
  std::size_t index = 0;
  double importance = 0.0;
  friend bool operator==(const RankedConcept&, const RankedConcept&) = default;
};

using RankedConcepts = std::vector<RankedConcept>;

// toward_target: descending signed weight (most added first).
// away_from_source: ascending signed weight (most subtracted first).
// Ties go to the lower concept index.
inline RankedConcepts rank_concepts(std::span<const double> w, const ConceptBank& bank, std::size_t k,
                                    RankDirection direction = RankDirection::toward_target) {
  require(w.size() == bank.size(), ErrorKind::SizeMismatch,
          std::to_string(w.size()) + " weights for " + std::to_string(bank.size()) + " concepts");
  require(k >= 1, ErrorKind::InvalidConfig, "k must be >= 1");
  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) {
    return direction == RankDirection::toward_target ? w[a] > w[b] : w[a] < w[b];
  });
  order.resize(std::min(k, order.size()));
  RankedConcepts out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back({bank.names()[i], i, w[i]});
  return out;
}

inline RankedConcepts rank_concepts(const ExplanationResult& result, const ConceptBank& bank, std::size_t k,
                                    RankDirection direction = RankDirection::toward_target) {
  return rank_concepts(result.w, bank, k, direction);
}

struct TimedExplanation {
  ExplanationResult result;
  double seconds = 0.0;
};

// Explains every row of `features` independently. Rows are split across
// `threads` workers; results keep input order and do not depend on the
// thread count.
inline std::vector<TimedExplanation> explain_batch(const Matrix& features, const ConceptBank& bank,
                                                   const ProjectorPair& pair, const ClassifierHead& head,
                                                   std::size_t target, const PerturbationConfig& cfg,
                                                   std::size_t threads = 1) {
  std::vector<TimedExplanation> out(features.rows());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < features.rows();) {
      try {
        const auto t0 = std::chrono::steady_clock::now();
        out[i].result = optimize_perturbation(features.row(i), bank, pair, head, target, cfg);
        out[i].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, features.rows()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace ccf

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ccf/projector.hpp"
#include "ccf/rng.hpp"

namespace ccf {

struct ProjectorTrainConfig {
  std::size_t batch_size = 64;
  std::size_t max_epochs = 50;
  std::size_t finetune_epochs = 5;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t early_stop_patience = 5;
  double validation_fraction = 0.1;
  std::size_t hidden_in = 512;
  std::size_t hidden_out = 512;
  std::uint64_t seed = 0;

  void validate() const {
    require(batch_size >= 1, ErrorKind::InvalidConfig, "batch_size must be >= 1");
    require(validation_fraction > 0.0 && validation_fraction < 1.0, ErrorKind::InvalidConfig,
            "validation_fraction must lie in (0, 1)");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::InvalidConfig,
            "learning_rate must be positive");
    require(momentum >= 0.0 && momentum < 1.0, ErrorKind::InvalidConfig, "momentum must lie in [0, 1)");
    require(hidden_in >= 1 && hidden_out >= 1, ErrorKind::InvalidConfig, "hidden widths must be >= 1");
  }
};

enum class TrainPhase { init, pretrain_in, pretrain_out, finetune };

constexpr std::string_view to_string(TrainPhase p) {
  switch (p) {
    case TrainPhase::init: return "init";
    case TrainPhase::pretrain_in: return "pretrain_in";
    case TrainPhase::pretrain_out: return "pretrain_out";
    case TrainPhase::finetune: return "finetune";
  }
  return "?";
}

struct HistoryEntry {
  TrainPhase phase = TrainPhase::init;
  std::size_t epoch = 0;
  std::string split;  // "train" or "val"
  ProjectorLosses losses;

  friend bool operator==(const HistoryEntry& a, const HistoryEntry& b) {
    return a.phase == b.phase && a.epoch == b.epoch && a.split == b.split && a.losses.in == b.losses.in &&
           a.losses.out == b.losses.out && a.losses.cyc == b.losses.cyc && a.losses.total == b.losses.total;
  }
};

struct TrainHistory {
  std::vector<HistoryEntry> entries;
  // Best (restored) epoch of each pretraining phase; 0 means the initial
  // parameters were never improved upon.
  std::size_t best_epoch_in = 0;
  std::size_t best_epoch_out = 0;

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

struct TrainResult {
  ProjectorPair pair;
  TrainHistory history;
};

// Raised when a loss turns non-finite; carries the history up to that point.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, TrainHistory history)
      : Error(ErrorKind::NonFiniteLoss, what), history_(std::move(history)) {}
  const TrainHistory& history() const noexcept { return history_; }

 private:
  TrainHistory history_;
};

namespace detail {

inline void momentum_step(MlpParams& params, MlpParams& velocity, const MlpParams& grad, double lr, double mu) {
  auto p = params.tensors();
  auto v = velocity.tensors();
  const auto g = grad.tensors();
  for (std::size_t t = 0; t < p.size(); ++t)
    for (std::size_t i = 0; i < p[t].size(); ++i) {
      v[t][i] = mu * v[t][i] - lr * g[t][i];
      p[t][i] += v[t][i];
    }
}

inline double phase_loss(TrainPhase phase, const ProjectorLosses& l) {
  switch (phase) {
    case TrainPhase::pretrain_in: return l.in;
    case TrainPhase::pretrain_out: return l.out;
    default: return l.total;
  }
}

inline LossTerms phase_terms(TrainPhase phase) {
  switch (phase) {
    case TrainPhase::pretrain_in: return {true, false, false};
    case TrainPhase::pretrain_out: return {false, true, false};
    default: return {true, true, true};
  }
}

class ProjectorTrainer {
 public:
  ProjectorTrainer(const PairedEmbeddingDataset& data, const ProjectorTrainConfig& cfg)
      : data_(data), cfg_(cfg), rng_(cfg.seed), pair_(init_pair(data, cfg, rng_)) {
    auto idx = all_rows(data.size());
    rng_.shuffle(idx);
    auto n_val = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(idx.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
    val_.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }

  TrainResult run() {
    record(TrainPhase::init, 0);
    history_.best_epoch_in = run_pretrain(TrainPhase::pretrain_in);
    history_.best_epoch_out = run_pretrain(TrainPhase::pretrain_out);
    MlpParams vin = zeros_like(pair_.in.mlp());
    MlpParams vout = zeros_like(pair_.out.mlp());
    for (std::size_t e = 1; e <= cfg_.finetune_epochs; ++e) {
      run_epoch(TrainPhase::finetune, vin, vout);
      record(TrainPhase::finetune, e);
    }
    return {pair_, history_};
  }

 private:
  static ProjectorPair init_pair(const PairedEmbeddingDataset& data, const ProjectorTrainConfig& cfg,
                                 SeededRng& rng) {
    require(data.size() >= 2, ErrorKind::EmptyDataset,
            "need at least 2 rows to split train/validation, got " + std::to_string(data.size()));
    cfg.validate();
    // Draw order on the single stream: p_in init, p_out init, split shuffle,
    // then one shuffle per epoch.
    const std::size_t d = data.clf.cols(), k = data.vlm.cols();
    MlpParams pin = MlpParams::glorot(d, cfg.hidden_in, k, rng);
    MlpParams pout = MlpParams::glorot(k, cfg.hidden_out, d, rng);
    return {std::move(pin), std::move(pout)};
  }

  static MlpParams zeros_like(const MlpParams& p) {
    return MlpParams::zeros(p.input_dim(), p.hidden_dim(), p.output_dim());
  }

  ProjectorLosses record(TrainPhase phase, std::size_t epoch) {
    const ProjectorLosses tr = projector_losses(pair_, data_, train_);
    const ProjectorLosses va = projector_losses(pair_, data_, val_);
    history_.entries.push_back({phase, epoch, "train", tr});
    history_.entries.push_back({phase, epoch, "val", va});
    for (double x : {tr.total, va.total})
      if (!std::isfinite(x))
        throw TrainingDiverged("loss became non-finite in " + std::string(to_string(phase)) + " epoch " +
                                   std::to_string(epoch),
                               history_);
    return va;
  }

  void run_epoch(TrainPhase phase, MlpParams& vin, MlpParams& vout) {
    const LossTerms terms = phase_terms(phase);
    rng_.shuffle(train_);
    for (std::size_t start = 0; start < train_.size(); start += cfg_.batch_size) {
      const std::size_t len = std::min(cfg_.batch_size, train_.size() - start);
      const std::span<const std::size_t> batch(train_.data() + start, len);
      const ProjectorGradients g = projector_gradients(pair_, data_, batch, terms);
      if (terms.in || terms.cyc) momentum_step(pair_.in.mlp(), vin, g.in, cfg_.learning_rate, cfg_.momentum);
      if (terms.out || terms.cyc) momentum_step(pair_.out.mlp(), vout, g.out, cfg_.learning_rate, cfg_.momentum);
    }
  }

  // Trains one projector on its own term with early stopping on the
  // validation split; restores the best epoch. Returns that epoch.
  std::size_t run_pretrain(TrainPhase phase) {
    MlpParams vin = zeros_like(pair_.in.mlp());
    MlpParams vout = zeros_like(pair_.out.mlp());
    Projector& trained = phase == TrainPhase::pretrain_in ? pair_.in : pair_.out;
    double best = phase_loss(phase, projector_losses(pair_, data_, val_));
    std::size_t best_epoch = 0;
    MlpParams best_params = trained.mlp();
    std::size_t stale = 0;
    for (std::size_t e = 1; e <= cfg_.max_epochs; ++e) {
      run_epoch(phase, vin, vout);
      const double val = phase_loss(phase, record(phase, e));
      if (val < best) {
        best = val;
        best_epoch = e;
        best_params = trained.mlp();
        stale = 0;
      } else if (++stale >= cfg_.early_stop_patience) {
        break;
      }
    }
    trained.mlp() = std::move(best_params);
    return best_epoch;
  }

  const PairedEmbeddingDataset& data_;
  ProjectorTrainConfig cfg_;
  SeededRng rng_;
  ProjectorPair pair_;
  std::vector<std::size_t> train_;
  std::vector<std::size_t> val_;
  TrainHistory history_;
};

}  // namespace detail

// Pretrains p_in on the in-term and p_out on the out-term (each with early
// stopping on a held-out split), then fine-tunes both on the total loss for
// a fixed number of epochs. Deterministic for a fixed seed.
inline TrainResult train_projectors(const PairedEmbeddingDataset& data, const ProjectorTrainConfig& cfg) {
  require(data.size() > 0, ErrorKind::EmptyDataset, "no training rows");
  return detail::ProjectorTrainer(data, cfg).run();
}

}  // namespace ccf

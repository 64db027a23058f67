#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace ccf;

namespace {

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected ccf::Error";
  return ErrorKind::Io;
}

MlpParams identity_mlp(std::size_t n) {
  return {Matrix::identity(n), Vector(n, 0.0), Matrix::identity(n), Vector(n, 0.0)};
}

// Initial parameters train_projectors starts from for this config.
ProjectorPair initial_pair(std::size_t d, std::size_t k, const ProjectorTrainConfig& cfg) {
  SeededRng rng(cfg.seed);
  MlpParams pin = MlpParams::glorot(d, cfg.hidden_in, k, rng);
  MlpParams pout = MlpParams::glorot(k, cfg.hidden_out, d, rng);
  return {std::move(pin), std::move(pout)};
}

}  // namespace

TEST(Mlp, IdentityWeightsClipNegatives) {
  EXPECT_EQ(mlp_forward(identity_mlp(2), Vector{1, -1}), (Vector{1, 0}));
}

TEST(Mlp, ZeroInputYieldsOutputBias) {
  MlpParams p = identity_mlp(2);
  p.b2 = {5, 5};
  EXPECT_EQ(mlp_forward(p, Vector{0, 0}), (Vector{5, 5}));
}

TEST(Mlp, MatchesStraightLineOracle) {
  SeededRng rng(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t in = 1 + rng.below(9), h = 1 + rng.below(17), out = 1 + rng.below(9);
    const MlpParams p = oracle::random_mlp(in, h, out, rng);
    const Vector x = oracle::random_vector(in, rng);
    const Vector y = mlp_forward(p, x), ref = oracle::mlp_reference(p, x);
    for (std::size_t i = 0; i < out; ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Mlp, FromAffineIsExact) {
  SeededRng rng(2);
  for (int t = 0; t < 50; ++t) {
    const Matrix a = oracle::random_matrix(1 + rng.below(6), 1 + rng.below(6), rng);
    const Vector b = oracle::random_vector(a.rows(), rng);
    const MlpParams p = MlpParams::from_affine(a, b);
    const Vector x = oracle::random_vector(a.cols(), rng);
    Vector expect = matvec(a, x);
    for (std::size_t i = 0; i < b.size(); ++i) expect[i] += b[i];
    EXPECT_EQ(mlp_forward(p, x), expect);
  }
}

TEST(Mlp, GlorotBoundsAndZeroBiases) {
  SeededRng rng(3);
  const MlpParams p = MlpParams::glorot(10, 30, 6, rng);
  const double l1 = std::sqrt(6.0 / 40.0), l2 = std::sqrt(6.0 / 36.0);
  for (double v : p.w1.data()) EXPECT_LE(std::abs(v), l1);
  for (double v : p.w2.data()) EXPECT_LE(std::abs(v), l2);
  for (double v : p.b1) EXPECT_EQ(v, 0.0);
  for (double v : p.b2) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(p.parameter_count(), 10u * 30 + 30 + 30 * 6 + 6);
}

TEST(ProjectorLoss, IdentityWorldIsZero) {
  SeededRng rng(4);
  const Matrix f = oracle::random_matrix(16, 3, rng);
  const PairedEmbeddingDataset data(f, f);
  const auto l = projector_losses(ProjectorPair::identity(3), data);
  EXPECT_EQ(l.in, 0.0);
  EXPECT_EQ(l.out, 0.0);
  EXPECT_EQ(l.cyc, 0.0);
  EXPECT_EQ(l.total, 0.0);
}

TEST(ProjectorLoss, HandComputedTwoDimensional) {
  // p_in = p_out = relu-clipped identity; f = (1,-1), v = (2,0):
  //   p_in(f) = (1,0)      -> L_in  = 1
  //   p_out(v) = (2,0)     -> L_out = 1 + 1 = 2
  //   p_out((1,0)) = (1,0) -> L_cyc = 1
  const ProjectorPair pair{identity_mlp(2), identity_mlp(2)};
  const PairedEmbeddingDataset data(Matrix(1, 2, {1, -1}), Matrix(1, 2, {2, 0}));
  const auto l = projector_losses(pair, data);
  EXPECT_DOUBLE_EQ(l.in, 1.0);
  EXPECT_DOUBLE_EQ(l.out, 2.0);
  EXPECT_DOUBLE_EQ(l.cyc, 1.0);
  EXPECT_DOUBLE_EQ(l.total, 4.0);
}

TEST(ProjectorLoss, TotalIsExactSum) {
  SeededRng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(10);
    const ProjectorPair pair{oracle::random_mlp(d, 4, k, rng), oracle::random_mlp(k, 5, d, rng)};
    const PairedEmbeddingDataset data(oracle::random_matrix(n, d, rng), oracle::random_matrix(n, k, rng));
    const auto l = projector_losses(pair, data);
    EXPECT_EQ(l.total, l.in + l.out + l.cyc);
  }
}

TEST(ProjectorLoss, Errors) {
  const PairedEmbeddingDataset data(Matrix(2, 2), Matrix(2, 3));
  EXPECT_EQ(kind_of([&] { projector_losses(ProjectorPair::identity(2), data); }), ErrorKind::DimensionMismatch);
  EXPECT_EQ(kind_of([] { PairedEmbeddingDataset(Matrix(2, 2), Matrix(3, 2)); }), ErrorKind::SizeMismatch);
  const std::vector<std::size_t> none;
  const PairedEmbeddingDataset ok(Matrix(2, 2), Matrix(2, 2));
  EXPECT_EQ(kind_of([&] { projector_losses(ProjectorPair::identity(2), ok, none); }), ErrorKind::EmptyBatch);
}

TEST(ProjectorGradient, ZeroBatchGivesZeroWeightGradients) {
  SeededRng rng(6);
  MlpParams pin = oracle::random_mlp(3, 5, 4, rng), pout = oracle::random_mlp(4, 5, 3, rng);
  std::ranges::fill(pin.b1, 0.0);
  std::ranges::fill(pin.b2, 0.0);
  std::ranges::fill(pout.b1, 0.0);
  std::ranges::fill(pout.b2, 0.0);
  const PairedEmbeddingDataset data(Matrix(4, 3), Matrix(4, 4));
  const auto g = projector_gradients({pin, pout}, data);
  for (const MlpParams* p : {&g.in, &g.out})
    for (const auto& t : p->tensors())
      for (double v : t) EXPECT_EQ(v, 0.0);
}

// Every parameter of both MLPs, for each combination of active terms,
// against central differences of the corresponding loss.
TEST(ProjectorGradient, MatchesFiniteDifferences) {
  SeededRng rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 24; ++trial) {
    const std::size_t d = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(6);
    ProjectorPair pair{oracle::random_mlp(d, 1 + rng.below(8), k, rng), oracle::random_mlp(k, 1 + rng.below(8), d, rng)};
    const PairedEmbeddingDataset data(oracle::random_matrix(n, d, rng), oracle::random_matrix(n, k, rng));
    for (const LossTerms terms : {LossTerms{true, true, true}, LossTerms{true, false, false},
                                  LossTerms{false, true, false}, LossTerms{false, false, true}}) {
      auto loss = [&] {
        const auto l = projector_losses(pair, data);
        return (terms.in ? l.in : 0.0) + (terms.out ? l.out : 0.0) + (terms.cyc ? l.cyc : 0.0);
      };
      const auto g = projector_gradients(pair, data, terms);
      for (int side = 0; side < 2; ++side) {
        MlpParams& p = side == 0 ? pair.in.mlp() : pair.out.mlp();
        const MlpParams& gp = side == 0 ? g.in : g.out;
        auto pt = p.tensors();
        const auto gt = gp.tensors();
        for (std::size_t t = 0; t < 4; ++t)
          for (std::size_t i = 0; i < pt[t].size(); ++i) {
            const double x0 = pt[t][i];
            pt[t][i] = x0 + 1e-6;
            const double lp = loss();
            pt[t][i] = x0 - 1e-6;
            const double lm = loss();
            pt[t][i] = x0;
            const double fd = (lp - lm) / 2e-6;
            const double err = oracle::rel_error(gt[t][i], fd);
            worst = std::max(worst, err);
            ASSERT_LT(err, 1e-5) << "trial " << trial << " side " << side << " tensor " << t << " index " << i
                                 << ": analytic " << gt[t][i] << " fd " << fd;
          }
      }
    }
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(ProjectorGradient, IdentityProjectorsHaveNoParameters) {
  const PairedEmbeddingDataset data(Matrix(1, 2), Matrix(1, 2));
  EXPECT_EQ(kind_of([&] { projector_gradients(ProjectorPair::identity(2), data); }), ErrorKind::InvalidConfig);
}

TEST(ProjectorTrain, SameSeedBitIdentical) {
  const auto data = oracle::linear_world(6, 120, 11);
  ProjectorTrainConfig cfg;
  cfg.hidden_in = cfg.hidden_out = 16;
  cfg.max_epochs = 8;
  cfg.finetune_epochs = 2;
  cfg.learning_rate = 1e-2;
  cfg.seed = 99;
  const auto a = train_projectors(data, cfg);
  const auto b = train_projectors(data, cfg);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.pair.in.mlp(), b.pair.in.mlp());
  EXPECT_EQ(a.pair.out.mlp(), b.pair.out.mlp());
  cfg.seed = 100;
  const auto c = train_projectors(data, cfg);
  EXPECT_NE(a.pair.in.mlp(), c.pair.in.mlp());
}

TEST(ProjectorTrain, EarlyStoppingRestoresBestEpoch) {
  SeededRng rng(12);
  // Pure-noise targets: validation loss stops improving quickly.
  const PairedEmbeddingDataset data(oracle::random_matrix(80, 4, rng), oracle::random_matrix(80, 4, rng));
  ProjectorTrainConfig cfg;
  cfg.hidden_in = cfg.hidden_out = 32;
  cfg.learning_rate = 5e-2;
  cfg.max_epochs = 50;
  cfg.early_stop_patience = 3;
  cfg.finetune_epochs = 0;
  cfg.seed = 1;
  const auto res = train_projectors(data, cfg);
  const auto& h = res.history;

  auto val_entries = [&](TrainPhase phase) {
    std::vector<HistoryEntry> out;
    for (const auto& e : h.entries)
      if (e.phase == phase && e.split == "val") out.push_back(e);
    return out;
  };
  double init_val_in = 0.0;
  for (const auto& e : h.entries)
    if (e.phase == TrainPhase::init && e.split == "val") init_val_in = e.losses.in;

  const auto in_val = val_entries(TrainPhase::pretrain_in);
  ASSERT_FALSE(in_val.empty());
  double best = init_val_in;
  std::size_t best_epoch = 0;
  for (const auto& e : in_val)
    if (e.losses.in < best) {
      best = e.losses.in;
      best_epoch = e.epoch;
    }
  EXPECT_EQ(h.best_epoch_in, best_epoch);
  const std::size_t ran = in_val.back().epoch;
  EXPECT_LE(ran, std::min(cfg.max_epochs, best_epoch + cfg.early_stop_patience));
  if (ran < cfg.max_epochs) EXPECT_EQ(ran, best_epoch + cfg.early_stop_patience);

  // Every pretrain_out record sees the restored p_in.
  for (const auto& e : val_entries(TrainPhase::pretrain_out)) EXPECT_EQ(e.losses.in, best);
  EXPECT_TRUE(val_entries(TrainPhase::finetune).empty());
}

TEST(ProjectorTrain, IdentityWorldReachesTinyLoss) {
  SeededRng rng(13);
  Matrix f(512, 8);
  for (double& v : f.data()) v = rng.uniform();
  const PairedEmbeddingDataset data(f, f);
  ProjectorTrainConfig cfg;
  cfg.hidden_in = cfg.hidden_out = 32;
  cfg.learning_rate = 3e-2;
  cfg.seed = 5;
  const double initial = projector_losses(initial_pair(8, 8, cfg), data).total;
  const auto res = train_projectors(data, cfg);
  const double final_total = projector_losses(res.pair, data).total;
  EXPECT_LE(final_total, 1e-4 * initial) << "initial " << initial << " final " << final_total;
}

TEST(ProjectorTrain, LinearWorldInLossDropsThreeOrders) {
  const auto data = oracle::linear_world(32, 2048, 21);
  ProjectorTrainConfig cfg;
  cfg.hidden_in = cfg.hidden_out = 128;
  cfg.learning_rate = 1e-2;
  cfg.seed = 3;
  const double initial = projector_losses(initial_pair(32, 32, cfg), data).in;
  const auto res = train_projectors(data, cfg);
  const double final_in = projector_losses(res.pair, data).in;
  EXPECT_LE(final_in, 1e-3 * initial) << "initial " << initial << " final " << final_in;
}

TEST(ProjectorTrain, DivergenceRaisesWithHistory) {
  const auto data = oracle::linear_world(4, 64, 2);
  PairedEmbeddingDataset scaled = data;
  for (double& v : scaled.clf.data()) v *= 1e3;
  for (double& v : scaled.vlm.data()) v *= 1e3;
  ProjectorTrainConfig cfg;
  cfg.hidden_in = cfg.hidden_out = 16;
  cfg.learning_rate = 1.0;
  cfg.seed = 1;
  try {
    train_projectors(scaled, cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFiniteLoss);
    EXPECT_FALSE(e.history().entries.empty());
  }
}

TEST(ProjectorTrain, ConfigAndDatasetErrors) {
  const auto data = oracle::linear_world(3, 10, 1);
  ProjectorTrainConfig cfg;
  cfg.validation_fraction = 1.0;
  EXPECT_EQ(kind_of([&] { train_projectors(data, cfg); }), ErrorKind::InvalidConfig);
  const PairedEmbeddingDataset one(Matrix(1, 3), Matrix(1, 3));
  EXPECT_EQ(kind_of([&] { train_projectors(one, ProjectorTrainConfig{}); }), ErrorKind::EmptyDataset);
}

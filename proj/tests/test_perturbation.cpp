#include <gtest/gtest.h>

#include <cmath>

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

ClassifierHead eye_head() { return ClassifierHead(Matrix::identity(2), {0, 0}, {kNoFinding, "P"}); }

ConceptBank three_concepts() {
  return ConceptBank({"concept_0", "concept_1", "concept_2"}, Matrix::identity(3));
}

}  // namespace

TEST(Head, ZeroWeightsGiveUniformSoftmax) {
  const ClassifierHead h(Matrix(3, 4), {0, 0, 0}, {kNoFinding, "A", "B"});
  const Vector l = classify(h, Vector{1, 2, 3, 4});
  EXPECT_EQ(l, (Vector{0, 0, 0}));
  for (double p : softmax(l)) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
}

TEST(Head, IdentityHeadHandExample) {
  const Vector l = classify(eye_head(), Vector{1, 3});
  EXPECT_EQ(l, (Vector{1, 3}));
  EXPECT_EQ(argmax(l), 1u);
}

TEST(Head, MatchesDenseOracle) {
  SeededRng rng(1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 2 + rng.below(5), d = 1 + rng.below(9);
    const auto h = oracle::random_head(k, d, rng);
    const Vector f = oracle::random_vector(d, rng);
    const Vector l = classify(h, f);
    for (std::size_t c = 0; c < k; ++c) {
      double s = h.bias()[c];
      for (std::size_t j = 0; j < d; ++j) s += h.weights()(c, j) * f[j];
      EXPECT_NEAR(l[c], s, 1e-12);
    }
  }
}

TEST(Head, Validation) {
  EXPECT_EQ(kind_of([] { ClassifierHead(Matrix(1, 2), {0}, {kNoFinding}); }), ErrorKind::DimensionMismatch);
  EXPECT_EQ(kind_of([] { ClassifierHead(Matrix(2, 2), {0}, {kNoFinding, "A"}); }), ErrorKind::DimensionMismatch);
  EXPECT_EQ(kind_of([] { ClassifierHead(Matrix(2, 2), {0, 0}, {"A", "B"}); }), ErrorKind::InvalidTarget);
  EXPECT_EQ(kind_of([] { eye_head().class_index("nope"); }), ErrorKind::InvalidTarget);
  EXPECT_EQ(kind_of([] { classify(eye_head(), Vector{1}); }), ErrorKind::DimensionMismatch);
}

TEST(PerturbedLogits, ZeroWeightsWithIdentityProjectorsEqualClassify) {
  SeededRng rng(2);
  for (int t = 0; t < 200; ++t) {
    const std::size_t d = 1 + rng.below(8);
    const auto h = oracle::random_head(2 + rng.below(3), d, rng);
    const auto bank = oracle::random_bank(1 + rng.below(6), d, rng);
    const Vector f = oracle::random_vector(d, rng);
    EXPECT_EQ(perturbed_logits(f, Vector(bank.size(), 0.0), bank, ProjectorPair::identity(d), h), classify(h, f));
  }
}

TEST(PerturbedLogits, HandExample) {
  const ConceptBank bank({"up"}, Matrix(1, 2, {0, 1}));
  EXPECT_EQ(perturbed_logits(Vector{1, 0}, Vector{2}, bank, ProjectorPair::identity(2), eye_head()), (Vector{1, 2}));
}

TEST(PerturbationLoss, UniformLogitsGiveLn2) {
  const auto l = perturbation_loss(Vector{0, 0}, 1, Vector{0, 0}, PerturbationConfig{});
  EXPECT_NEAR(l.ce, 0.693147, 1e-6);
  EXPECT_EQ(l.total, l.ce);
}

TEST(PerturbationLoss, RegularizerHandValues) {
  PerturbationConfig cfg;
  const auto l = perturbation_loss(Vector{0, 0}, 1, Vector{1, -1}, cfg);
  EXPECT_NEAR(l.total - l.ce, 0.341421, 1e-6);
  cfg.l2_mode = L2Mode::squared_norm;
  const auto s = perturbation_loss(Vector{0, 0}, 1, Vector{1, -1}, cfg);
  EXPECT_NEAR(s.total - s.ce, 0.1 * 2 + 0.1 * 2, 1e-12);
}

TEST(PerturbationLoss, CrossEntropyMatchesLongDoubleOracle) {
  SeededRng rng(3);
  for (int t = 0; t < 200; ++t) {
    const Vector logits = oracle::random_vector(2 + rng.below(5), rng, 20.0);
    const std::size_t target = rng.below(logits.size());
    const auto l = perturbation_loss(logits, target, Vector{}, PerturbationConfig{});
    EXPECT_NEAR(l.ce, oracle::cross_entropy(logits, target), 1e-10 * std::max(1.0, l.ce));
  }
}

TEST(PerturbationGradient, MatchesFiniteDifferences) {
  SeededRng rng(4);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t d = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
    const bool identity = trial % 4 == 0;
    const std::size_t kk = identity ? d : k;
    const ProjectorPair pair = identity ? ProjectorPair::identity(d)
                                        : ProjectorPair{oracle::random_mlp(d, 1 + rng.below(8), kk, rng),
                                                        oracle::random_mlp(kk, 1 + rng.below(8), d, rng)};
    const auto h = oracle::random_head(2 + rng.below(3), d, rng);
    const auto bank = oracle::random_bank(n, kk, rng);
    const Vector f = oracle::random_vector(d, rng);
    PerturbationConfig cfg;
    cfg.alpha = rng.uniform(0, 0.5);
    cfg.beta = rng.uniform(0, 0.5);
    cfg.l2_mode = trial % 2 ? L2Mode::squared_norm : L2Mode::norm;
    const std::size_t target = rng.below(h.num_classes());
    const Vector w = oracle::random_vector(n, rng);
    const Vector g = perturbation_gradient(f, w, bank, pair, h, target, cfg);
    const Vector fd = oracle::fd_gradient(
        [&](const Vector& x) { return perturbation_loss(perturbed_logits(f, x, bank, pair, h), target, x, cfg).total; },
        w);
    for (std::size_t i = 0; i < n; ++i) {
      if (std::abs(w[i]) < 1e-8) continue;
      const double err = oracle::rel_error(g[i], fd[i]);
      worst = std::max(worst, err);
      ++checked;
      EXPECT_LT(err, 1e-5) << "trial " << trial << " coord " << i << ": analytic " << g[i] << " fd " << fd[i];
    }
  }
  EXPECT_GT(checked, 40u);
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(PerturbationGradient, ZeroOutputMapKillsCrossEntropyGradient) {
  SeededRng rng(5);
  const MlpParams zero_out = MlpParams::zeros(3, 4, 3);
  const ProjectorPair pair{oracle::random_mlp(3, 4, 3, rng), zero_out};
  const auto bank = oracle::random_bank(4, 3, rng);
  PerturbationConfig cfg;
  cfg.alpha = cfg.beta = 0.0;
  const Vector g =
      perturbation_gradient(Vector{1, 2, 3}, oracle::random_vector(4, rng), bank, pair, oracle::random_head(2, 3, rng),
                            1, cfg);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(PerturbationGradient, SubgradientAtOriginIsCrossEntropyOnly) {
  SeededRng rng(6);
  const auto bank = oracle::random_bank(3, 4, rng);
  const auto h = oracle::random_head(2, 4, rng);
  const Vector f = oracle::random_vector(4, rng);
  PerturbationConfig with, without;
  without.alpha = without.beta = 0.0;
  const Vector zero(3, 0.0);
  EXPECT_EQ(perturbation_gradient(f, zero, bank, ProjectorPair::identity(4), h, 1, with),
            perturbation_gradient(f, zero, bank, ProjectorPair::identity(4), h, 1, without));
}

TEST(Optimize, AlreadyTargetReturnsAtStepZero) {
  const ConceptBank bank({"up"}, Matrix(1, 2, {0, 1}));
  const auto r = optimize_perturbation(Vector{0, 5}, bank, ProjectorPair::identity(2), eye_head(), 1, {});
  EXPECT_TRUE(r.flipped);
  EXPECT_EQ(r.steps_used, 0u);
  EXPECT_EQ(r.w, (Vector{0}));
  EXPECT_TRUE(r.loss_trace.empty());
}

TEST(Optimize, FirstStepMatchesHandUpdate) {
  // f=(1,0), bank={(0,1)}, identity everything, target 1. At w=0 the CE
  // gradient wrt logit 1 is softmax_1 - 1 = e^0/(e^1+e^0) - 1, and dlogit_1/dw = 1.
  const ConceptBank bank({"up"}, Matrix(1, 2, {0, 1}));
  PerturbationConfig cfg;
  cfg.max_steps = 1;
  const auto r = optimize_perturbation(Vector{1, 0}, bank, ProjectorPair::identity(2), eye_head(), 1, cfg);
  const double g = 1.0 / (std::exp(1.0) + 1.0) - 1.0;
  EXPECT_DOUBLE_EQ(r.w[0], -cfg.learning_rate * g);
  EXPECT_EQ(r.steps_used, 1u);
  EXPECT_FALSE(r.flipped);
}

TEST(Optimize, StopsAtFirstFlipAndFlagsBudgetExhaustion) {
  const ConceptBank bank({"up", "side"}, Matrix(2, 2, {0, 1, 1, 0}));
  const auto r = optimize_perturbation(Vector{0.3, 0}, bank, ProjectorPair::identity(2), eye_head(), 1, {});
  ASSERT_TRUE(r.flipped);
  EXPECT_EQ(argmax(r.final_logits), 1u);
  EXPECT_EQ(r.loss_trace.size(), r.steps_used);
  // Replaying one step fewer must not flip.
  PerturbationConfig shorter;
  shorter.max_steps = r.steps_used - 1;
  const auto s = optimize_perturbation(Vector{0.3, 0}, bank, ProjectorPair::identity(2), eye_head(), 1, shorter);
  EXPECT_FALSE(s.flipped);
  EXPECT_EQ(s.steps_used, shorter.max_steps);

  // Shifts both logits equally, so the argmax never moves.
  const double h = std::sqrt(0.5);
  const ConceptBank useless({"both"}, Matrix(1, 2, {h, h}));
  const auto u = optimize_perturbation(Vector{5, 0}, useless, ProjectorPair::identity(2), eye_head(), 1, {});
  EXPECT_FALSE(u.flipped);
  EXPECT_EQ(u.steps_used, 100u);
}

TEST(Optimize, InvalidInputs) {
  const ConceptBank bank({"up"}, Matrix(1, 2, {0, 1}));
  EXPECT_EQ(kind_of([&] { optimize_perturbation(Vector{1, 0}, bank, ProjectorPair::identity(2), eye_head(), 2, {}); }),
            ErrorKind::InvalidTarget);
  PerturbationConfig bad;
  bad.alpha = -1;
  EXPECT_EQ(kind_of([&] { optimize_perturbation(Vector{1, 0}, bank, ProjectorPair::identity(2), eye_head(), 1, bad); }),
            ErrorKind::InvalidConfig);
  const ConceptBank wide({"x"}, Matrix(1, 3, {0, 0, 1}));
  EXPECT_EQ(kind_of([&] { optimize_perturbation(Vector{1, 0}, wide, ProjectorPair::identity(2), eye_head(), 1, {}); }),
            ErrorKind::DimensionMismatch);
}

TEST(Optimize, NonFiniteLossIsReported) {
  const ClassifierHead h(Matrix(2, 2, {0, 0, 1e308, 1e308}), {0, 0}, {kNoFinding, "P"});
  const ConceptBank bank({"up"}, Matrix(1, 2, {0, 1}));
  EXPECT_EQ(kind_of([&] { optimize_perturbation(Vector{-1e10, -1e10}, bank, ProjectorPair::identity(2), h, 1, {}); }),
            ErrorKind::NonFiniteLoss);
}

TEST(Rank, HandExamples) {
  const auto bank = three_concepts();
  const Vector w{0.5, -0.2, 0.9};
  const auto top = rank_concepts(w, bank, 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].name, "concept_2");
  EXPECT_EQ(top[0].importance, 0.9);
  EXPECT_EQ(top[1].name, "concept_0");
  const auto away = rank_concepts(w, bank, 1, RankDirection::away_from_source);
  ASSERT_EQ(away.size(), 1u);
  EXPECT_EQ(away[0].name, "concept_1");
  EXPECT_EQ(away[0].importance, -0.2);
}

TEST(Rank, TiesGoToLowerIndex) {
  const auto bank = three_concepts();
  const auto r = rank_concepts(Vector{0.3, 0.7, 0.7}, bank, 3);
  EXPECT_EQ(r[0].index, 1u);
  EXPECT_EQ(r[1].index, 2u);
  const auto a = rank_concepts(Vector{0.0, 0.0, 0.0}, bank, 3, RankDirection::away_from_source);
  EXPECT_EQ(a[0].index, 0u);
  EXPECT_EQ(a[2].index, 2u);
}

TEST(Rank, PropertyAgainstBruteForceOrder) {
  SeededRng rng(7);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng.below(12);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back("c" + std::to_string(i));
    const ConceptBank bank(names, Matrix::identity(n));
    Vector w(n);
    for (double& x : w) x = static_cast<double>(static_cast<int>(rng.below(7)) - 3);  // many ties
    const std::size_t k = 1 + rng.below(n + 2);
    const auto r = rank_concepts(w, bank, k);
    ASSERT_EQ(r.size(), std::min(k, n));
    // Each entry beats everything after it, or ties it with a lower index.
    for (std::size_t i = 0; i + 1 < r.size(); ++i) {
      const bool ok = r[i].importance > r[i + 1].importance ||
                      (r[i].importance == r[i + 1].importance && r[i].index < r[i + 1].index);
      EXPECT_TRUE(ok);
    }
    // Nothing left out beats the last entry.
    for (std::size_t j = 0; j < n; ++j) {
      if (std::ranges::any_of(r, [&](const RankedConcept& c) { return c.index == j; })) continue;
      EXPECT_TRUE(w[j] < r.back().importance || (w[j] == r.back().importance && j > r.back().index));
    }
  }
}

TEST(Rank, Errors) {
  const auto bank = three_concepts();
  EXPECT_EQ(kind_of([&] { rank_concepts(Vector{1, 2}, bank, 1); }), ErrorKind::SizeMismatch);
  EXPECT_EQ(kind_of([&] { rank_concepts(Vector{1, 2, 3}, bank, 0); }), ErrorKind::InvalidConfig);
}

TEST(ExplainBatch, ThreadCountDoesNotChangeResults) {
  SeededRng rng(8);
  const std::size_t d = 6;
  const auto bank = oracle::random_bank(5, d, rng);
  const auto h = oracle::random_head(3, d, rng);
  const ProjectorPair pair{oracle::random_mlp(d, 8, d, rng), oracle::random_mlp(d, 8, d, rng)};
  const Matrix f = oracle::random_matrix(37, d, rng);
  const auto one = explain_batch(f, bank, pair, h, 2, {}, 1);
  const auto many = explain_batch(f, bank, pair, h, 2, {}, 7);
  ASSERT_EQ(one.size(), many.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(one[i].result.w, many[i].result.w);
    EXPECT_EQ(one[i].result.steps_used, many[i].result.steps_used);
    EXPECT_EQ(one[i].result.w, optimize_perturbation(f.row(i), bank, pair, h, 2, {}).w);
  }
}

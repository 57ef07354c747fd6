#include "ilc/train.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace ilc;

TEST(Gd, StepAndErrors) {
  const Vector p = (Vector(2) << 1, 2).finished();
  EXPECT_EQ(gd_step(p, Vector::Zero(2), 0.1), p);
  EXPECT_EQ(gd_step(p, (Vector(2) << 1, -1).finished(), 0.5), (Vector(2) << 0.5, 2.5).finished());
  EXPECT_THROW(gd_step(p, Vector::Zero(2), 0.0), std::invalid_argument);
  EXPECT_THROW(gd_step(p, Vector::Constant(2, NAN), 0.1), NonFiniteError);
  EXPECT_THROW(gd_step(p, Vector::Zero(3), 0.1), DimensionError);
}

TEST(Gd, ContractsOnQuadratic) {
  const double lam = 3.0, eta = 0.5;  // eta < 2 / lam
  Vector th = Vector::Constant(1, 2.0);
  for (int k = 0; k < 50; ++k) {
    const Vector next = gd_step(th, lam * th, eta);
    EXPECT_LT(std::abs(next[0]), std::abs(th[0]));
    th = next;
  }
}

// Masked GD on a sum of convex quadratics with different minimizers, masked
// by per-environment sign agreement: min_i |m . grad|^2 <= 2 L(theta0) / (eta k).
TEST(Gd, MaskedRateOnConvexQuadratic) {
  std::mt19937_64 rng(12);
  const Eigen::Index n = 10;
  std::uniform_real_distribution<double> u(0.1, 4.0), c(-1.0, 1.0);
  std::vector<Vector> lams(3), centers(3);
  for (std::size_t e = 0; e < 3; ++e) {
    lams[e].resize(n);
    centers[e].resize(n);
    for (Eigen::Index i = 0; i < n; ++i) lams[e][i] = u(rng), centers[e][i] = c(rng);
  }
  Vector pooled_curv = Vector::Zero(n);
  for (const auto& l : lams) pooled_curv += l / 3.0;
  const double L = pooled_curv.maxCoeff(), eta = 1.0 / L;
  auto pooled_loss = [&](const Vector& th) {
    double v = 0;
    for (std::size_t e = 0; e < 3; ++e) v += 0.5 * (lams[e].array() * (th - centers[e]).array().square()).sum() / 3.0;
    return v;
  };
  Vector th(n);
  for (Eigen::Index i = 0; i < n; ++i) th[i] = 3.0 * c(rng);
  const double loss0 = pooled_loss(th);
  double best = INFINITY;
  for (std::size_t k = 1; k <= 1000; ++k) {
    GradientBatch gb;
    gb.grads.resize(3, n);
    for (std::size_t e = 0; e < 3; ++e)
      gb.grads.row(static_cast<Eigen::Index>(e)) = lams[e].cwiseProduct(th - centers[e]).transpose();
    const Vector g = apply_mask(gb.mean(), and_mask(gb, 1.0), {}, false).values;
    best = std::min(best, g.squaredNorm());
    EXPECT_LE(best, 2 * loss0 / (eta * double(k))) << "k=" << k;
    const double before = pooled_loss(th);
    th = gd_step(th, g, eta);
    EXPECT_LE(pooled_loss(th), before + 1e-15);
  }
}

TEST(Momentum, ZeroMomentumIsGd) {
  MomentumState st{Vector(), 0.0};
  Vector p = Vector::Ones(3);
  const Vector g = (Vector(3) << 1, 2, 3).finished();
  momentum_step(st, p, g, 0.1);
  EXPECT_EQ(p, gd_step(Vector::Ones(3), g, 0.1));
}

namespace {

// Scalar transcription of the update, one component at a time.
struct ScalarAdam {
  double m = 0, v = 0, a = 0;
  int t = 0;
  double step(double theta, double g, double alpha, double b1, double b2, double eps) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    return theta - alpha * mh / std::sqrt(vh + eps);
  }
};

}  // namespace

TEST(Adam, ThreeStepsMatchScalarOracle) {
  AdamState s = AdamState::zeros(3, 0.01);
  Vector p = (Vector(3) << 0.5, -1.0, 2.0).finished();
  const std::vector<Vector> gs{(Vector(3) << 0.1, -0.2, 0.0).finished(), (Vector(3) << -0.3, 0.5, 1e-3).finished(),
                               (Vector(3) << 0.2, 0.1, -2.0).finished()};
  std::vector<ScalarAdam> oracle(3);
  std::vector<double> q{0.5, -1.0, 2.0};
  for (const auto& g : gs) {
    adam_step(s, p, g);
    for (std::size_t i = 0; i < 3; ++i) q[i] = oracle[i].step(q[i], g[static_cast<Eigen::Index>(i)], 0.01, 0.9, 0.999, 1e-16);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[static_cast<Eigen::Index>(i)], q[i], 1e-12);
  }
  EXPECT_EQ(s.step_count, 3u);
  EXPECT_GE(s.v.minCoeff(), 0.0);
}

TEST(Adam, ConstantGradientStepTendsToAlpha) {
  AdamState s = AdamState::zeros(2, 0.05);
  Vector p = Vector::Zero(2);
  const Vector g = (Vector(2) << 3.0, -0.01).finished();
  for (int k = 0; k < 500; ++k) adam_step(s, p, g);
  const Vector before = p;
  adam_step(s, p, g);
  EXPECT_NEAR(before[0] - p[0], 0.05, 1e-9);
  EXPECT_NEAR(before[1] - p[1], -0.05, 1e-9);
}

TEST(Adam, ZeroGradientNeverMoves) {
  AdamState s = AdamState::zeros(4, 0.1);
  Vector p = Vector::LinSpaced(4, -1, 1);
  const Vector p0 = p;
  for (int k = 0; k < 20; ++k) adam_step(s, p, Vector::Zero(4));
  EXPECT_EQ(p, p0);
}

TEST(Adam, RejectsBadState) {
  AdamState s = AdamState::zeros(2, 0.1);
  Vector p = Vector::Zero(3);
  EXPECT_THROW(adam_step(s, p, Vector::Zero(3)), DimensionError);
  s = AdamState::zeros(3, 0.1);
  s.beta1 = 1.0;
  EXPECT_THROW(adam_step(s, p, Vector::Zero(3)), std::invalid_argument);
  s.beta1 = 0.9;
  EXPECT_THROW(adam_step(s, p, Vector::Constant(3, INFINITY)), NonFiniteError);
}

TEST(TemporalAdam, ReducesToAdamWhenEveryComponentPasses) {
  AdamState a = AdamState::zeros(3, 0.01), b = AdamState::zeros(3, 0.01);
  b.beta3 = 0.0;
  b.tau = 1.0;
  Vector pa = Vector::Ones(3), pb = pa;
  std::mt19937_64 rng(1);
  for (int k = 0; k < 10; ++k) {
    const Vector g = ilc::testing::random_matrix(3, 1, rng).col(0);
    adam_step(a, pa, g);
    const auto gate = temporal_and_adam_step(b, pb, g);
    EXPECT_EQ(std::count(gate.begin(), gate.end(), 1), 3);
  }
  EXPECT_EQ(pa, pb);
}

TEST(TemporalAdam, AlternatingSignsFreezeComponent) {
  AdamState s = AdamState::zeros(2, 0.01);
  Vector p = Vector::Zero(2);
  // Scalar recurrence for the alternating component: a_k = 0.9 a_{k-1} + 0.1 s_k.
  double a = 0.0;
  for (int k = 0; k < 200; ++k) {
    const double sgn = k % 2 ? -1.0 : 1.0;
    const Vector before = p;
    const auto gate = temporal_and_adam_step(s, p, (Vector(2) << sgn, 1.0).finished());
    a = 0.9 * a + 0.1 * sgn;
    EXPECT_NEAR(s.a[0], a, 1e-15);
    EXPECT_LT(std::abs(s.a[0]), 0.5);
    EXPECT_EQ(gate[0], 0);
    EXPECT_EQ(p[0], before[0]);
    if (k >= 6) {
      EXPECT_EQ(gate[1], 1);  // 1 - 0.9^7 > 0.5
    }
  }
  EXPECT_GT(s.v[0], 0.0);  // moments still advanced
  EXPECT_NEAR(s.a[1], 1.0, 1e-9);
  EXPECT_LT(p[1], 0.0);
}

// |a| = 1 - beta3^k approaches 1 from below, so every tau < 1 is passed
// eventually while tau = 1 is only reached in the limit.
TEST(TemporalAdam, ConstantSignPassesAnyTauBelowOne) {
  AdamState s = AdamState::zeros(1, 0.01);
  s.tau = 0.99;
  Vector p = Vector::Zero(1);
  std::vector<std::uint8_t> gate;
  for (int k = 0; k < 400; ++k) gate = temporal_and_adam_step(s, p, Vector::Constant(1, -2.0));
  EXPECT_NEAR(s.a[0], -1.0, 1e-15);
  EXPECT_EQ(gate[0], 1);
  EXPECT_GT(p[0], 0.0);
}

TEST(WeightDecay, DecoupledShrink) {
  Vector p = Vector::Constant(2, 2.0);
  decoupled_weight_decay(p, 0.1, 0.5);
  EXPECT_EQ(p, Vector::Constant(2, 1.9));
}

// ---- training loop --------------------------------------------------------------

namespace {

std::pair<EnvDataset, EnvDataset> tiny_data(std::uint64_t seed) {
  SyntheticConfig sc;
  sc.num_envs = 4;
  sc.per_env = 32;
  sc.d_s = 4;
  sc.test_size = 64;
  sc.seed = seed;
  return gen_synthetic(sc);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.batch_size = 16;
  c.epochs = 4;
  c.learning_rate = 1e-2;
  c.seed = 3;
  c.batching = Batching::split;
  return c;
}

}  // namespace

TEST(Train, LrScheduleDefaults) {
  TrainConfig c;
  c.epochs = 8;
  EXPECT_DOUBLE_EQ(c.lr_at(3), c.learning_rate);
  EXPECT_NEAR(c.lr_at(4), c.learning_rate * 0.1, 1e-18);
  EXPECT_NEAR(c.lr_at(6), c.learning_rate * 0.01, 1e-18);
  c.lr_drop_epochs = {{1, 0.5}};
  EXPECT_DOUBLE_EQ(c.lr_at(7), c.learning_rate * 0.5);
}

TEST(Train, AndWithTauZeroEqualsNoMask) {
  const auto [tr, te] = tiny_data(1);
  const Architecture arch{tr.num_features(), 2, 16};
  TrainConfig none = tiny_config(), and0 = tiny_config();
  and0.mask_rule = MaskRule::and_mask;
  and0.tau = 0.0;
  and0.rescale = true;
  const auto a = train(init_params(arch, 5), tr, &te, none);
  const auto b = train(init_params(arch, 5), tr, &te, and0);
  EXPECT_EQ(a.params.values, b.params.values);
  EXPECT_EQ(metrics_csv(a.history), metrics_csv(b.history));
}

TEST(Train, SameSeedGivesIdenticalMetrics) {
  const auto [tr, te] = tiny_data(2);
  const Architecture arch{tr.num_features(), 2, 16};
  TrainConfig c = tiny_config();
  c.mask_rule = MaskRule::and_mask;
  c.tau = 0.5;
  c.loss.dropout_rate = 0.2;
  const auto a = train(init_params(arch, 5), tr, &te, c);
  c.workers = 3;
  const auto b = train(init_params(arch, 5), tr, &te, c);
  EXPECT_EQ(metrics_csv(a.history), metrics_csv(b.history));
  c.seed = 4;
  EXPECT_NE(metrics_csv(train(init_params(arch, 5), tr, &te, c).history), metrics_csv(a.history));
}

TEST(Train, BaselineFitsTrainingSet) {
  const auto [tr, te] = tiny_data(3);
  TrainConfig c = tiny_config();
  c.batching = Batching::pooled;
  c.epochs = 30;
  const auto res = train(init_params(Architecture{tr.num_features(), 2, 32}, 1), tr, &te, c);
  EXPECT_EQ(res.history.size(), 30u);
  EXPECT_GT(res.history.back().train_acc, 0.95);
  EXPECT_LT(res.history.back().train_loss, res.history.front().train_loss);
}

TEST(Train, EarlyStopRule) {
  const auto [tr, te] = tiny_data(4);
  TrainConfig c = tiny_config();
  c.batching = Batching::pooled;
  c.epochs = 60;
  c.early_stop = true;
  const auto res = train(init_params(Architecture{tr.num_features(), 2, 32}, 1), tr, &te, c);
  if (res.stopped_early) {
    EXPECT_GT(res.history.back().train_acc, 0.97);
    EXPECT_LT(res.history.back().test_acc, 0.6);
  } else {
    EXPECT_EQ(res.history.size(), 60u);
  }
}

TEST(Train, MaskKeepFractionReported) {
  const auto [tr, te] = tiny_data(5);
  TrainConfig c = tiny_config();
  c.mask_rule = MaskRule::and_mask;
  c.tau = 1.0;
  const auto res = train(init_params(Architecture{tr.num_features(), 1, 8}, 1), tr, &te, c);
  for (const auto& m : res.history) {
    EXPECT_GE(m.mask_keep_frac, 0.0);
    EXPECT_LE(m.mask_keep_frac, 1.0);
  }
  c.mask_rule = MaskRule::none;
  for (const auto& m : train(init_params(Architecture{tr.num_features(), 1, 8}, 1), tr, &te, c).history)
    EXPECT_EQ(m.mask_keep_frac, 1.0);
}

TEST(Train, ConfigErrors) {
  const auto [tr, te] = tiny_data(6);
  const auto p = init_params(Architecture{tr.num_features(), 1, 4}, 1);
  TrainConfig c = tiny_config();
  c.epochs = 0;
  EXPECT_THROW(train(p, tr, &te, c), std::invalid_argument);
  c = tiny_config();
  c.batch_size = 2;  // < one example per environment
  c.mask_rule = MaskRule::and_mask;
  EXPECT_THROW(train(p, tr, &te, c), std::invalid_argument);
  c = tiny_config();
  c.batching = Batching::pooled;
  c.mask_rule = MaskRule::and_mask;
  EXPECT_THROW(train(p, tr, &te, c), std::invalid_argument);
  c = tiny_config();
  c.learning_rate = NAN;
  EXPECT_THROW(train(p, tr, &te, c), std::invalid_argument);
  EXPECT_THROW(train(init_params(Architecture{3, 1, 4}, 1), tr, &te, tiny_config()), DimensionError);
}

TEST(Train, ConfigJsonRoundTrip) {
  TrainConfig c = preset("and_mask", 34, 32).train;
  const TrainConfig d = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(d).dump(), to_json(c).dump());
  EXPECT_EQ(c.epochs, 93u);
  EXPECT_EQ(c.tau, 1.0);
  EXPECT_THROW(preset("nope", 1, 1), std::invalid_argument);
  EXPECT_THROW(parse_mask_rule("or"), std::invalid_argument);
}

#include "ilc/model.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace ilc;
using ilc::testing::random_envs;

namespace {

Architecture small_arch() { return Architecture{5, 2, 7}; }

double env_loss(const ParamVector& p, const EnvBatch& b, const LossConfig& cfg) {
  return loss(forward(p, b.inputs), b.labels, p, cfg);
}

}  // namespace

TEST(Model, LayoutCoversEveryParameterOnce) {
  const Architecture a{34, 3, 256};
  const auto layout = make_layout(a);
  ASSERT_EQ(layout.size(), 8u);
  std::size_t at = 0;
  for (const auto& s : layout) {
    EXPECT_EQ(s.offset, at);
    at += s.length;
  }
  EXPECT_EQ(at, a.num_params());
  EXPECT_EQ(a.num_params(), 35u * 256 + 2 * 257 * 256 + 257 * 2);
}

TEST(Model, WeightsViewMatchesRowMajorLayout) {
  ParamVector p = init_params(small_arch(), 3);
  const auto& s = p.weight_span(1);
  EXPECT_EQ(p.weights(1)(2, 4), p.values[static_cast<Eigen::Index>(s.offset + 2 * 7 + 4)]);
}

TEST(Model, InitIsSeededAndBounded) {
  const auto a = init_params(small_arch(), 11), b = init_params(small_arch(), 11), c = init_params(small_arch(), 12);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
  EXPECT_LE(a.weights(0).cwiseAbs().maxCoeff(), 1.0 / std::sqrt(5.0));
  EXPECT_EQ(a.bias(0).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Model, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(5);
  ParamVector p = init_params(small_arch(), 2);
  p.values += 0.05 * ilc::testing::random_matrix(p.values.size(), 1, rng).col(0);
  const auto envs = random_envs(3, 6, 5, rng);
  for (LossConfig cfg : {LossConfig{}, LossConfig{0.0, 0.3, 0.0}}) {
    const GradientBatch gb = env_gradients(p, envs, cfg);
    const double h = 1e-4;
    for (std::size_t e = 0; e < envs.size(); ++e) {
      double worst = 0.0;
      for (Eigen::Index i = 0; i < p.values.size(); ++i) {
        ParamVector q = p;
        q.values[i] += h;
        const double up = env_loss(q, envs[e], cfg);
        q.values[i] -= 2 * h;
        const double down = env_loss(q, envs[e], cfg);
        worst = std::max(worst, std::abs((up - down) / (2 * h) - gb.grads(static_cast<Eigen::Index>(e), i)));
      }
      EXPECT_LT(worst, 1e-5) << "env " << e;
    }
  }
}

TEST(Model, MeanOfEnvGradientsIsPooledGradient) {
  std::mt19937_64 rng(8);
  const ParamVector p = init_params(small_arch(), 4);
  const auto envs = random_envs(4, 9, 5, rng);
  const GradientBatch gb = env_gradients(p, envs, {});
  // Equal env sizes: the pooled mean loss equals the mean of env losses.
  RowMatrix all(36, 5);
  std::vector<int> labels;
  for (std::size_t e = 0; e < 4; ++e) {
    all.middleRows(static_cast<Eigen::Index>(9 * e), 9) = envs[e].inputs;
    labels.insert(labels.end(), envs[e].labels.begin(), envs[e].labels.end());
  }
  const Vector pooled = batch_gradient(p, all, labels, {});
  EXPECT_LT((gb.mean() - pooled).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Model, SingleEnvironmentRowIsPlainGradient) {
  std::mt19937_64 rng(1);
  const ParamVector p = init_params(small_arch(), 1);
  const auto envs = random_envs(1, 10, 5, rng);
  const GradientBatch gb = env_gradients(p, envs, {});
  EXPECT_EQ(Vector(gb.grads.row(0).transpose()), batch_gradient(p, envs[0].inputs, envs[0].labels, {}));
}

TEST(Model, GradientsIdenticalAcrossWorkerCounts) {
  std::mt19937_64 rng(2);
  const ParamVector p = init_params(Architecture{5, 3, 32}, 9);
  const auto envs = random_envs(7, 13, 5, rng);
  const GradientBatch one = env_gradients(p, envs, {}, {1, nullptr});
  for (std::size_t w : {2u, 3u, 8u}) {
    const GradientBatch many = env_gradients(p, envs, {}, {w, nullptr});
    EXPECT_EQ(0, std::memcmp(one.grads.data(), many.grads.data(), sizeof(double) * one.grads.size()));
  }
}

TEST(Model, PenaltyGradientIsAddedToEveryRow) {
  std::mt19937_64 rng(3);
  const ParamVector p = init_params(small_arch(), 5);
  const auto envs = random_envs(2, 4, 5, rng);
  const LossConfig cfg{0.01, 0.2, 0.0};
  const GradientBatch with = env_gradients(p, envs, cfg), without = env_gradients(p, envs, {});
  const Vector pen = penalty_gradient(p, cfg);
  for (Eigen::Index e = 0; e < 2; ++e)
    EXPECT_LT((with.grads.row(e) - without.grads.row(e) - pen.transpose()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Model, DropoutNeedsGeneratorAndIsReproducible) {
  std::mt19937_64 rng(4);
  const ParamVector p = init_params(small_arch(), 6);
  const auto envs = random_envs(2, 8, 5, rng);
  const LossConfig cfg{0.0, 0.0, 0.5};
  std::mt19937_64 a(1), b(1);
  const auto ga = env_gradients(p, envs, cfg, {1, &a}), gb = env_gradients(p, envs, cfg, {1, &b});
  EXPECT_EQ(ga.grads, gb.grads);
  EXPECT_NE(ga.grads, env_gradients(p, envs, cfg).grads);
}

TEST(Model, ErrorsOnBadInput) {
  std::mt19937_64 rng(3);
  const ParamVector p = init_params(small_arch(), 1);
  auto envs = random_envs(2, 4, 5, rng);
  std::vector<EnvBatch> none;
  EXPECT_THROW(env_gradients(p, none, {}), std::invalid_argument);
  auto wide = random_envs(1, 4, 6, rng);
  EXPECT_THROW(env_gradients(p, wide, {}), DimensionError);
  envs[1].labels[0] = 2;
  EXPECT_THROW(env_gradients(p, envs, {}), std::invalid_argument);
  envs[1].labels.clear();
  envs[1].inputs.resize(0, 5);
  EXPECT_THROW(env_gradients(p, envs, {}), std::invalid_argument);
  EXPECT_THROW((LossConfig{-1.0, 0.0, 0.0}.validate()), std::invalid_argument);
}

TEST(Model, HessianDiagonalOfPenaltyIsL2Coefficient) {
  std::mt19937_64 rng(9);
  const ParamVector p = init_params(Architecture{3, 0, 1}, 1);
  EnvBatch b{0, ilc::testing::random_matrix(20, 3, rng), std::vector<int>(20, 1)};
  const Vector with = hessian_diag(p, b, {0.0, 2.0, 0.0}, 1e-3);
  const Vector without = hessian_diag(p, b, {}, 1e-3);
  EXPECT_LT(((with - without).array() - 2.0).abs().maxCoeff(), 1e-4);
  EXPECT_GT(without.minCoeff(), -1e-6);  // logistic loss is convex in a linear model
}

TEST(Model, JsonRoundTripIsExact) {
  const ParamVector p = init_params(Architecture{4, 2, 6}, 21);
  const ParamVector q = model_from_json(model_to_json(p));
  EXPECT_EQ(q.arch, p.arch);
  EXPECT_EQ(q.values, p.values);
  EXPECT_EQ(model_to_json(q), model_to_json(p));
  EXPECT_THROW(model_from_json(R"({"arch":{"input_dim":2,"hidden_layers":0,"hidden_units":1},"values":[1]})"),
               DimensionError);
}

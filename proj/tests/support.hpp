#pragma once

#include "ilc/model.hpp"

#include <random>

namespace ilc::testing {

inline RowMatrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

inline std::vector<EnvBatch> random_envs(std::size_t d, std::size_t per_env, std::size_t width, std::mt19937_64& rng) {
  std::vector<EnvBatch> out;
  std::bernoulli_distribution coin(0.5);
  for (std::size_t e = 0; e < d; ++e) {
    EnvBatch b{static_cast<int>(e), random_matrix(static_cast<Eigen::Index>(per_env), static_cast<Eigen::Index>(width), rng), {}};
    for (std::size_t i = 0; i < per_env; ++i) b.labels.push_back(coin(rng) ? 1 : 0);
    out.push_back(std::move(b));
  }
  return out;
}

inline GradientBatch random_gradients(std::size_t d, std::size_t n, std::mt19937_64& rng) {
  GradientBatch gb{random_matrix(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n), rng), {}};
  for (std::size_t e = 0; e < d; ++e) gb.env_ids.push_back(static_cast<int>(e));
  return gb;
}

}  // namespace ilc::testing

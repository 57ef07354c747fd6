#pragma once

// Inconsistency score of a minimizer estimated by random walks inside each
// environment's epsilon level set, the closed forms for diagonal quadratic
// environments, the ILC average over initializations, and the two-interval
// patchwork example.

#include "ilc/model.hpp"

#include <functional>
#include <map>
#include <optional>
#include <random>

namespace ilc {

struct WalkConfig {
  double epsilon = 0.01;
  double step_scale = 0.01;  // initial proposal std; tuned during burn-in
  std::size_t num_steps = 10000;
  std::size_t num_restarts = 1;
  std::uint64_t seed = 0;
  std::size_t burn_in = 1000;
  bool auto_tune = true;
  double target_accept_low = 0.3;
  double target_accept_high = 0.6;
  std::size_t workers = 1;

  void validate() const {
    require(epsilon > 0.0 && std::isfinite(epsilon), "walk: epsilon must be positive");
    require(step_scale > 0.0 && std::isfinite(step_scale), "walk: step_scale must be positive");
    require(num_steps >= 1, "walk: num_steps must be >= 1");
    require(num_restarts >= 1, "walk: num_restarts must be >= 1");
  }
};

/// Keys of the per-pair tables are (source env, target env).
struct ConsistencyReport {
  double score = 0.0;
  std::map<std::pair<int, int>, double> per_pair;
  // max |L_e'(theta) - L_e(theta*)| over the same chains: the quantity the
  // diagonal-quadratic closed form evaluates.
  double excursion = 0.0;
  std::map<std::pair<int, int>, double> per_pair_excursion;
  std::size_t samples_accepted = 0;
  std::size_t proposals = 0;
  double epsilon = 0.0;
  std::vector<double> tuned_step_scale;  // one per (restart, source) walk

  double acceptance_rate() const { return proposals ? double(samples_accepted) / double(proposals) : 0.0; }
};

namespace detail {

struct WalkResult {
  std::vector<double> gap;        // per target env
  std::vector<double> excursion;  // per target env
  std::size_t accepted = 0;
  std::size_t proposals = 0;
  double step = 0.0;
};

template <typename EnvLoss>
WalkResult level_set_walk(const Vector& start, std::size_t source, std::size_t num_envs, EnvLoss& env_loss,
                          const WalkConfig& cfg, std::mt19937_64 rng) {
  WalkResult r;
  r.gap.assign(num_envs, 0.0);
  r.excursion.assign(num_envs, 0.0);
  const double level = env_loss(source, start);
  require(std::isfinite(level), "inconsistency_score: non-finite loss at the start point");

  auto record = [&](const Vector& theta, double own) {
    for (std::size_t t = 0; t < num_envs; ++t) {
      const double other = t == source ? own : env_loss(t, theta);
      if (!std::isfinite(other)) throw NonFiniteError("inconsistency_score: non-finite loss during walk");
      r.gap[t] = std::max(r.gap[t], std::abs(other - own));
      r.excursion[t] = std::max(r.excursion[t], std::abs(other - level));
    }
  };
  record(start, level);

  Vector theta = start;
  Vector proposal(theta.size());
  std::normal_distribution<double> gauss(0.0, 1.0);
  double step = cfg.step_scale;
  const std::size_t block = 100;
  std::size_t block_accepts = 0;
  const std::size_t total = cfg.num_steps + (cfg.auto_tune ? cfg.burn_in : 0);
  for (std::size_t k = 0; k < total; ++k) {
    for (Eigen::Index i = 0; i < proposal.size(); ++i) proposal[i] = theta[i] + step * gauss(rng);
    const double own = env_loss(source, proposal);
    ++r.proposals;
    if (!std::isfinite(own)) throw NonFiniteError("inconsistency_score: non-finite loss during walk");
    if (std::abs(own - level) <= cfg.epsilon) {
      theta.swap(proposal);
      ++r.accepted;
      ++block_accepts;
      record(theta, own);
    }
    if (cfg.auto_tune && k < cfg.burn_in && (k + 1) % block == 0) {
      const double rate = double(block_accepts) / double(block);
      if (rate < cfg.target_accept_low) step *= 0.7;
      else if (rate > cfg.target_accept_high) step *= 1.4;
      block_accepts = 0;
    }
  }
  r.step = step;
  return r;
}

}  // namespace detail

/// Lower-bound estimate of max over ordered env pairs (e, e') of
/// max_{theta in N_e} |L_e'(theta) - L_e(theta)|, where N_e is approximated
/// by a random-walk chain started at theta* whose points all satisfy
/// |L_e(theta) - L_e(theta*)| <= epsilon.
///
/// env_loss(k, theta) returns the loss of the k-th environment. Every walk
/// of restart r uses a generator seeded from (seed, r) only, so relabeling
/// environments permutes the table without changing the score.
template <typename EnvLoss>
ConsistencyReport inconsistency_score(const Vector& theta_star, std::size_t num_envs, EnvLoss&& env_loss,
                                      const WalkConfig& cfg, std::span<const int> env_ids = {}) {
  cfg.validate();
  require(num_envs >= 2, "inconsistency_score: need at least two environments");
  require(env_ids.empty() || env_ids.size() == num_envs, "inconsistency_score: env_ids length mismatch");
  require_finite(theta_star, "inconsistency_score start point");
  const std::size_t walks = cfg.num_restarts * num_envs;
  std::vector<detail::WalkResult> results(walks);
  parallel_for(walks, cfg.workers, [&](std::size_t w) {
    const std::size_t restart = w / num_envs, source = w % num_envs;
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(restart)};
    results[w] = detail::level_set_walk(theta_star, source, num_envs, env_loss, cfg, std::mt19937_64(seq));
  });

  ConsistencyReport rep;
  rep.epsilon = cfg.epsilon;
  auto id = [&](std::size_t k) { return env_ids.empty() ? static_cast<int>(k) : env_ids[k]; };
  for (std::size_t w = 0; w < walks; ++w) {
    const auto& r = results[w];
    const std::size_t source = w % num_envs;
    rep.samples_accepted += r.accepted;
    rep.proposals += r.proposals;
    rep.tuned_step_scale.push_back(r.step);
    for (std::size_t t = 0; t < num_envs; ++t) {
      if (t == source) continue;
      const auto key = std::make_pair(id(source), id(t));
      rep.per_pair[key] = std::max(rep.per_pair[key], r.gap[t]);
      rep.per_pair_excursion[key] = std::max(rep.per_pair_excursion[key], r.excursion[t]);
    }
  }
  for (const auto& [k, v] : rep.per_pair) rep.score = std::max(rep.score, v);
  for (const auto& [k, v] : rep.per_pair_excursion) rep.excursion = std::max(rep.excursion, v);
  return rep;
}

/// Model overload: pure data loss (no penalties) of each environment batch.
inline ConsistencyReport inconsistency_score(const ParamVector& params_star, std::span<const EnvBatch> envs,
                                             const WalkConfig& cfg) {
  std::vector<int> ids;
  for (const auto& e : envs) {
    require(e.size() > 0, "inconsistency_score: empty environment batch");
    ids.push_back(e.env_id);
  }
  const ParamVector shape = params_star;
  auto env_loss = [&](std::size_t k, const Vector& theta) {
    ParamVector q{shape.arch, theta, shape.layout};
    return data_loss(q, envs[k].inputs, envs[k].labels);
  };
  return inconsistency_score(params_star.values, envs.size(), env_loss, cfg, ids);
}

inline nlohmann::json to_json(const ConsistencyReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [k, v] : r.per_pair)
    pairs.push_back({{"source", k.first}, {"target", k.second}, {"max_gap", v},
                     {"max_excursion", r.per_pair_excursion.at(k)}});
  return {{"score", r.score},
          {"excursion", r.excursion},
          {"epsilon", r.epsilon},
          {"per_pair", pairs},
          {"sampler", {{"samples_accepted", r.samples_accepted},
                       {"proposals", r.proposals},
                       {"acceptance_rate", r.acceptance_rate()},
                       {"tuned_step_scale", r.tuned_step_scale}}}};
}

// ---- diagonal quadratic environments --------------------------------------

/// L_A = theta^T diag(lam_a) theta / 2 and likewise for B, minimized at 0.
struct QuadraticEnvPair {
  Vector lam_a;
  Vector lam_b;

  void validate() const {
    require_dims(lam_a.size() == lam_b.size() && lam_a.size() > 0, "quadratic pair: eigenvalue vectors must match");
    require((lam_a.array() > 0.0).all() && (lam_b.array() > 0.0).all() && lam_a.allFinite() && lam_b.allFinite(),
            "quadratic pair: eigenvalues must be positive");
  }

  double loss(int env, const Vector& theta) const {
    const Vector& lam = env == 0 ? lam_a : lam_b;
    return 0.5 * (lam.array() * theta.array().square()).sum();
  }
};

/// epsilon * max_i max(lam_b/lam_a, lam_a/lam_b).
inline double quadratic_inconsistency(const QuadraticEnvPair& q, double epsilon) {
  q.validate();
  require(epsilon > 0.0, "quadratic_inconsistency: epsilon must be positive");
  const double r = std::max((q.lam_b.array() / q.lam_a.array()).maxCoeff(), (q.lam_a.array() / q.lam_b.array()).maxCoeff());
  return epsilon * r;
}

/// Element-wise arithmetic and geometric means of the two spectra.
inline std::pair<Vector, Vector> hessian_means(const QuadraticEnvPair& q) {
  q.validate();
  Vector arith = 0.5 * (q.lam_a + q.lam_b);
  Vector geom = (q.lam_a.array() * q.lam_b.array()).sqrt();
  return {std::move(arith), std::move(geom)};
}

/// det(H_arith) / det(H_geom).
inline double det_ratio(const QuadraticEnvPair& q) {
  const auto [arith, geom] = hessian_means(q);
  double log_ratio = 0.0;
  for (Eigen::Index i = 0; i < arith.size(); ++i) log_ratio += std::log(arith[i]) - std::log(geom[i]);
  return std::exp(log_ratio);
}

/// 2 epsilon (det(H_arith) / det(H_geom))^2. Not a bound in general: for a
/// single direction with lam_b / lam_a = r it is epsilon (r + 2 + 1/r) / 2,
/// below the exact epsilon r once r > 1 + sqrt(2).
inline double det_ratio_bound(const QuadraticEnvPair& q, double epsilon) {
  require(epsilon > 0.0, "det_ratio_bound: epsilon must be positive");
  const double r = det_ratio(q);
  return 2.0 * epsilon * r * r;
}

/// 4 epsilon (det(H_arith) / det(H_geom))^2, which does bound the exact
/// value: eps max(r, 1/r) <= eps max_i (a_i + b_i)^2 / (a_i b_i)
/// = 4 eps max_i (((a_i + b_i)/2) / sqrt(a_i b_i))^2 <= 4 eps det_ratio^2.
inline double det_ratio_bound_corrected(const QuadraticEnvPair& q, double epsilon) {
  return 2.0 * det_ratio_bound(q, epsilon);
}

inline ConsistencyReport inconsistency_score(const QuadraticEnvPair& q, const WalkConfig& cfg) {
  q.validate();
  auto env_loss = [&](std::size_t k, const Vector& theta) { return q.loss(static_cast<int>(k), theta); };
  return inconsistency_score(Vector::Zero(q.lam_a.size()), 2, env_loss, cfg);
}

// ---- ILC ------------------------------------------------------------------

struct IlcResult {
  double score = 0.0;  // -mean inconsistency over finite runs
  std::vector<double> per_seed;
  std::size_t diverged = 0;
};

/// Trains from num_seeds initializations via recipe(seed) -> ParamVector and
/// returns minus the mean inconsistency of the end points. Runs whose
/// training or walk produces non-finite values are dropped and counted.
template <typename Recipe>
IlcResult ilc_score(Recipe&& recipe, std::span<const EnvBatch> envs, std::size_t num_seeds, const WalkConfig& cfg,
                    std::uint64_t base_seed = 0) {
  require(num_seeds >= 1, "ilc_score: num_seeds must be >= 1");
  IlcResult out;
  double total = 0.0;
  for (std::size_t s = 0; s < num_seeds; ++s) {
    try {
      const ParamVector p = recipe(base_seed + s);
      if (!p.values.allFinite()) throw NonFiniteError("ilc_score: training diverged");
      const double v = inconsistency_score(p, envs, cfg).score;
      out.per_seed.push_back(v);
      total += v;
    } catch (const NonFiniteError&) {
      ++out.diverged;
    }
  }
  require(!out.per_seed.empty(), "ilc_score: every run diverged");
  out.score = -total / static_cast<double>(out.per_seed.size());
  return out;
}

// ---- patchwork example -----------------------------------------------------

/// f(x) = t5 s(t1 x + t2) + t6 s(t3 x + t4), s the logistic function.
inline double patchwork_net(const Vector& t, double x) {
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  return t[4] * sig(t[0] * x + t[1]) + t[5] * sig(t[2] * x + t[3]);
}

/// Piecewise-linear target on [0, 1] with plateaus at 0, 1 and 2.
inline double patchwork_target(double x) {
  if (x < 0.4) return 0.0;
  if (x < 0.5) return 10.0 * (x - 0.4);
  if (x < 0.7) return 1.0;
  if (x < 0.8) return 10.0 * (x - 0.7) + 1.0;
  return 2.0;
}

struct PatchworkEnvs {
  std::vector<double> a;  // x in [0, 0.5)
  std::vector<double> b;  // x in [0.5, 1]

  explicit PatchworkEnvs(std::size_t grid = 1000) {
    for (std::size_t i = 0; i < grid; ++i) {
      const double x = static_cast<double>(i) / static_cast<double>(grid - 1);
      (x < 0.5 ? a : b).push_back(x);
    }
  }

  static double mse(const std::vector<double>& xs, const Vector& t) {
    double s = 0.0;
    for (double x : xs) {
      const double r = patchwork_net(t, x) - patchwork_target(x);
      s += r * r;
    }
    return s / static_cast<double>(xs.size());
  }
  double loss(std::size_t env, const Vector& t) const { return mse(env == 0 ? a : b, t); }
};

struct PatchworkVariant {
  Vector theta_star;
  Vector theta_tilde;
  double loss_a_star = 0.0, loss_b_star = 0.0;
  double loss_a_tilde = 0.0, loss_b_tilde = 0.0;
  double delta_a = 0.0, delta_b = 0.0;
  double ratio = 0.0;  // delta_b / max(delta_a, 1e-6)
};

struct PatchworkReport {
  PatchworkVariant text;    // theta2 = -50
  PatchworkVariant figure;  // theta2 = -45
  double f_star_at_099 = 0.0;
  std::size_t grid = 0;
  std::optional<ConsistencyReport> inconsistency;
};

inline PatchworkVariant patchwork_variant(const PatchworkEnvs& envs, double theta2) {
  PatchworkVariant v;
  v.theta_star = (Vector(6) << 100, theta2, 100, -75, 1, 1).finished();
  v.theta_tilde = (Vector(6) << 100, theta2, 100, -75, 1, -0.5).finished();
  v.loss_a_star = envs.loss(0, v.theta_star);
  v.loss_b_star = envs.loss(1, v.theta_star);
  v.loss_a_tilde = envs.loss(0, v.theta_tilde);
  v.loss_b_tilde = envs.loss(1, v.theta_tilde);
  v.delta_a = std::abs(v.loss_a_tilde - v.loss_a_star);
  v.delta_b = std::abs(v.loss_b_tilde - v.loss_b_star);
  v.ratio = v.delta_b / std::max(v.delta_a, 1e-6);
  return v;
}

/// Evaluates both parameter settings of the example on a dense grid and,
/// when `walk` is given, the walk estimate of the inconsistency at theta*.
inline PatchworkReport patchwork_demo(const std::optional<WalkConfig>& walk = std::nullopt, std::size_t grid = 1000) {
  const PatchworkEnvs envs(grid);
  PatchworkReport rep;
  rep.grid = grid;
  rep.text = patchwork_variant(envs, -50.0);
  rep.figure = patchwork_variant(envs, -45.0);
  rep.f_star_at_099 = patchwork_net(rep.text.theta_star, 0.99);
  if (walk) {
    auto env_loss = [&](std::size_t k, const Vector& t) { return envs.loss(k, t); };
    const std::vector<int> ids{0, 1};
    rep.inconsistency = inconsistency_score(rep.text.theta_star, 2, env_loss, *walk, ids);
  }
  return rep;
}

inline nlohmann::json to_json(const PatchworkVariant& v) {
  auto vec = [](const Vector& x) { return std::vector<double>(x.data(), x.data() + x.size()); };
  return {{"theta_star", vec(v.theta_star)}, {"theta_tilde", vec(v.theta_tilde)},
          {"loss_a_star", v.loss_a_star},   {"loss_b_star", v.loss_b_star},
          {"loss_a_tilde", v.loss_a_tilde}, {"loss_b_tilde", v.loss_b_tilde},
          {"delta_a", v.delta_a},           {"delta_b", v.delta_b},
          {"ratio", v.ratio}};
}

inline nlohmann::json to_json(const PatchworkReport& r) {
  nlohmann::json j = {{"grid", r.grid},
                      {"f_star_at_0_99", r.f_star_at_099},
                      {"delta_a", r.text.delta_a},
                      {"delta_b", r.text.delta_b},
                      {"text_parameters", to_json(r.text)},
                      {"figure_parameters", to_json(r.figure)}};
  if (r.inconsistency) {
    j["inconsistency"] = to_json(*r.inconsistency);
    j["score_over_epsilon"] = r.inconsistency->score / r.inconsistency->epsilon;
  }
  return j;
}

}  // namespace ilc

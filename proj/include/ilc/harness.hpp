#pragma once

// Experiment drivers for the synthetic task and file plumbing: every run is a
// pure function of (spec, seed) and writes its outputs atomically.

#include "ilc/consistency.hpp"
#include "ilc/train.hpp"

#include <filesystem>
#include <fstream>

namespace ilc {

// ---- gradient suppression --------------------------------------------------

struct SuppressionRow {
  std::size_t d = 0;
  std::size_t t = 0;
  double mean_sq_unmasked = 0.0;
  double mean_sq_masked = 0.0;
  double frac_masked_zero = 0.0;  // trials whose masked gradient is exactly 0
  double theory_unmasked = 0.0;   // n / d
  double upper_bound_masked = 0.0;
  double keep_rate = 0.0;  // empirical fraction of surviving components
  double keep_rate_theory = 0.0;
};

/// t = ceil(fraction * d), clamped to [ceil(d/2), d].
inline std::size_t agreement_count(std::size_t d, double fraction) {
  auto t = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(d) - 1e-12));
  return std::clamp<std::size_t>(t, (d + 1) / 2, d);
}

/// sigma^2 n (d - t) C(d, t) (1/2)^(d-1).
inline double suppression_upper_bound(std::size_t n, std::size_t d, std::size_t t, double sigma = 1.0) {
  if (t >= d) return 0.0;
  const double log_choose = std::lgamma(double(d) + 1) - std::lgamma(double(t) + 1) - std::lgamma(double(d - t) + 1);
  return sigma * sigma * double(n) * double(d - t) * std::exp(log_choose - double(d - 1) * std::log(2.0));
}

/// Squared norms of the averaged and AND-masked averaged gradient of i.i.d.
/// standard-normal gradient batches (d environments, n components).
inline std::vector<SuppressionRow> run_suppression(std::size_t n, std::span<const std::size_t> d_list,
                                                   double t_fraction, std::size_t trials, std::uint64_t seed,
                                                   std::size_t workers = 1) {
  require(n >= 1, "suppress: n must be >= 1");
  require(!d_list.empty(), "suppress: d_list must be nonempty");
  require(trials >= 1, "suppress: trials must be >= 1");
  require(t_fraction >= 0.5 && t_fraction <= 1.0, "suppress: t fraction must lie in [0.5, 1]");
  std::vector<SuppressionRow> rows(d_list.size());
  parallel_for(d_list.size(), workers, [&](std::size_t k) {
    const std::size_t d = d_list[k];
    require(d >= 1, "suppress: d must be >= 1");
    SuppressionRow r;
    r.d = d;
    r.t = agreement_count(d, t_fraction);
    const double tau = tau_for_agreement(d, r.t);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(d)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> gauss(0.0, 1.0);
    GradientBatch gb;
    gb.grads.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
    gb.env_ids.resize(d);
    std::size_t zero_trials = 0, kept = 0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
      for (Eigen::Index i = 0; i < gb.grads.size(); ++i) gb.grads.data()[i] = gauss(rng);
      const Vector avg = gb.mean();
      const Mask m = and_mask(gb, tau);
      const Vector masked = apply_mask(avg, m, {}, false).values;
      r.mean_sq_unmasked += avg.squaredNorm();
      const double sq = masked.squaredNorm();
      r.mean_sq_masked += sq;
      zero_trials += sq == 0.0;
      kept += m.count();
    }
    r.mean_sq_unmasked /= double(trials);
    r.mean_sq_masked /= double(trials);
    r.frac_masked_zero = double(zero_trials) / double(trials);
    r.theory_unmasked = double(n) / double(d);
    r.upper_bound_masked = suppression_upper_bound(n, d, r.t);
    r.keep_rate = double(kept) / double(trials * n);
    r.keep_rate_theory = keep_probability(d, r.t);
    rows[k] = r;
  });
  return rows;
}

// ---- gradient correlations -------------------------------------------------

struct CorrelationConfig {
  std::size_t num_envs = 16;
  std::size_t batch_size = 1024;  // split evenly across environments
  std::size_t hidden_layers = 3;
  std::size_t hidden_units = 256;
  SyntheticConfig data;  // num_envs / per_env are overridden
};

struct CorrelationRow {
  std::size_t seed_index = 0;
  double tau = 0.0;
  std::string mask_kind;  // "and" or "xor"
  double rho_mechanism = 0.0;
  double rho_shortcut = 0.0;
  double surviving_fraction = 0.0;
};

struct CorrelationResult {
  std::vector<CorrelationRow> rows;  // ordered by (seed, kind, tau)
};

/// Pearson correlation over the entries where `support` is nonzero; NaN when
/// fewer than two entries remain or either side is constant.
inline double pearson_on_support(const Vector& support, const Vector& x, const Vector& y) {
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < support.size(); ++i) {
    if (support[i] == 0.0) continue;
    sx += x[i];
    sy += y[i];
    ++k;
  }
  if (k < 2) return std::numeric_limits<double>::quiet_NaN();
  const double mx = sx / double(k), my = sy / double(k);
  for (Eigen::Index i = 0; i < support.size(); ++i) {
    if (support[i] == 0.0) continue;
    const double a = x[i] - mx, b = y[i] - my;
    sxx += a * a;
    syy += b * b;
    sxy += a * b;
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

/// For each seed: a fresh network and fresh data; the masked average
/// gradient on the original data is correlated with the average gradients
/// of the same examples after permuting the shortcut block (mechanism
/// signal) or the mechanism block (shortcut signal).
inline CorrelationResult run_correlation(const CorrelationConfig& cfg, std::span<const double> tau_grid,
                                         std::size_t seeds, std::uint64_t seed, std::size_t workers = 1) {
  require(cfg.num_envs >= 1 && cfg.batch_size >= cfg.num_envs, "correlate: need >= 1 example per environment");
  require(seeds >= 1 && !tau_grid.empty(), "correlate: need seeds and a tau grid");
  for (double t : tau_grid) require(t >= 0.0 && t <= 1.0, "correlate: tau outside [0, 1]");
  std::vector<std::vector<CorrelationRow>> per_seed(seeds);
  parallel_for(seeds, workers, [&](std::size_t s) {
    SyntheticConfig sc = cfg.data;
    sc.num_envs = cfg.num_envs;
    sc.per_env = cfg.batch_size / cfg.num_envs;
    sc.test_size = 1;
    sc.seed = seed + 1000003ULL * s;
    const auto data = gen_synthetic(sc).first;
    const Architecture arch{data.num_features(), cfg.hidden_layers, cfg.hidden_units};
    const ParamVector p = init_params(arch, seed + 7919ULL * s + 1);
    const LossConfig plain;
    const auto original = data.env_batches();
    const auto mech_only = permute_shortcut(data, sc.seed + 1).env_batches();
    const auto short_only = permute_mechanism(data, sc.seed + 2).env_batches();
    const GradientBatch gb = env_gradients(p, original, plain);
    const Vector avg = gb.mean();
    const Vector g_mech = env_gradients(p, mech_only, plain).mean();
    const Vector g_short = env_gradients(p, short_only, plain).mean();
    for (const char* kind : {"and", "xor"}) {
      for (double tau : tau_grid) {
        const Mask m = std::string(kind) == "and" ? and_mask(gb, tau) : xor_mask(gb, tau);
        const Vector masked = apply_mask(avg, m, {}, false).values;
        CorrelationRow r;
        r.seed_index = s;
        r.tau = tau;
        r.mask_kind = kind;
        r.rho_mechanism = pearson_on_support(masked, masked, g_mech);
        r.rho_shortcut = pearson_on_support(masked, masked, g_short);
        r.surviving_fraction = static_cast<double>((masked.array() != 0.0).count()) / double(masked.size());
        per_seed[s].push_back(r);
      }
    }
  });
  CorrelationResult out;
  for (auto& v : per_seed) out.rows.insert(out.rows.end(), v.begin(), v.end());
  return out;
}

// ---- training sweeps ---------------------------------------------------------

struct RunSummary {
  std::string recipe;
  std::size_t num_envs = 0;
  std::size_t seed_index = 0;
  double final_train_acc = 0.0;
  double final_test_acc = 0.0;
  double best_test_acc = 0.0;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
};

struct SweepScale {
  bool paper_scale = false;
  std::size_t desk_per_env = 256;
  std::size_t desk_max_epochs = 40;
};

/// Recipe for `name` at D environments: paper scale trains floor(3000/D)
/// epochs, desk scale caps that at desk_max_epochs.
inline Recipe scaled_preset(const std::string& name, std::size_t input_dim, std::size_t num_envs,
                            const SweepScale& scale) {
  Recipe r = preset(name, input_dim, num_envs);
  if (!scale.paper_scale) r.train.epochs = std::min(r.train.epochs, scale.desk_max_epochs);
  return r;
}

inline SyntheticConfig scaled_data(SyntheticConfig base, std::size_t num_envs, const SweepScale& scale) {
  base.num_envs = num_envs;
  if (!scale.paper_scale) base.per_env = scale.desk_per_env;
  return base;
}

/// Seeds for trial k: data from seed + k, initialization and batch order
/// derived from it.
inline RunSummary run_recipe(const Recipe& recipe, const EnvDataset& train_set, const EnvDataset& test_set,
                             std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  TrainConfig tc = recipe.train;
  tc.seed = seed * 2 + 1;
  const auto res = train(init_params(recipe.arch, seed * 2), train_set, &test_set, tc, on_epoch);
  RunSummary s;
  s.recipe = recipe.name;
  s.num_envs = train_set.envs().size();
  s.final_train_acc = res.history.back().train_acc;
  s.final_test_acc = res.history.back().test_acc;
  for (const auto& m : res.history) s.best_test_acc = std::max(s.best_test_acc, m.test_acc);
  s.epochs_run = res.history.size();
  s.stopped_early = res.stopped_early;
  return s;
}

/// Every (D, recipe, seed) trial; best-of-seeds is left to the caller.
inline std::vector<RunSummary> run_env_sweep(std::span<const std::size_t> d_list, std::span<const std::string> recipes,
                                             std::size_t seeds, std::uint64_t seed, const SyntheticConfig& base,
                                             const SweepScale& scale, std::size_t workers = 1) {
  require(!d_list.empty() && std::is_sorted(d_list.begin(), d_list.end()), "env_sweep: D list must be ascending");
  require(!recipes.empty() && seeds >= 1, "env_sweep: need recipes and seeds");
  const std::size_t per_d = recipes.size() * seeds;
  std::vector<RunSummary> out(d_list.size() * per_d);
  parallel_for(out.size(), workers, [&](std::size_t k) {
    const std::size_t di = k / per_d, ri = (k % per_d) / seeds, si = k % seeds;
    SyntheticConfig sc = scaled_data(base, d_list[di], scale);
    sc.seed = seed + si;
    const auto [tr, te] = gen_synthetic(sc);
    const Recipe r = scaled_preset(recipes[ri], tr.num_features(), d_list[di], scale);
    out[k] = run_recipe(r, tr, te, seed + si);
    out[k].seed_index = si;
  });
  return out;
}

struct LabelNoiseRow {
  std::string recipe;
  std::size_t seed_index = 0;
  std::size_t epoch = 0;
  double mislabeled_assigned_acc = 0.0;  // assigned labels, examples whose label changed
  double resampled_assigned_acc = 0.0;   // assigned labels, every resampled example
  double clean_acc = 0.0;                // examples outside the resampled subset
  double test_acc = 0.0;
  double train_acc = 0.0;
};

/// Per-epoch accuracies after resampling `fraction` of the training labels.
/// A classifier that ignores the noise scores ~0 on the mislabeled subset and
/// ~0.5 on the resampled subset as a whole.
inline std::vector<LabelNoiseRow> run_label_noise(double fraction, std::span<const std::string> recipes,
                                                  std::size_t seeds, std::uint64_t seed, const SyntheticConfig& base,
                                                  const SweepScale& scale, std::size_t workers = 1) {
  require(fraction >= 0.0 && fraction < 1.0, "label_noise: fraction must lie in [0, 1)");
  require(!recipes.empty() && seeds >= 1, "label_noise: need recipes and seeds");
  std::vector<std::vector<LabelNoiseRow>> trials(recipes.size() * seeds);
  parallel_for(trials.size(), workers, [&](std::size_t k) {
    const std::size_t ri = k / seeds, si = k % seeds;
    SyntheticConfig sc = scaled_data(base, base.num_envs, scale);
    sc.seed = seed + si;
    const auto [clean, te] = gen_synthetic(sc);
    const auto [noisy, resampled] = shuffle_labels(clean, fraction, sc.seed + 17);
    std::vector<std::size_t> wrong, untouched;
    std::vector<std::uint8_t> in_subset(clean.size(), 0);
    for (auto i : resampled) {
      in_subset[i] = 1;
      if (noisy.labels[i] != clean.labels[i]) wrong.push_back(i);
    }
    for (std::size_t i = 0; i < clean.size(); ++i)
      if (!in_subset[i]) untouched.push_back(i);
    const RowMatrix x_wrong = noisy.rows(wrong), x_res = noisy.rows(resampled), x_clean = noisy.rows(untouched);
    const auto y_wrong = noisy.labels_at(wrong), y_res = noisy.labels_at(resampled), y_clean = noisy.labels_at(untouched);
    auto acc = [](const ParamVector& p, const RowMatrix& x, const std::vector<int>& y) {
      return y.empty() ? std::numeric_limits<double>::quiet_NaN() : accuracy(p, x, y);
    };
    const Recipe r = scaled_preset(recipes[ri], noisy.num_features(), sc.num_envs, scale);
    run_recipe(r, noisy, te, seed + si, [&](const EpochMetrics& m, const ParamVector& p) {
      LabelNoiseRow row;
      row.recipe = r.name;
      row.seed_index = si;
      row.epoch = m.epoch;
      row.mislabeled_assigned_acc = acc(p, x_wrong, y_wrong);
      row.resampled_assigned_acc = acc(p, x_res, y_res);
      row.clean_acc = acc(p, x_clean, y_clean);
      row.test_acc = m.test_acc;
      row.train_acc = m.train_acc;
      trials[k].push_back(row);
    });
  });
  std::vector<LabelNoiseRow> out;
  for (auto& t : trials) out.insert(out.end(), t.begin(), t.end());
  return out;
}

// ---- CSV -------------------------------------------------------------------

inline std::string config_hash(const nlohmann::json& resolved) {
  return fmt::format("{:016x}", fnv1a64(resolved.dump()));
}

inline std::string provenance_line(const nlohmann::json& resolved) {
  return fmt::format("# config_hash={}\n", config_hash(resolved));
}

inline std::string suppression_csv(std::span<const SuppressionRow> rows, const nlohmann::json& resolved) {
  std::string out = provenance_line(resolved);
  out += "d,t,mean_sq_unmasked,mean_sq_masked,frac_masked_zero,theory_unmasked,upper_bound_masked,keep_rate,keep_rate_theory\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.d, r.t, r.mean_sq_unmasked,
                       r.mean_sq_masked, r.frac_masked_zero, r.theory_unmasked, r.upper_bound_masked, r.keep_rate,
                       r.keep_rate_theory);
  return out;
}

inline std::string correlation_csv(const CorrelationResult& res, const nlohmann::json& resolved) {
  std::string out = provenance_line(resolved);
  out += "seed,tau,mask_kind,rho_mechanism,rho_shortcut,surviving_fraction\n";
  for (const auto& r : res.rows)
    out += fmt::format("{},{:.17g},{},{:.17g},{:.17g},{:.17g}\n", r.seed_index, r.tau, r.mask_kind, r.rho_mechanism,
                       r.rho_shortcut, r.surviving_fraction);
  return out;
}

inline std::string sweep_csv(std::span<const RunSummary> rows, const nlohmann::json& resolved) {
  std::string out = provenance_line(resolved);
  out += "num_envs,recipe,seed,final_train_acc,final_test_acc,best_test_acc,epochs_run,stopped_early\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{},{:.17g},{:.17g},{:.17g},{},{}\n", r.num_envs, r.recipe, r.seed_index,
                       r.final_train_acc, r.final_test_acc, r.best_test_acc, r.epochs_run, int(r.stopped_early));
  return out;
}

inline std::string label_noise_csv(std::span<const LabelNoiseRow> rows, const nlohmann::json& resolved) {
  std::string out = provenance_line(resolved);
  out += "recipe,seed,epoch,mislabeled_assigned_acc,resampled_assigned_acc,clean_acc,test_acc,train_acc\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.recipe, r.seed_index, r.epoch,
                       r.mislabeled_assigned_acc, r.resampled_assigned_acc, r.clean_acc, r.test_acc, r.train_acc);
  return out;
}

// ---- experiment specs --------------------------------------------------------

enum class ExperimentKind { train, suppress, correlate, consistency, env_sweep, label_noise, patchwork };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::train: return "train";
    case ExperimentKind::suppress: return "suppress";
    case ExperimentKind::correlate: return "correlate";
    case ExperimentKind::consistency: return "consistency";
    case ExperimentKind::env_sweep: return "env_sweep";
    case ExperimentKind::label_noise: return "label_noise";
    case ExperimentKind::patchwork: return "patchwork";
  }
  return "?";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  return detail::parse_enum(s,
                            {ExperimentKind::train, ExperimentKind::suppress, ExperimentKind::correlate,
                             ExperimentKind::consistency, ExperimentKind::env_sweep, ExperimentKind::label_noise,
                             ExperimentKind::patchwork},
                            "experiment kind");
}

/// `params` holds the kind-specific settings; unknown keys are rejected.
struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::patchwork;
  nlohmann::json params = nlohmann::json::object();
  std::filesystem::path output_path;
  std::optional<std::uint64_t> seed;
  bool paper_scale = false;
  std::size_t workers = 1;
};

/// Output files produced by one run: file name -> contents.
using Artifacts = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline void check_keys(const nlohmann::json& p, std::initializer_list<const char*> allowed, const char* kind) {
  require(p.is_object(), fmt::format("{}: params must be an object", kind));
  for (const auto& [k, v] : p.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    require(ok, fmt::format("{}: unknown parameter '{}'", kind, k));
  }
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), fmt::format("cannot open '{}'", p.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
std::vector<T> list_param(const nlohmann::json& p, const char* key, std::vector<T> fallback) {
  return p.contains(key) ? p[key].get<std::vector<T>>() : fallback;
}

inline std::uint64_t need_seed(const ExperimentSpec& s) {
  require(s.seed.has_value(), fmt::format("{}: --seed is required", to_string(s.kind)));
  return *s.seed;
}

inline SyntheticConfig data_params(const nlohmann::json& p) {
  SyntheticConfig sc;
  if (p.contains("data")) sc = synthetic_from_json(p["data"], sc);
  sc.validate();
  return sc;
}

inline SweepScale scale_params(const ExperimentSpec& s) {
  SweepScale sc;
  sc.paper_scale = s.paper_scale;
  sc.desk_per_env = s.params.value("desk_per_env", sc.desk_per_env);
  sc.desk_max_epochs = s.params.value("desk_max_epochs", sc.desk_max_epochs);
  return sc;
}

inline WalkConfig walk_params(const nlohmann::json& p, std::uint64_t seed, std::size_t workers) {
  WalkConfig w;
  w.epsilon = p.value("epsilon", w.epsilon);
  w.step_scale = p.value("step_scale", w.step_scale);
  w.num_steps = p.value("num_steps", w.num_steps);
  w.num_restarts = p.value("num_restarts", w.num_restarts);
  w.burn_in = p.value("burn_in", w.burn_in);
  w.auto_tune = p.value("auto_tune", w.auto_tune);
  w.seed = seed;
  w.workers = workers;
  w.validate();
  return w;
}

inline Artifacts run_train(const ExperimentSpec& s, nlohmann::json& resolved) {
  const auto& p = s.params;
  check_keys(p, {"dataset", "test_dataset", "d_m", "preset", "train", "hidden_layers", "hidden_units"}, "train");
  require(p.contains("dataset"), "train: a dataset path is required");
  const std::filesystem::path path = p["dataset"].get<std::string>();
  require(std::filesystem::exists(path), fmt::format("train: dataset '{}' does not exist", path.string()));
  const std::size_t d_m = p.value("d_m", std::size_t{2});
  const auto seed = need_seed(s);
  const EnvDataset tr = dataset_from_csv(read_file(path), d_m, Split::train);
  std::optional<EnvDataset> te;
  if (p.contains("test_dataset")) te = dataset_from_csv(read_file(p["test_dataset"].get<std::string>()), d_m, Split::test);
  const std::size_t num_envs = tr.envs().size();
  Recipe r = preset(p.value("preset", std::string("and_mask")), tr.num_features(), num_envs);
  r.arch.hidden_layers = p.value("hidden_layers", r.arch.hidden_layers);
  r.arch.hidden_units = p.value("hidden_units", r.arch.hidden_units);
  if (p.contains("train")) r.train = train_config_from_json(p["train"], r.train);
  r.train.seed = seed;
  r.train.workers = s.workers;
  r.train.validate();
  resolved["params"]["train"] = to_json(r.train);
  resolved["params"]["architecture"] = arch_to_json(r.arch);
  const auto res = train(init_params(r.arch, seed), tr, te ? &*te : nullptr, r.train);
  return {{"metrics.csv", metrics_csv(res.history, fmt::format("config_hash={}", config_hash(resolved)))},
          {"model.json", model_to_json(res.params)}};
}

inline Artifacts run_suppress(const ExperimentSpec& s, nlohmann::json& resolved) {
  const auto& p = s.params;
  check_keys(p, {"n", "d_list", "t_fraction", "trials"}, "suppress");
  const std::size_t n = p.value("n", std::size_t{3000});
  const auto d_list = list_param<std::size_t>(p, "d_list", {4, 8, 16, 32, 64, 128, 256, 512});
  const double tf = p.value("t_fraction", 0.8);
  const std::size_t trials = p.value("trials", std::size_t{100});
  resolved["params"] = {{"n", n}, {"d_list", d_list}, {"t_fraction", tf}, {"trials", trials}};
  const auto rows = run_suppression(n, d_list, tf, trials, need_seed(s), s.workers);
  return {{"suppression.csv", suppression_csv(rows, resolved)}};
}

inline Artifacts run_correlate(const ExperimentSpec& s, nlohmann::json& resolved) {
  const auto& p = s.params;
  check_keys(p, {"num_envs", "batch_size", "hidden_layers", "hidden_units", "tau_grid", "seeds", "data"}, "correlate");
  CorrelationConfig c;
  c.num_envs = p.value("num_envs", c.num_envs);
  c.batch_size = p.value("batch_size", c.batch_size);
  c.hidden_layers = p.value("hidden_layers", c.hidden_layers);
  c.hidden_units = p.value("hidden_units", c.hidden_units);
  c.data = data_params(p);
  const auto taus = list_param<double>(p, "tau_grid", {0.0, 0.2, 0.4, 0.6, 0.8, 1.0});
  const std::size_t seeds = p.value("seeds", std::size_t{10});
  resolved["params"] = {{"num_envs", c.num_envs}, {"batch_size", c.batch_size}, {"hidden_layers", c.hidden_layers},
                        {"hidden_units", c.hidden_units}, {"tau_grid", taus}, {"seeds", seeds},
                        {"data", to_json(c.data)}};
  const auto res = run_correlation(c, taus, seeds, need_seed(s), s.workers);
  return {{"correlation.csv", correlation_csv(res, resolved)}};
}

inline Artifacts run_consistency_kind(const ExperimentSpec& s, nlohmann::json& resolved) {
  const auto& p = s.params;
  check_keys(p, {"model", "dataset", "d_m", "lam_a", "lam_b", "epsilon", "step_scale", "num_steps", "num_restarts",
                 "burn_in", "auto_tune"},
             "consistency");
  const WalkConfig w = walk_params(p, need_seed(s), s.workers);
  resolved["params"] = p;
  nlohmann::json out;
  if (p.contains("lam_a")) {
    QuadraticEnvPair q{Eigen::Map<const Vector>(p["lam_a"].get<std::vector<double>>().data(),
                                                static_cast<Eigen::Index>(p["lam_a"].size())),
                       Eigen::Map<const Vector>(p["lam_b"].get<std::vector<double>>().data(),
                                                static_cast<Eigen::Index>(p.at("lam_b").size()))};
    q.validate();
    out = to_json(inconsistency_score(q, w));
    out["closed_form"] = quadratic_inconsistency(q, w.epsilon);
    out["det_ratio"] = det_ratio(q);
    out["det_ratio_bound"] = det_ratio_bound(q, w.epsilon);
  } else {
    require(p.contains("model") && p.contains("dataset"), "consistency: need lam_a/lam_b or model and dataset paths");
    const ParamVector m = load_model(p["model"].get<std::string>());
    const EnvDataset ds =
        dataset_from_csv(read_file(p["dataset"].get<std::string>()), p.value("d_m", std::size_t{2}), Split::train);
    const auto envs = ds.env_batches();
    out = to_json(inconsistency_score(m, envs, w));
  }
  return {{"consistency.json", out.dump(2) + "\n"}};
}

inline Artifacts run_env_sweep_kind(const ExperimentSpec& s, nlohmann::json& resolved) {
  const auto& p = s.params;
  check_keys(p, {"d_list", "recipes", "seeds", "data", "desk_per_env", "desk_max_epochs"}, "env_sweep");
  const auto d_list = list_param<std::size_t>(p, "d_list", {16, 32, 64});
  const auto recipes = list_param<std::string>(p, "recipes", {"and_mask", "baseline"});
  for (const auto& r : recipes) preset(r, 1, 1);
  const std::size_t seeds = p.value("seeds", std::size_t{5});
  const auto base = data_params(p);
  const auto scale = scale_params(s);
  resolved["params"] = {{"d_list", d_list}, {"recipes", recipes}, {"seeds", seeds}, {"data", to_json(base)},
                        {"paper_scale", scale.paper_scale}, {"desk_per_env", scale.desk_per_env},
                        {"desk_max_epochs", scale.desk_max_epochs}};
  const auto rows = run_env_sweep(d_list, recipes, seeds, need_seed(s), base, scale, s.workers);
  return {{"env_sweep.csv", sweep_csv(rows, resolved)}};
}

inline Artifacts run_label_noise_kind(const ExperimentSpec& s, nlohmann::json& resolved) {
  const auto& p = s.params;
  check_keys(p, {"fraction", "recipes", "seeds", "data", "desk_per_env", "desk_max_epochs"}, "label_noise");
  const double fraction = p.value("fraction", 0.25);
  const auto recipes = list_param<std::string>(p, "recipes", {"and_mask", "baseline"});
  for (const auto& r : recipes) preset(r, 1, 1);
  const std::size_t seeds = p.value("seeds", std::size_t{1});
  const auto base = data_params(p);
  const auto scale = scale_params(s);
  resolved["params"] = {{"fraction", fraction}, {"recipes", recipes}, {"seeds", seeds}, {"data", to_json(base)},
                        {"paper_scale", scale.paper_scale}, {"desk_per_env", scale.desk_per_env},
                        {"desk_max_epochs", scale.desk_max_epochs}};
  const auto rows = run_label_noise(fraction, recipes, seeds, need_seed(s), base, scale, s.workers);
  return {{"label_noise.csv", label_noise_csv(rows, resolved)}};
}

inline Artifacts run_patchwork_kind(const ExperimentSpec& s, nlohmann::json& resolved) {
  const auto& p = s.params;
  check_keys(p, {"grid", "walk", "epsilon", "step_scale", "num_steps", "num_restarts", "burn_in", "auto_tune"},
             "patchwork");
  const std::size_t grid = p.value("grid", std::size_t{1000});
  std::optional<WalkConfig> w;
  if (p.value("walk", s.seed.has_value())) w = walk_params(p, need_seed(s), s.workers);
  resolved["params"] = p;
  resolved["params"]["grid"] = grid;
  return {{"patchwork.json", to_json(patchwork_demo(w, grid)).dump(2) + "\n"}};
}

inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), fmt::format("cannot write '{}'", tmp));
    out << contents;
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw std::runtime_error(fmt::format("short write to '{}'", tmp));
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Validates and runs the spec, returning the artifacts without touching
/// the file system.
inline Artifacts compute_experiment(const ExperimentSpec& spec, nlohmann::json* resolved_out = nullptr) {
  nlohmann::json resolved = {{"kind", to_string(spec.kind)}, {"params", spec.params},
                             {"seed", spec.seed ? nlohmann::json(*spec.seed) : nlohmann::json(nullptr)},
                             {"paper_scale", spec.paper_scale}};
  Artifacts out;
  switch (spec.kind) {
    case ExperimentKind::train: out = detail::run_train(spec, resolved); break;
    case ExperimentKind::suppress: out = detail::run_suppress(spec, resolved); break;
    case ExperimentKind::correlate: out = detail::run_correlate(spec, resolved); break;
    case ExperimentKind::consistency: out = detail::run_consistency_kind(spec, resolved); break;
    case ExperimentKind::env_sweep: out = detail::run_env_sweep_kind(spec, resolved); break;
    case ExperimentKind::label_noise: out = detail::run_label_noise_kind(spec, resolved); break;
    case ExperimentKind::patchwork: out = detail::run_patchwork_kind(spec, resolved); break;
  }
  resolved["config_hash"] = config_hash(resolved);
  out.emplace_back("config.json", resolved.dump(2) + "\n");
  if (resolved_out) *resolved_out = resolved;
  return out;
}

/// Runs the spec and writes its artifacts into spec.output_path. Nothing is
/// written unless the whole computation succeeds; files already written are
/// removed if a later write fails. Returns 0 on success.
inline int run_experiment(const ExperimentSpec& spec, std::string* error = nullptr) {
  std::vector<std::filesystem::path> written;
  bool created_dir = false;
  try {
    require(!spec.output_path.empty(), "an output directory is required");
    const Artifacts files = compute_experiment(spec);
    if (!std::filesystem::exists(spec.output_path))
      created_dir = std::filesystem::create_directories(spec.output_path);
    for (const auto& [name, contents] : files) {
      const auto path = spec.output_path / name;
      detail::write_atomic(path, contents);
      written.push_back(path);
    }
    return 0;
  } catch (const std::exception& e) {
    std::error_code ec;
    for (const auto& p : written) std::filesystem::remove(p, ec);
    if (created_dir) std::filesystem::remove_all(spec.output_path, ec);
    if (error) *error = e.what();
    return 1;
  }
}

}  // namespace ilc

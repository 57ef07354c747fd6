#pragma once

// Synthetic memorization benchmark: a planar two-spiral mechanism shared by
// every environment plus a per-environment linear shortcut block.

#include "ilc/model.hpp"

#include <filesystem>
#include <map>
#include <numbers>
#include <set>

namespace ilc {

struct SyntheticConfig {
  std::size_t num_envs = 32;
  std::size_t per_env = 1280;
  std::size_t d_m = 2;
  std::size_t d_s = 32;
  std::size_t spiral_revolutions = 3;
  double radius_min = 0.08;
  double radius_max = 1.0;
  double radius_noise = 0.02;
  double shortcut_sigma = 0.1;  // standard deviation
  std::size_t test_size = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_envs >= 1, "synthetic: num_envs must be >= 1");
    require(per_env >= 1, "synthetic: per_env must be >= 1");
    require(d_m == 2, "synthetic: the spiral mechanism is planar (d_m = 2)");
    require(d_s >= 1, "synthetic: d_s must be >= 1");
    require(radius_min > 0.0 && radius_min < radius_max, "synthetic: need 0 < radius_min < radius_max");
    require(radius_noise >= 0.0 && shortcut_sigma >= 0.0, "synthetic: noise scales must be >= 0");
  }
};

inline nlohmann::json to_json(const SyntheticConfig& c) {
  return {{"num_envs", c.num_envs},         {"per_env", c.per_env},
          {"d_m", c.d_m},                   {"d_s", c.d_s},
          {"spiral_revolutions", c.spiral_revolutions}, {"radius_min", c.radius_min},
          {"radius_max", c.radius_max},     {"radius_noise", c.radius_noise},
          {"shortcut_sigma", c.shortcut_sigma}, {"test_size", c.test_size},
          {"seed", c.seed}};
}

inline SyntheticConfig synthetic_from_json(const nlohmann::json& j, SyntheticConfig c = {}) {
  c.num_envs = j.value("num_envs", c.num_envs);
  c.per_env = j.value("per_env", c.per_env);
  c.d_m = j.value("d_m", c.d_m);
  c.d_s = j.value("d_s", c.d_s);
  c.spiral_revolutions = j.value("spiral_revolutions", c.spiral_revolutions);
  c.radius_min = j.value("radius_min", c.radius_min);
  c.radius_max = j.value("radius_max", c.radius_max);
  c.radius_noise = j.value("radius_noise", c.radius_noise);
  c.shortcut_sigma = j.value("shortcut_sigma", c.shortcut_sigma);
  c.test_size = j.value("test_size", c.test_size);
  c.seed = j.value("seed", c.seed);
  return c;
}

enum class Split { train, test };

/// Examples are rows of `features`: the mechanism block occupies columns
/// [0, d_m), the shortcut block [d_m, d_m + d_s). Test examples carry env -1.
struct EnvDataset {
  Split split = Split::train;
  std::size_t d_m = 2;
  std::size_t d_s = 0;
  RowMatrix features;
  std::vector<int> labels;
  std::vector<int> env_ids;
  std::map<int, Vector> shortcut_vectors;

  std::size_t size() const { return labels.size(); }
  std::size_t num_features() const { return d_m + d_s; }

  std::vector<int> envs() const {
    std::set<int> s(env_ids.begin(), env_ids.end());
    return {s.begin(), s.end()};
  }

  /// Example indices per environment, in env-id order.
  std::vector<std::vector<std::size_t>> indices_by_env() const {
    const auto ids = envs();
    std::map<int, std::size_t> slot;
    for (std::size_t i = 0; i < ids.size(); ++i) slot[ids[i]] = i;
    std::vector<std::vector<std::size_t>> out(ids.size());
    for (std::size_t i = 0; i < size(); ++i) out[slot[env_ids[i]]].push_back(i);
    return out;
  }

  RowMatrix rows(std::span<const std::size_t> idx) const {
    RowMatrix m(static_cast<Eigen::Index>(idx.size()), features.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(idx[i]));
    return m;
  }

  std::vector<int> labels_at(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }

  EnvBatch batch(int env_id, std::span<const std::size_t> idx) const { return {env_id, rows(idx), labels_at(idx)}; }

  /// Every environment as one batch each.
  std::vector<EnvBatch> env_batches() const {
    std::vector<EnvBatch> out;
    const auto ids = envs();
    const auto groups = indices_by_env();
    for (std::size_t e = 0; e < ids.size(); ++e) out.push_back(batch(ids[e], groups[e]));
    return out;
  }
};

namespace detail {

struct SpiralSampler {
  const SyntheticConfig& cfg;

  // Class 1 sits on the arc (r cos a, r sin a) with a = 2 pi n r; class 0 is
  // its point reflection. The radial jitter is applied after the angle.
  void operator()(std::mt19937_64& rng, int label, double* out) const {
    std::uniform_real_distribution<double> radius(cfg.radius_min, cfg.radius_max);
    std::uniform_real_distribution<double> jitter(-cfg.radius_noise, cfg.radius_noise);
    double r = radius(rng);
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(cfg.spiral_revolutions) * r;
    if (cfg.radius_noise > 0.0) r += jitter(rng);
    const double s = label == 1 ? 1.0 : -1.0;
    out[0] = s * r * std::cos(angle);
    out[1] = s * r * std::sin(angle);
  }
};

}  // namespace detail

inline std::pair<EnvDataset, EnvDataset> gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const detail::SpiralSampler spiral{cfg};
  const auto d = static_cast<Eigen::Index>(cfg.d_m + cfg.d_s);

  EnvDataset train;
  train.split = Split::train;
  train.d_m = cfg.d_m;
  train.d_s = cfg.d_s;
  const auto n_train = static_cast<Eigen::Index>(cfg.num_envs * cfg.per_env);
  train.features.resize(n_train, d);
  Eigen::Index row = 0;
  for (std::size_t e = 0; e < cfg.num_envs; ++e) {
    Vector xs(static_cast<Eigen::Index>(cfg.d_s));
    for (Eigen::Index k = 0; k < xs.size(); ++k) xs[k] = cfg.shortcut_sigma * gauss(rng);
    for (std::size_t i = 0; i < cfg.per_env; ++i, ++row) {
      const int y = coin(rng) ? 1 : 0;
      double* f = train.features.row(row).data();
      spiral(rng, y, f);
      const double s = y == 1 ? 1.0 : -1.0;
      for (Eigen::Index k = 0; k < xs.size(); ++k) f[cfg.d_m + static_cast<std::size_t>(k)] = s * xs[k];
      train.labels.push_back(y);
      train.env_ids.push_back(static_cast<int>(e));
    }
    train.shortcut_vectors[static_cast<int>(e)] = std::move(xs);
  }

  EnvDataset test;
  test.split = Split::test;
  test.d_m = cfg.d_m;
  test.d_s = cfg.d_s;
  test.features.resize(static_cast<Eigen::Index>(cfg.test_size), d);
  for (Eigen::Index i = 0; i < test.features.rows(); ++i) {
    const int y = coin(rng) ? 1 : 0;
    double* f = test.features.row(i).data();
    spiral(rng, y, f);
    for (std::size_t k = 0; k < cfg.d_s; ++k) f[cfg.d_m + k] = cfg.shortcut_sigma * gauss(rng);
    test.labels.push_back(y);
    test.env_ids.push_back(-1);
  }
  return {std::move(train), std::move(test)};
}

namespace detail {

inline EnvDataset permute_block(const EnvDataset& ds, std::size_t begin, std::size_t width, std::uint64_t seed,
                                const char* who) {
  require(ds.split == Split::train, std::string(who) + ": only defined for the train split");
  std::vector<std::size_t> perm(ds.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  EnvDataset out = ds;
  const auto b = static_cast<Eigen::Index>(begin);
  const auto w = static_cast<Eigen::Index>(width);
  for (std::size_t i = 0; i < perm.size(); ++i)
    out.features.row(static_cast<Eigen::Index>(i)).segment(b, w) =
        ds.features.row(static_cast<Eigen::Index>(perm[i])).segment(b, w);
  return out;
}

}  // namespace detail

/// Permutes the mechanism block across examples; labels and shortcuts stay.
inline EnvDataset permute_mechanism(const EnvDataset& ds, std::uint64_t seed) {
  return detail::permute_block(ds, 0, ds.d_m, seed, "permute_mechanism");
}

/// Permutes the shortcut block across examples; labels and mechanism stay.
inline EnvDataset permute_shortcut(const EnvDataset& ds, std::uint64_t seed) {
  return detail::permute_block(ds, ds.d_m, ds.d_s, seed, "permute_shortcut");
}

/// Resamples the labels of round(fraction * N) uniformly chosen examples.
/// Returns the new dataset and the sorted resampled indices.
inline std::pair<EnvDataset, std::vector<std::size_t>> shuffle_labels(const EnvDataset& ds, double fraction,
                                                                      std::uint64_t seed) {
  require(fraction >= 0.0 && fraction <= 1.0, "shuffle_labels: fraction must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(k);
  std::sort(order.begin(), order.end());
  EnvDataset out = ds;
  std::bernoulli_distribution coin(0.5);
  for (auto i : order) out.labels[i] = coin(rng) ? 1 : 0;
  return {std::move(out), std::move(order)};
}

// ---- dataset files --------------------------------------------------------

inline std::string dataset_to_csv(const EnvDataset& ds) {
  std::string out = "env,label";
  for (std::size_t k = 0; k < ds.num_features(); ++k) out += fmt::format(",f{}", k);
  out += '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += fmt::format("{},{}", ds.env_ids[i], ds.labels[i]);
    for (Eigen::Index k = 0; k < ds.features.cols(); ++k)
      out += fmt::format(",{:.17g}", ds.features(static_cast<Eigen::Index>(i), k));
    out += '\n';
  }
  return out;
}

inline EnvDataset dataset_from_csv(const std::string& text, std::size_t d_m, Split split) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "dataset csv: missing header");
  const auto width = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  require(line.rfind("env,label", 0) == 0 && width >= d_m, "dataset csv: malformed header");
  EnvDataset ds;
  ds.split = split;
  ds.d_m = d_m;
  ds.d_s = width - d_m;
  std::vector<double> flat;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream cells(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(cells, cell, ',')) {
      if (col == 0) ds.env_ids.push_back(std::stoi(cell));
      else if (col == 1) ds.labels.push_back(std::stoi(cell));
      else flat.push_back(std::stod(cell));
      ++col;
    }
    require(col == width + 2, "dataset csv: ragged row");
  }
  ds.features = Eigen::Map<RowMatrix>(flat.data(), static_cast<Eigen::Index>(ds.labels.size()),
                                      static_cast<Eigen::Index>(width));
  return ds;
}

inline nlohmann::json dataset_metadata(const SyntheticConfig& cfg, const EnvDataset& train) {
  nlohmann::json vecs = nlohmann::json::object();
  for (const auto& [env, v] : train.shortcut_vectors)
    vecs[std::to_string(env)] = std::vector<double>(v.data(), v.data() + v.size());
  return {{"config", to_json(cfg)}, {"shortcut_vectors", vecs}};
}

}  // namespace ilc

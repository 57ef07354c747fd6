#pragma once

// Training loop over an environment dataset: per-step environment batches,
// gradient aggregation, optimizer step, step-wise learning-rate schedule and
// per-epoch metrics.

#include "ilc/data.hpp"
#include "ilc/masking.hpp"
#include "ilc/optim.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>

namespace ilc {

enum class OptimizerKind { gd, adam, temporal_adam };
enum class MaskRule { none, and_mask, xor_mask, geometric };

/// How each step's examples are drawn.
///  split:   batch_size is divided evenly across environments
///  per_env: batch_size examples from every environment
///  pooled:  batch_size examples from the pooled training set
///  automatic: split for masked rules, pooled for mask_rule = none
enum class Batching { automatic, split, per_env, pooled };

/// Where the L1/L2 penalty gradient enters.
///  after_mask: added to the aggregated data gradient (optimizer-style weight decay)
///  in_loss:    part of every environment's loss, so it is masked too
///  decoupled:  a separate shrink step after the optimizer update (L2 only)
enum class PenaltyMode { after_mask, in_loss, decoupled };

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::gd: return "gd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::temporal_adam: return "temporal_adam";
  }
  return "?";
}
inline const char* to_string(MaskRule k) {
  switch (k) {
    case MaskRule::none: return "none";
    case MaskRule::and_mask: return "and";
    case MaskRule::xor_mask: return "xor";
    case MaskRule::geometric: return "geometric";
  }
  return "?";
}
inline const char* to_string(Batching k) {
  switch (k) {
    case Batching::automatic: return "auto";
    case Batching::split: return "split";
    case Batching::per_env: return "per_env";
    case Batching::pooled: return "pooled";
  }
  return "?";
}
inline const char* to_string(PenaltyMode k) {
  switch (k) {
    case PenaltyMode::after_mask: return "after_mask";
    case PenaltyMode::in_loss: return "in_loss";
    case PenaltyMode::decoupled: return "decoupled";
  }
  return "?";
}

namespace detail {
template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> all, const char* what) {
  for (E e : all)
    if (s == to_string(e)) return e;
  throw std::invalid_argument(fmt::format("unknown {} '{}'", what, s));
}
}  // namespace detail

inline OptimizerKind parse_optimizer(const std::string& s) {
  return detail::parse_enum(s, {OptimizerKind::gd, OptimizerKind::adam, OptimizerKind::temporal_adam}, "optimizer");
}
inline MaskRule parse_mask_rule(const std::string& s) {
  return detail::parse_enum(s, {MaskRule::none, MaskRule::and_mask, MaskRule::xor_mask, MaskRule::geometric},
                            "mask rule");
}
inline Batching parse_batching(const std::string& s) {
  return detail::parse_enum(s, {Batching::automatic, Batching::split, Batching::per_env, Batching::pooled},
                            "batching");
}
inline PenaltyMode parse_penalty_mode(const std::string& s) {
  return detail::parse_enum(s, {PenaltyMode::after_mask, PenaltyMode::in_loss, PenaltyMode::decoupled},
                            "penalty mode");
}

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  MaskRule mask_rule = MaskRule::none;
  double tau = 0.0;
  bool rescale = false;
  double learning_rate = 1e-2;
  double momentum = 0.0;  // gd only
  std::size_t batch_size = 128;
  std::size_t epochs = 93;
  // (epoch, factor): from that epoch on the rate is multiplied by factor.
  // Empty means x0.1 at 1/2 and again at 3/4 of training.
  std::vector<std::pair<std::size_t, double>> lr_drop_epochs;
  bool default_lr_drops = true;
  Batching batching = Batching::automatic;
  LossConfig loss;
  PenaltyMode penalty_mode = PenaltyMode::after_mask;
  bool early_stop = false;  // stop once train acc > 0.97 while test acc < 0.6
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const {
    require(epochs >= 1, "train: epochs must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), "train: learning_rate must be finite and positive");
    require(batch_size >= 1, "train: batch_size must be >= 1");
    require(tau >= 0.0 && tau <= 1.0, "train: tau must lie in [0, 1]");
    require(momentum >= 0.0 && momentum < 1.0, "train: momentum must lie in [0, 1)");
    require(!(momentum > 0.0 && optimizer != OptimizerKind::gd), "train: momentum applies to the gd optimizer only");
    require(!(penalty_mode == PenaltyMode::decoupled && loss.l1_coeff > 0.0),
            "train: decoupled penalty mode supports L2 only");
    require(!(batching == Batching::pooled && mask_rule != MaskRule::none),
            "train: masked rules need per-environment batches");
    for (const auto& [e, f] : lr_drop_epochs) {
      require(e < epochs, "train: lr drop epoch beyond the last epoch");
      require(f > 0.0 && std::isfinite(f), "train: lr drop factor must be positive");
    }
    loss.validate();
  }

  Batching effective_batching() const {
    if (batching != Batching::automatic) return batching;
    return mask_rule == MaskRule::none ? Batching::pooled : Batching::split;
  }

  std::vector<std::pair<std::size_t, double>> lr_schedule() const {
    if (!lr_drop_epochs.empty() || !default_lr_drops) return lr_drop_epochs;
    std::vector<std::pair<std::size_t, double>> s;
    if (epochs / 2 >= 1) s.emplace_back(epochs / 2, 0.1);
    if (3 * epochs / 4 > epochs / 2) s.emplace_back(3 * epochs / 4, 0.1);
    return s;
  }

  double lr_at(std::size_t epoch) const {
    double lr = learning_rate;
    for (const auto& [e, f] : lr_schedule())
      if (epoch >= e) lr *= f;
    return lr;
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json drops = nlohmann::json::array();
  for (const auto& [e, f] : c.lr_schedule()) drops.push_back({e, f});
  return {{"optimizer", to_string(c.optimizer)},
          {"mask_rule", to_string(c.mask_rule)},
          {"tau", c.tau},
          {"rescale", c.rescale},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"lr_drop_epochs", drops},
          {"batching", to_string(c.batching)},
          {"l1", c.loss.l1_coeff},
          {"l2", c.loss.l2_coeff},
          {"dropout", c.loss.dropout_rate},
          {"penalty_mode", to_string(c.penalty_mode)},
          {"early_stop", c.early_stop},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j["optimizer"]);
  if (j.contains("mask_rule")) c.mask_rule = parse_mask_rule(j["mask_rule"]);
  if (j.contains("batching")) c.batching = parse_batching(j["batching"]);
  if (j.contains("penalty_mode")) c.penalty_mode = parse_penalty_mode(j["penalty_mode"]);
  c.tau = j.value("tau", c.tau);
  c.rescale = j.value("rescale", c.rescale);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.loss.l1_coeff = j.value("l1", c.loss.l1_coeff);
  c.loss.l2_coeff = j.value("l2", c.loss.l2_coeff);
  c.loss.dropout_rate = j.value("dropout", c.loss.dropout_rate);
  c.early_stop = j.value("early_stop", c.early_stop);
  c.seed = j.value("seed", c.seed);
  if (j.contains("lr_drop_epochs")) {
    c.lr_drop_epochs.clear();
    for (const auto& d : j["lr_drop_epochs"]) c.lr_drop_epochs.emplace_back(d.at(0).get<std::size_t>(), d.at(1).get<double>());
    c.default_lr_drops = false;
  }
  return c;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;  // NaN without a test set
  double train_loss = 0.0;
  double mask_keep_frac = 1.0;  // mean over the epoch's steps
  double learning_rate = 0.0;
};

struct TrainResult {
  ParamVector params;
  std::vector<EpochMetrics> history;
  bool stopped_early = false;
};

inline std::string metrics_csv(std::span<const EpochMetrics> rows, const std::string& provenance = {}) {
  std::ostringstream out;
  if (!provenance.empty()) out << "# " << provenance << "\n";
  out << "epoch,train_acc,test_acc,train_loss,mask_keep_frac\n";
  for (const auto& r : rows)
    out << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.epoch, r.train_acc, r.test_acc, r.train_loss,
                       r.mask_keep_frac);
  return out.str();
}

namespace detail {

// Sub-batches for one step; `cursor` walks each shuffled order in turn.
struct BatchPlan {
  Batching mode;
  std::size_t per_env = 0;
  std::size_t steps_per_epoch = 0;
  std::vector<int> env_ids;
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> pooled;
};

inline BatchPlan make_plan(const EnvDataset& ds, const TrainConfig& cfg) {
  BatchPlan plan;
  plan.mode = cfg.effective_batching();
  plan.env_ids = ds.envs();
  plan.groups = ds.indices_by_env();
  const std::size_t d = plan.groups.size();
  if (plan.mode == Batching::pooled) {
    plan.pooled.resize(ds.size());
    std::iota(plan.pooled.begin(), plan.pooled.end(), std::size_t{0});
    plan.per_env = std::min(cfg.batch_size, ds.size());
    plan.steps_per_epoch = std::max<std::size_t>(1, ds.size() / plan.per_env);
    return plan;
  }
  plan.per_env = plan.mode == Batching::split ? cfg.batch_size / d : cfg.batch_size;
  require(plan.per_env >= 1, fmt::format("train: batch_size {} leaves no example for each of {} environments",
                                         cfg.batch_size, d));
  std::size_t smallest = ds.size();
  for (const auto& g : plan.groups) smallest = std::min(smallest, g.size());
  plan.per_env = std::min(plan.per_env, smallest);
  plan.steps_per_epoch = std::max<std::size_t>(1, smallest / plan.per_env);
  return plan;
}

inline void shuffle_plan(BatchPlan& plan, std::mt19937_64& rng) {
  if (plan.mode == Batching::pooled) std::shuffle(plan.pooled.begin(), plan.pooled.end(), rng);
  else
    for (auto& g : plan.groups) std::shuffle(g.begin(), g.end(), rng);
}

inline std::vector<EnvBatch> step_batches(const EnvDataset& ds, const BatchPlan& plan, std::size_t step) {
  std::vector<EnvBatch> out;
  const std::size_t at = step * plan.per_env;
  if (plan.mode == Batching::pooled) {
    std::span<const std::size_t> idx(plan.pooled.data() + at, plan.per_env);
    out.push_back(ds.batch(0, idx));
    return out;
  }
  for (std::size_t e = 0; e < plan.groups.size(); ++e)
    out.push_back(ds.batch(plan.env_ids[e], std::span<const std::size_t>(plan.groups[e].data() + at, plan.per_env)));
  return out;
}

inline double full_accuracy(const ParamVector& p, const EnvDataset& ds) {
  return accuracy(p, ds.features, ds.labels);
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochMetrics&, const ParamVector&)>;

/// Trains `init` on the environments of `train_set`, evaluating on `test_set`
/// when given. One rng seeded from cfg.seed drives batch order and dropout.
inline TrainResult train(ParamVector init, const EnvDataset& train_set, const EnvDataset* test_set,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  require(train_set.size() > 0, "train: empty training set");
  require_dims(init.arch.input_dim == train_set.num_features(), "train: model input width differs from dataset");
  std::mt19937_64 rng(cfg.seed);
  auto plan = detail::make_plan(train_set, cfg);

  const LossConfig step_loss = cfg.penalty_mode == PenaltyMode::in_loss ? cfg.loss : cfg.loss.data_only();
  const LossConfig after_loss{cfg.penalty_mode == PenaltyMode::after_mask ? cfg.loss.l1_coeff : 0.0,
                              cfg.penalty_mode == PenaltyMode::after_mask ? cfg.loss.l2_coeff : 0.0, 0.0};
  const double decay = cfg.penalty_mode == PenaltyMode::decoupled ? cfg.loss.l2_coeff : 0.0;

  TrainResult res;
  res.params = std::move(init);
  Vector& theta = res.params.values;
  const auto n = theta.size();
  AdamState adam = AdamState::zeros(static_cast<std::size_t>(n), cfg.learning_rate);
  MomentumState mom{Vector::Zero(n), cfg.momentum};
  GradOptions gopt{cfg.workers, cfg.loss.dropout_rate > 0.0 ? &rng : nullptr};

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    adam.alpha = lr;
    detail::shuffle_plan(plan, rng);
    double keep_sum = 0.0;
    for (std::size_t step = 0; step < plan.steps_per_epoch; ++step) {
      const auto batches = detail::step_batches(train_set, plan, step);
      const GradientBatch gb = env_gradients(res.params, batches, step_loss, gopt);
      Vector g;
      double keep = 1.0;
      switch (cfg.mask_rule) {
        case MaskRule::none: g = gb.mean(); break;
        case MaskRule::and_mask:
        case MaskRule::xor_mask: {
          const Mask m = cfg.mask_rule == MaskRule::and_mask ? and_mask(gb, cfg.tau) : xor_mask(gb, cfg.tau);
          g = apply_mask(gb.mean(), m, res.params.layout, cfg.rescale).values;
          keep = m.keep_fraction();
          break;
        }
        case MaskRule::geometric: {
          g = geometric_mean_grad(gb).values;
          keep = static_cast<double>((g.array() != 0.0).count()) / static_cast<double>(n);
          break;
        }
      }
      keep_sum += keep;
      if (after_loss.has_penalty()) g += penalty_gradient(res.params, after_loss);
      if (!g.allFinite()) throw NonFiniteError(fmt::format("train: non-finite gradient at epoch {}", epoch));
      switch (cfg.optimizer) {
        case OptimizerKind::gd: momentum_step(mom, theta, g, lr); break;
        case OptimizerKind::adam: adam_step(adam, theta, g); break;
        case OptimizerKind::temporal_adam: temporal_and_adam_step(adam, theta, g); break;
      }
      decoupled_weight_decay(theta, lr, decay);
    }
    if (!theta.allFinite()) throw NonFiniteError(fmt::format("train: parameters diverged at epoch {}", epoch));

    EpochMetrics m;
    m.epoch = epoch;
    m.learning_rate = lr;
    m.mask_keep_frac = keep_sum / static_cast<double>(plan.steps_per_epoch);
    m.train_acc = detail::full_accuracy(res.params, train_set);
    m.train_loss = data_loss(res.params, train_set.features, train_set.labels);
    m.test_acc = test_set ? detail::full_accuracy(res.params, *test_set) : std::numeric_limits<double>::quiet_NaN();
    res.history.push_back(m);
    if (on_epoch) on_epoch(m, res.params);
    if (cfg.early_stop && test_set && m.train_acc > 0.97 && m.test_acc < 0.6) {
      res.stopped_early = true;
      break;
    }
  }
  return res;
}

// ---- named presets ----------------------------------------------------------

struct Recipe {
  std::string name;
  Architecture arch;
  TrainConfig train;
};

/// Fixed configurations for the synthetic task. "and_mask" is the tuned
/// AND-mask setting; the baselines share its network, optimizer and batch
/// size and differ only in the regularizer.
inline Recipe preset(const std::string& name, std::size_t input_dim, std::size_t num_envs) {
  Recipe r;
  r.name = name;
  r.arch = Architecture{input_dim, 3, 256};
  TrainConfig& t = r.train;
  t.optimizer = OptimizerKind::adam;
  t.learning_rate = 1e-2;
  t.batch_size = 128;
  t.epochs = std::max<std::size_t>(1, 3000 / num_envs);
  if (name == "and_mask") {
    t.mask_rule = MaskRule::and_mask;
    t.tau = 1.0;
    t.rescale = true;
    t.loss.l2_coeff = 1e-4;
  } else if (name == "baseline") {
    t.loss.l2_coeff = 1e-4;
  } else if (name == "plain") {
  } else if (name == "l1") {
    t.loss.l1_coeff = 1e-4;
  } else if (name == "l2") {
    t.loss.l2_coeff = 1e-3;
  } else if (name == "dropout") {
    t.loss.dropout_rate = 0.5;
  } else {
    throw std::invalid_argument(fmt::format("unknown preset '{}'", name));
  }
  return r;
}

inline std::vector<std::string> preset_names() { return {"and_mask", "baseline", "plain", "l1", "l2", "dropout"}; }

}  // namespace ilc

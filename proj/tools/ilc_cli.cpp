// Command-line front end: one subcommand per experiment kind plus gen-data.

#include "ilc/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using nlohmann::json;

struct Common {
  std::string out;
  std::uint64_t seed = 0;
  bool paper_scale = false;
  std::size_t workers = 1;
};

void add_common(CLI::App* sub, Common& c, bool stochastic) {
  sub->add_option("-o,--out", c.out, "output directory")->required();
  auto* s = sub->add_option("--seed", c.seed, "random seed");
  if (stochastic) s->required();
  sub->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
}

// Copies an option into params only when the user gave it, so library
// defaults stay the single source of truth.
template <typename T>
void put(json& params, CLI::App* sub, const std::string& flag, const std::string& key, const T& value) {
  if (sub->count(flag) > 0) params[key] = value;
}

int run(ilc::ExperimentKind kind, const json& params, const Common& c, CLI::App* sub) {
  ilc::ExperimentSpec spec;
  spec.kind = kind;
  spec.params = params;
  spec.output_path = c.out;
  if (sub->count("--seed") > 0) spec.seed = c.seed;
  spec.paper_scale = c.paper_scale;
  spec.workers = c.workers;
  std::string err;
  const int rc = ilc::run_experiment(spec, &err);
  if (rc != 0) std::cerr << "error: " << err << "\n";
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-agreement learning experiments"};
  app.set_config("--config", "", "TOML config; command-line flags take precedence");
  app.require_subcommand(1);
  Common c;
  json params = json::object();
  int rc = 0;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic train/test split as CSV");
  ilc::SyntheticConfig sc;
  add_common(gen, c, true);
  gen->add_option("--envs", sc.num_envs, "training environments");
  gen->add_option("--per-env", sc.per_env, "examples per environment");
  gen->add_option("--d-s", sc.d_s, "shortcut dimensions");
  gen->add_option("--revolutions", sc.spiral_revolutions);
  gen->add_option("--shortcut-sigma", sc.shortcut_sigma);
  gen->add_option("--test-size", sc.test_size);
  gen->add_flag("--paper-scale", c.paper_scale, "1280 examples per environment");
  gen->callback([&] {
    sc.seed = c.seed;
    if (c.paper_scale) sc.per_env = 1280;
    else if (gen->count("--per-env") == 0) sc.per_env = 256;
    try {
      sc.validate();
      const auto [tr, te] = ilc::gen_synthetic(sc);
      const std::filesystem::path dir = c.out;
      std::filesystem::create_directories(dir);
      ilc::detail::write_atomic(dir / "train.csv", ilc::dataset_to_csv(tr));
      ilc::detail::write_atomic(dir / "test.csv", ilc::dataset_to_csv(te));
      ilc::detail::write_atomic(dir / "metadata.json", ilc::dataset_metadata(sc, tr).dump(2) + "\n");
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      rc = 1;
    }
  });

  // train
  auto* tr = app.add_subcommand("train", "train one model on a dataset CSV");
  std::string dataset, test_dataset, preset = "and_mask", optimizer, mask_rule, batching, penalty_mode;
  double tau = 0, lr = 0, l1 = 0, l2 = 0, dropout = 0;
  std::size_t batch = 0, epochs = 0, layers = 0, units = 0;
  bool rescale = false, early_stop = false;
  add_common(tr, c, true);
  tr->add_option("--dataset", dataset, "training CSV")->required();
  tr->add_option("--test-dataset", test_dataset, "o.o.d. test CSV");
  tr->add_option("--preset", preset)->check(CLI::IsMember(ilc::preset_names()));
  tr->add_option("--optimizer", optimizer)->check(CLI::IsMember({"gd", "adam", "temporal_adam"}));
  tr->add_option("--mask", mask_rule)->check(CLI::IsMember({"none", "and", "xor", "geometric"}));
  tr->add_option("--batching", batching)->check(CLI::IsMember({"auto", "split", "per_env", "pooled"}));
  tr->add_option("--penalty-mode", penalty_mode)->check(CLI::IsMember({"after_mask", "in_loss", "decoupled"}));
  tr->add_option("--tau", tau);
  tr->add_option("--lr", lr);
  tr->add_option("--l1", l1);
  tr->add_option("--l2", l2);
  tr->add_option("--dropout", dropout);
  tr->add_option("--batch-size", batch);
  tr->add_option("--epochs", epochs);
  tr->add_option("--hidden-layers", layers);
  tr->add_option("--hidden-units", units);
  tr->add_flag("--rescale", rescale);
  tr->add_flag("--early-stop", early_stop);
  tr->callback([&] {
    params["dataset"] = dataset;
    put(params, tr, "--test-dataset", "test_dataset", test_dataset);
    put(params, tr, "--preset", "preset", preset);
    put(params, tr, "--hidden-layers", "hidden_layers", layers);
    put(params, tr, "--hidden-units", "hidden_units", units);
    json t = json::object();
    put(t, tr, "--optimizer", "optimizer", optimizer);
    put(t, tr, "--mask", "mask_rule", mask_rule);
    put(t, tr, "--batching", "batching", batching);
    put(t, tr, "--penalty-mode", "penalty_mode", penalty_mode);
    put(t, tr, "--tau", "tau", tau);
    put(t, tr, "--lr", "learning_rate", lr);
    put(t, tr, "--l1", "l1", l1);
    put(t, tr, "--l2", "l2", l2);
    put(t, tr, "--dropout", "dropout", dropout);
    put(t, tr, "--batch-size", "batch_size", batch);
    put(t, tr, "--epochs", "epochs", epochs);
    put(t, tr, "--rescale", "rescale", rescale);
    put(t, tr, "--early-stop", "early_stop", early_stop);
    if (!t.empty()) params["train"] = t;
    rc = run(ilc::ExperimentKind::train, params, c, tr);
  });

  // suppress
  auto* sup = app.add_subcommand("suppress", "masked vs. unmasked gradient norms on random gradients");
  std::size_t n = 0, trials = 0;
  std::vector<std::size_t> d_list;
  double t_fraction = 0;
  add_common(sup, c, true);
  sup->add_option("--n", n, "gradient components");
  sup->add_option("--d", d_list, "environment counts");
  sup->add_option("--t-fraction", t_fraction, "t = ceil(fraction * d)");
  sup->add_option("--trials", trials);
  sup->callback([&] {
    put(params, sup, "--n", "n", n);
    put(params, sup, "--d", "d_list", d_list);
    put(params, sup, "--t-fraction", "t_fraction", t_fraction);
    put(params, sup, "--trials", "trials", trials);
    rc = run(ilc::ExperimentKind::suppress, params, c, sup);
  });

  // correlate
  auto* cor = app.add_subcommand("correlate", "correlation of masked gradients with mechanism/shortcut gradients");
  std::vector<double> taus;
  std::size_t seeds = 0, envs = 0;
  add_common(cor, c, true);
  cor->add_option("--tau", taus, "tau grid");
  cor->add_option("--seeds", seeds);
  cor->add_option("--envs", envs);
  cor->add_option("--batch-size", batch);
  cor->callback([&] {
    put(params, cor, "--tau", "tau_grid", taus);
    put(params, cor, "--seeds", "seeds", seeds);
    put(params, cor, "--envs", "num_envs", envs);
    put(params, cor, "--batch-size", "batch_size", batch);
    rc = run(ilc::ExperimentKind::correlate, params, c, cor);
  });

  // consistency
  auto* con = app.add_subcommand("consistency", "random-walk inconsistency score");
  std::string model;
  std::vector<double> lam_a, lam_b;
  double eps = 0;
  std::size_t steps = 0, restarts = 0;
  add_common(con, c, true);
  con->add_option("--model", model, "model JSON");
  con->add_option("--dataset", dataset, "dataset CSV whose environments are compared");
  con->add_option("--lam-a", lam_a, "diagonal Hessian of environment A");
  con->add_option("--lam-b", lam_b, "diagonal Hessian of environment B");
  con->add_option("--epsilon", eps);
  con->add_option("--steps", steps);
  con->add_option("--restarts", restarts);
  con->callback([&] {
    put(params, con, "--model", "model", model);
    put(params, con, "--dataset", "dataset", dataset);
    put(params, con, "--lam-a", "lam_a", lam_a);
    put(params, con, "--lam-b", "lam_b", lam_b);
    put(params, con, "--epsilon", "epsilon", eps);
    put(params, con, "--steps", "num_steps", steps);
    put(params, con, "--restarts", "num_restarts", restarts);
    rc = run(ilc::ExperimentKind::consistency, params, c, con);
  });

  // env-sweep
  auto* sw = app.add_subcommand("env-sweep", "test accuracy against the number of environments");
  std::vector<std::string> recipes;
  add_common(sw, c, true);
  sw->add_option("--d", d_list, "environment counts, ascending");
  sw->add_option("--recipes", recipes)->check(CLI::IsMember(ilc::preset_names()));
  sw->add_option("--seeds", seeds);
  sw->add_flag("--paper-scale", c.paper_scale, "full data size and epoch budget");
  sw->callback([&] {
    put(params, sw, "--d", "d_list", d_list);
    put(params, sw, "--recipes", "recipes", recipes);
    put(params, sw, "--seeds", "seeds", seeds);
    rc = run(ilc::ExperimentKind::env_sweep, params, c, sw);
  });

  // label-noise
  auto* ln = app.add_subcommand("label-noise", "training with a fraction of resampled labels");
  double fraction = 0;
  add_common(ln, c, true);
  ln->add_option("--fraction", fraction);
  ln->add_option("--recipes", recipes)->check(CLI::IsMember(ilc::preset_names()));
  ln->add_option("--seeds", seeds);
  ln->add_flag("--paper-scale", c.paper_scale, "full data size and epoch budget");
  ln->callback([&] {
    put(params, ln, "--fraction", "fraction", fraction);
    put(params, ln, "--recipes", "recipes", recipes);
    put(params, ln, "--seeds", "seeds", seeds);
    rc = run(ilc::ExperimentKind::label_noise, params, c, ln);
  });

  // patchwork
  auto* pw = app.add_subcommand("patchwork", "two-sigmoid patchwork example");
  std::size_t grid = 0;
  add_common(pw, c, false);
  pw->add_option("--grid", grid);
  pw->add_option("--epsilon", eps);
  pw->add_option("--steps", steps);
  pw->callback([&] {
    put(params, pw, "--grid", "grid", grid);
    put(params, pw, "--epsilon", "epsilon", eps);
    put(params, pw, "--steps", "num_steps", steps);
    rc = run(ilc::ExperimentKind::patchwork, params, c, pw);
  });

  CLI11_PARSE(app, argc, argv);
  return rc;
}

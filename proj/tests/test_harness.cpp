#include "ilc/harness.hpp"

#include <gtest/gtest.h>

using namespace ilc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ilc_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

}  // namespace

TEST(Suppression, UnmaskedNormMatchesTheory) {
  const std::vector<std::size_t> ds{4, 16, 64};
  const auto rows = run_suppression(500, ds, 0.8, 100, 1);
  for (const auto& r : rows) {
    EXPECT_NEAR(r.mean_sq_unmasked / r.theory_unmasked, 1.0, 0.1) << "d=" << r.d;
    EXPECT_LE(r.mean_sq_masked, r.mean_sq_unmasked);
    EXPECT_NEAR(r.keep_rate, r.keep_rate_theory, 0.02);
  }
  EXPECT_EQ(rows[0].t, 4u);  // ceil(3.2)
  EXPECT_EQ(rows[2].t, 52u);
}

TEST(Suppression, UpperBoundHoldsAndDecays) {
  const std::vector<std::size_t> ds{8, 16, 32};
  const auto rows = run_suppression(300, ds, 0.75, 200, 2);
  for (const auto& r : rows) EXPECT_LE(r.mean_sq_masked, r.upper_bound_masked * 1.1 + 1e-12);
  EXPECT_GT(rows[0].upper_bound_masked, rows[2].upper_bound_masked);
  EXPECT_DOUBLE_EQ(suppression_upper_bound(10, 4, 4), 0.0);
  // t = d/2 gives C(d, d/2) (d/2) 2^{1-d} n, decaying like sqrt(d).
  EXPECT_NEAR(suppression_upper_bound(1, 2, 1), 1.0, 1e-12);
}

TEST(Suppression, DeterministicAcrossWorkers) {
  const std::vector<std::size_t> ds{2, 4, 8};
  const auto a = run_suppression(100, ds, 0.8, 20, 5, 1), b = run_suppression(100, ds, 0.8, 20, 5, 3);
  EXPECT_EQ(suppression_csv(a, {}), suppression_csv(b, {}));
}

TEST(Correlation, RowsAreWellFormed) {
  CorrelationConfig c;
  c.num_envs = 4;
  c.batch_size = 64;
  c.hidden_layers = 1;
  c.hidden_units = 16;
  c.data.d_s = 4;
  const std::vector<double> taus{0.0, 0.5, 1.0};
  const auto res = run_correlation(c, taus, 2, 3);
  ASSERT_EQ(res.rows.size(), 12u);
  for (const auto& r : res.rows) {
    EXPECT_GE(r.surviving_fraction, 0.0);
    EXPECT_LE(r.surviving_fraction, 1.0);
    if (!std::isnan(r.rho_mechanism)) {
      EXPECT_LE(std::abs(r.rho_mechanism), 1.0 + 1e-12);
    }
  }
  EXPECT_EQ(res.rows[0].surviving_fraction, 1.0);  // AND at tau 0 keeps every nonzero component
  EXPECT_EQ(correlation_csv(res, {}), correlation_csv(run_correlation(c, taus, 2, 3, 2), {}));
}

TEST(Correlation, PearsonOnSupport) {
  const Vector s = (Vector(5) << 1, 1, 0, 1, 1).finished();
  const Vector x = (Vector(5) << 1, 2, 100, 3, 4).finished();
  const Vector y = (Vector(5) << 2, 4, -100, 6, 8).finished();
  EXPECT_NEAR(pearson_on_support(s, x, y), 1.0, 1e-12);
  EXPECT_NEAR(pearson_on_support(s, x, -y), -1.0, 1e-12);
  EXPECT_TRUE(std::isnan(pearson_on_support(Vector::Zero(5), x, y)));
}

TEST(LabelNoise, ZeroFractionMatchesPlainTraining) {
  SyntheticConfig base;
  base.num_envs = 4;
  base.d_s = 4;
  base.test_size = 100;
  SweepScale scale;
  scale.desk_per_env = 32;
  scale.desk_max_epochs = 3;
  const std::vector<std::string> recipes{"baseline"};
  const auto rows = run_label_noise(0.0, recipes, 1, 7, base, scale);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(std::isnan(rows[0].mislabeled_assigned_acc));
  // Same data, same seeds as a direct run.
  SyntheticConfig sc = scaled_data(base, 4, scale);
  sc.seed = 7;
  const auto [tr, te] = gen_synthetic(sc);
  const auto direct = run_recipe(scaled_preset("baseline", tr.num_features(), 4, scale), tr, te, 7);
  EXPECT_EQ(rows.back().test_acc, direct.final_test_acc);
  EXPECT_EQ(rows.back().clean_acc, direct.final_train_acc);
}

TEST(EnvSweep, ShapeAndValidation) {
  SyntheticConfig base;
  base.d_s = 4;
  base.test_size = 50;
  SweepScale scale;
  scale.desk_per_env = 16;
  scale.desk_max_epochs = 2;
  const std::vector<std::size_t> ds{2, 4};
  const std::vector<std::string> recipes{"baseline", "and_mask"};
  const auto rows = run_env_sweep(ds, recipes, 2, 1, base, scale);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[0].num_envs, 2u);
  EXPECT_EQ(rows[7].recipe, "and_mask");
  const std::vector<std::size_t> bad{4, 2};
  EXPECT_THROW(run_env_sweep(bad, recipes, 1, 1, base, scale), std::invalid_argument);
}

TEST(Experiment, PatchworkReportAndConfigEcho) {
  const auto dir = fresh_dir("patchwork");
  ExperimentSpec s;
  s.kind = ExperimentKind::patchwork;
  s.output_path = dir;
  ASSERT_EQ(run_experiment(s), 0);
  const auto report = nlohmann::json::parse(slurp(dir / "patchwork.json"));
  EXPECT_TRUE(report.contains("delta_a"));
  EXPECT_TRUE(report.contains("delta_b"));
  const auto cfg = nlohmann::json::parse(slurp(dir / "config.json"));
  EXPECT_EQ(cfg["kind"], "patchwork");
  EXPECT_FALSE(fs::exists(dir / "patchwork.json.tmp"));
}

TEST(Experiment, MissingDatasetHasNoSideEffects) {
  const auto dir = fresh_dir("missing");
  ExperimentSpec s;
  s.kind = ExperimentKind::train;
  s.params = {{"dataset", (dir / "nope.csv").string()}};
  s.seed = 1;
  s.output_path = dir;
  std::string err;
  EXPECT_NE(run_experiment(s, &err), 0);
  EXPECT_NE(err.find("does not exist"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(Experiment, StochasticKindsNeedSeedAndKnownKeys) {
  const auto dir = fresh_dir("seedless");
  ExperimentSpec s;
  s.kind = ExperimentKind::suppress;
  s.output_path = dir;
  std::string err;
  EXPECT_NE(run_experiment(s, &err), 0);
  EXPECT_NE(err.find("--seed"), std::string::npos);
  s.seed = 1;
  s.params = {{"bogus", 1}};
  EXPECT_NE(run_experiment(s, &err), 0);
  EXPECT_NE(err.find("bogus"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(Experiment, RerunsAreByteIdenticalWithProvenance) {
  ExperimentSpec s;
  s.kind = ExperimentKind::suppress;
  s.seed = 3;
  s.params = {{"n", 50}, {"d_list", {2, 4}}, {"trials", 10}};
  s.output_path = fresh_dir("rerun_a");
  ASSERT_EQ(run_experiment(s), 0);
  const auto a = slurp(s.output_path / "suppression.csv");
  s.output_path = fresh_dir("rerun_b");
  s.workers = 2;
  ASSERT_EQ(run_experiment(s), 0);
  EXPECT_EQ(a, slurp(s.output_path / "suppression.csv"));
  EXPECT_EQ(a.rfind("# config_hash=", 0), 0u);
  EXPECT_NE(a.find("\nd,t,mean_sq_unmasked"), std::string::npos);
}

TEST(Experiment, TrainFromCsv) {
  const auto dir = fresh_dir("train");
  fs::create_directories(dir);
  SyntheticConfig sc;
  sc.num_envs = 2;
  sc.per_env = 16;
  sc.d_s = 3;
  sc.test_size = 20;
  const auto [tr, te] = gen_synthetic(sc);
  detail::write_atomic(dir / "train.csv", dataset_to_csv(tr));
  detail::write_atomic(dir / "test.csv", dataset_to_csv(te));
  ExperimentSpec s;
  s.kind = ExperimentKind::train;
  s.seed = 2;
  s.params = {{"dataset", (dir / "train.csv").string()},
              {"test_dataset", (dir / "test.csv").string()},
              {"hidden_units", 8},
              {"train", {{"epochs", 3}, {"batch_size", 8}}}};
  s.output_path = dir / "out";
  ASSERT_EQ(run_experiment(s), 0);
  const auto csv = slurp(dir / "out" / "metrics.csv");
  EXPECT_NE(csv.find("epoch,train_acc,test_acc,train_loss,mask_keep_frac\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  const auto model = load_model((dir / "out" / "model.json").string());
  EXPECT_EQ(model.arch.hidden_units, 8u);
}

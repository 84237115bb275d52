#include <gtest/gtest.h>

#include "dice/experiment.hpp"

namespace {

// Small enough for sweeps inside unit tests.
const char* kSmall = R"(
schema_version = 1
seed = 3
[model]
num_layers = 3
num_experts = 4
hidden_dim = 8
expert_dim = 8
num_tokens = 8
batch = 1
num_steps = 6
[cluster]
num_devices = 2
[policy]
warmup = 1
period = 3
)";

std::string error_of(const std::string& toml, const std::vector<std::string>& overrides = {}) {
  try {
    dice::parse_experiment(toml, overrides, "cfg.toml");
  } catch (const dice::ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(ParseExperiment, Defaults) {
  const auto cfg = dice::parse_experiment("");
  EXPECT_EQ(cfg.model, dice::ModelConfig::xl_toy());
  EXPECT_EQ(cfg.cluster, dice::ClusterConfig{});
  EXPECT_EQ(cfg.strategy, dice::Strategy::Interweaved);
  EXPECT_EQ(cfg.policy.warmup, 6);
  EXPECT_EQ(cfg.policy.period, 10);
  EXPECT_EQ(cfg.policy.cond, dice::CondStrategy::Off);
  EXPECT_EQ(cfg.seed, 1u);
  EXPECT_EQ(cfg.format, dice::ReportFormat::Csv);
}

TEST(ParseExperiment, FullSchema) {
  const auto cfg = dice::parse_experiment(R"(
schema_version = 1
seed = 42
[model]
preset = "G-toy"
num_steps = 20
[cluster]
num_devices = 8
alpha = 1e-5
beta = 2e-9
bytes_per_element = 4
compute_rate = 5e8
compute_overhead = 1e-6
[run]
strategy = "displaced"
[policy]
layers = [1, 5]
conditional = "random"
cond_seed = 9
refresh_interval = 3
warmup = 2
period = "inf"
strict = true
[output]
dir = "results"
format = "json"
timeline = true
[sweep]
batch = [4, 8]
)");
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_EQ(cfg.model.num_layers, 40);
  EXPECT_EQ(cfg.model.num_experts, 16);
  EXPECT_EQ(cfg.model.num_steps, 20);
  EXPECT_EQ(cfg.cluster.num_devices, 8);
  EXPECT_EQ(cfg.cluster.bytes_per_element, 4);
  EXPECT_DOUBLE_EQ(cfg.cluster.compute_overhead, 1e-6);
  EXPECT_EQ(cfg.strategy, dice::Strategy::Displaced);
  EXPECT_EQ(cfg.policy.sync, dice::SyncStrategy::Explicit);
  EXPECT_EQ(cfg.policy.explicit_layers, (std::vector<int>{1, 5}));
  EXPECT_EQ(cfg.policy.cond, dice::CondStrategy::Random);
  EXPECT_EQ(cfg.policy.cond_seed, 9u);
  EXPECT_FALSE(cfg.policy.period.has_value());
  EXPECT_TRUE(cfg.policy.strict);
  EXPECT_EQ(cfg.out_dir, "results");
  EXPECT_EQ(cfg.format, dice::ReportFormat::Json);
  EXPECT_TRUE(cfg.timeline);
  EXPECT_EQ(cfg.sweep.batch, (std::vector<int>{4, 8}));
}

TEST(ParseExperiment, ErrorsNameLineAndField) {
  auto e = error_of("seed = 1\n[model]\nnum_layers = \"many\"\n");
  EXPECT_NE(e.find("cfg.toml:3"), std::string::npos) << e;
  EXPECT_NE(e.find("model.num_layers"), std::string::npos) << e;

  e = error_of("[policy]\nwarmpu = 3\n");
  EXPECT_NE(e.find("cfg.toml:2"), std::string::npos) << e;
  EXPECT_NE(e.find("policy.warmpu"), std::string::npos) << e;
  EXPECT_NE(e.find("unknown key"), std::string::npos) << e;

  e = error_of("[run]\nstrategy = \"fast\"\n");
  EXPECT_NE(e.find("run.strategy"), std::string::npos) << e;

  e = error_of("[model\n");
  EXPECT_NE(e.find("cfg.toml:1"), std::string::npos) << e;

  EXPECT_NE(error_of("schema_version = 2\n").find("schema_version"), std::string::npos);
  EXPECT_NE(error_of("[cluster]\nnum_devices = 3\n").find("cluster.num_devices"), std::string::npos);
  EXPECT_NE(error_of("[policy]\nrefresh_interval = 0\n").find("policy.refresh_interval"), std::string::npos);
  EXPECT_NE(error_of("[sweep]\nbatch = [4, 0]\n").find("sweep.batch"), std::string::npos);
  EXPECT_NE(error_of("[model]\nnum_tokens = 3\n[sweep]\nbatch = [4, 1]\n").find("cluster.num_devices"), std::string::npos);
}

TEST(ParseExperiment, Overrides) {
  const auto cfg = dice::parse_experiment(
      kSmall, {"model.step_size=0.05", "run.strategy=displaced", "policy.period=inf", "sweep.batch=[2, 4]", "seed=8"});
  EXPECT_DOUBLE_EQ(cfg.model.step_size, 0.05);
  EXPECT_EQ(cfg.strategy, dice::Strategy::Displaced);
  EXPECT_FALSE(cfg.policy.period.has_value());
  EXPECT_EQ(cfg.sweep.batch, (std::vector<int>{2, 4}));
  EXPECT_EQ(cfg.seed, 8u);
  EXPECT_NE(error_of(kSmall, {"model.num_layers"}).find("KEY=VALUE"), std::string::npos);
  EXPECT_NE(error_of(kSmall, {"model.bogus=1"}).find("model.bogus"), std::string::npos);
  EXPECT_NE(error_of(kSmall, {"seed.x=1"}).find("not a table"), std::string::npos);
}

TEST(ParseExperiment, SeedFallback) {
  EXPECT_EQ(dice::parse_experiment("", {}, "x", 77).seed, 77u);
  EXPECT_EQ(dice::parse_experiment("seed = 5", {}, "x", 77).seed, 5u);
  EXPECT_THROW(dice::load_experiment("/nonexistent/cfg.toml"), dice::ConfigError);
}

TEST(ExpandSweep, CrossProductOrder) {
  auto cfg = dice::parse_experiment(kSmall);
  EXPECT_EQ(dice::expand_sweep(cfg).size(), 1u);
  cfg.sweep.batch = {2, 4};
  cfg.sweep.refresh_interval = {1, 2, 5};
  const auto points = dice::expand_sweep(cfg);
  ASSERT_EQ(points.size(), 6u);
  EXPECT_EQ(points[0].label, "batch=2;refresh_interval=1");
  EXPECT_EQ(points[1].label, "batch=2;refresh_interval=2");
  EXPECT_EQ(points[3].label, "batch=4;refresh_interval=1");
  EXPECT_EQ(points[5].config.model.batch, 4);
  EXPECT_EQ(points[5].config.policy.refresh_interval, 5);
  EXPECT_TRUE(points[5].config.sweep.empty());
}

TEST(RunCompare, FourRowsSameModel) {
  const auto cfg = dice::parse_experiment(kSmall);
  const auto rows = dice::run_compare(cfg);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].label, "synchronous");
  EXPECT_EQ(rows[3].label, "dice");
  EXPECT_EQ(rows[3].sync, "deep");
  EXPECT_EQ(rows[3].cond, "low_score");
  EXPECT_EQ(rows[3].refresh_interval, 5);
  for (const auto& r : rows) EXPECT_EQ(r.model_hash, rows[0].model_hash);
  EXPECT_EQ(rows[0].divergence, 0.0);
  // Sync steps 0, 1, 4 of 6; three layers each.
  EXPECT_EQ(rows[0].staleness_histogram, (std::map<int, std::uint64_t>{{0, 18}}));
  EXPECT_EQ(rows[1].staleness_histogram, (std::map<int, std::uint64_t>{{0, 9}, {1, 6}, {2, 3}}));
  EXPECT_EQ(rows[2].staleness_histogram, (std::map<int, std::uint64_t>{{0, 9}, {1, 9}}));
}

TEST(RunSweep, DeterministicAcrossJobs) {
  auto cfg = dice::parse_experiment(kSmall);
  cfg.sweep.strategy = {dice::Strategy::Displaced, dice::Strategy::Interweaved};
  cfg.sweep.batch = {1, 2, 4};
  const auto serial = dice::reports_to_csv(dice::run_sweep(cfg, 1));
  const auto parallel = dice::reports_to_csv(dice::run_sweep(cfg, 8));
  EXPECT_EQ(serial, parallel);
  EXPECT_EQ(std::count(serial.begin(), serial.end(), '\n'), 7);
}

TEST(RunSweep, PropagatesErrors) {
  auto cfg = dice::parse_experiment(kSmall);
  cfg.model.step_size = 1e308;
  cfg.model.num_steps = 30;
  EXPECT_THROW(dice::run_sweep(cfg, 2), dice::NumericalError);
}

TEST(Validation, GridShapeAndPass) {
  const auto grid = dice::validation_grid(60, 1);
  ASSERT_EQ(grid.size(), 60u);
  for (const auto& vc : grid) {
    EXPECT_LE(vc.model.num_layers, 4);
    EXPECT_LE(vc.model.num_experts, 8);
    EXPECT_LE(vc.model.rows(), 32u);
    EXPECT_LE(vc.model.num_steps, 16);
    EXPECT_NO_THROW(vc.model.validate());
  }
  EXPECT_EQ(dice::run_validation(0, 1).cases, 0);
  const auto ok = dice::run_validation(60, 1);
  EXPECT_EQ(ok.mismatches, 0) << ok.first_failure;
}

TEST(Validation, FaultHookReportsCoordinate) {
  dice::OracleOptions fault;
  fault.staleness_offset = 1;
  const auto bad = dice::run_validation(24, 1, fault);
  EXPECT_GT(bad.mismatches, 0);
  EXPECT_NE(bad.first_failure.find("first divergence at step="), std::string::npos) << bad.first_failure;
}

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dice/cluster.hpp"
#include "dice/metrics.hpp"
#include "dice/model.hpp"
#include "dice/oracle.hpp"
#include "dice/policies.hpp"
#include "dice/schedules.hpp"

namespace dice {

constexpr int kConfigSchemaVersion = 1;

/// Sweep axes, expanded as a cross product. Iteration order, outermost first:
/// strategy, batch, num_tokens, refresh_interval, warmup, period.
struct SweepAxes {
  std::vector<Strategy> strategy;
  std::vector<int> batch;
  std::vector<int> num_tokens;
  std::vector<int> refresh_interval;
  std::vector<int> warmup;
  std::vector<std::optional<int>> period;

  bool empty() const noexcept {
    return strategy.empty() && batch.empty() && num_tokens.empty() && refresh_interval.empty() && warmup.empty() &&
           period.empty();
  }
};

/// Warmup 6, period 10; every other policy knob neutral.
PolicyConfig default_policy();

struct ExperimentConfig {
  std::string preset = "XL-toy";
  ModelConfig model = ModelConfig::xl_toy();
  ClusterConfig cluster;
  Strategy strategy = Strategy::Interweaved;
  PolicyConfig policy = default_policy();
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  ReportFormat format = ReportFormat::Csv;
  bool timeline = false;
  SweepAxes sweep;
};

/// Parses TOML text plus `key=value` overrides (dotted keys, TOML values; bare
/// words are taken as strings). `seed_fallback` applies when no seed is given.
/// Throws ConfigError with the offending field (and line, when known).
ExperimentConfig parse_experiment(const std::string& toml_text, const std::vector<std::string>& overrides = {},
                                  const std::string& source = "<config>",
                                  std::optional<std::uint64_t> seed_fallback = std::nullopt);

/// Reads `path` (empty path = all defaults) and applies overrides.
ExperimentConfig load_experiment(const std::string& path, const std::vector<std::string>& overrides = {},
                                 std::optional<std::uint64_t> seed_fallback = std::nullopt);

struct SweepPoint {
  ExperimentConfig config;
  std::string label;
};

/// Cross product of the sweep axes; a config without axes yields one point.
std::vector<SweepPoint> expand_sweep(const ExperimentConfig& config);

struct PointResult {
  RunResult run;
  RunResult baseline;
  MetricsReport report;
};

/// Runs `config` and its synchronous baseline on identical (model, seed, x0).
PointResult run_point(const ExperimentConfig& config, const std::string& label = {});

/// Policies for the four compare rows: synchronous, displaced, interweaved and
/// the combined preset (interweaved + deep sync + low-score R=5).
PolicyConfig dice_preset_policy(const PolicyConfig& base);
std::vector<MetricsReport> run_compare(const ExperimentConfig& config);

/// Runs every sweep point on up to `jobs` threads; results in expansion order.
std::vector<MetricsReport> run_sweep(const ExperimentConfig& config, int jobs);

struct ValidationCase {
  ModelConfig model;
  Strategy strategy = Strategy::Synchronous;
  PolicyConfig policy;
  std::uint64_t seed = 0;
  std::string describe() const;
};

/// Deterministic grid of small oracle-sized configurations. The first 48 cases
/// enumerate strategy x sync x cond; the rest are drawn from `seed`.
std::vector<ValidationCase> validation_grid(int size, std::uint64_t seed);

struct ValidationSummary {
  int cases = 0;
  int mismatches = 0;
  std::string first_failure;
};

ValidationSummary run_validation(int size, std::uint64_t seed, OracleOptions oracle_options = {});

}  // namespace dice

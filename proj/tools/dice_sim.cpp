// dice_sim: run, compare, sweep and validate staleness schedules for
// expert-parallel MoE denoising.
//
// Exit codes: 0 success, 1 I/O or validation mismatch, 2 configuration error,
// 3 numerical divergence.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dice/experiment.hpp"
#include "dice/metrics.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string format;
  bool timeline = false;
  int jobs = 1;
};

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("DICE_SIM_SEED");
  if (!raw || !*raw) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (*end != '\0') throw dice::ConfigError(std::string("DICE_SIM_SEED: not an unsigned integer: ") + raw);
  return v;
}

dice::ExperimentConfig load(const CommonOptions& opt) {
  auto cfg = dice::load_experiment(opt.config, opt.overrides, env_seed());
  if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
  if (!opt.format.empty()) cfg.format = dice::parse_report_format(opt.format);
  if (opt.timeline) cfg.timeline = true;
  return cfg;
}

std::string report_path(const dice::ExperimentConfig& cfg, const std::string& stem) {
  fs::create_directories(cfg.out_dir);
  return (fs::path(cfg.out_dir) / (stem + (cfg.format == dice::ReportFormat::Csv ? ".csv" : ".json"))).string();
}

void print_summary(const std::vector<dice::MetricsReport>& reports) {
  std::printf("%-40s %12s %14s %10s %9s\n", "label", "divergence", "makespan_s", "speedup", "comm%");
  for (const auto& r : reports) {
    std::printf("%-40s %12.4e %14.6f %10.4f %8.2f%%\n", r.label.c_str(), r.divergence, r.makespan_seconds,
                r.speedup_vs_sync, 100.0 * r.comm_share);
  }
}

int cmd_run(const CommonOptions& opt) {
  const auto cfg = load(opt);
  auto result = dice::run_point(cfg, dice::to_string(cfg.strategy));
  if (cfg.timeline) {
    fs::create_directories(cfg.out_dir);
    const auto path = (fs::path(cfg.out_dir) / "timeline.json").string();
    dice::write_timeline_json(result.run.timeline, path);
    result.report.timeline_path = path;
  }
  std::vector<dice::MetricsReport> reports{result.report};
  dice::emit(reports, cfg.format, report_path(cfg, "report"));
  print_summary(reports);
  return kExitOk;
}

int cmd_compare(const CommonOptions& opt) {
  const auto cfg = load(opt);
  const auto reports = dice::run_compare(cfg);
  dice::emit(reports, cfg.format, report_path(cfg, "compare"));
  print_summary(reports);
  return kExitOk;
}

int cmd_sweep(const CommonOptions& opt) {
  const auto cfg = load(opt);
  const auto reports = dice::run_sweep(cfg, opt.jobs);
  dice::emit(reports, cfg.format, report_path(cfg, "sweep"));
  print_summary(reports);
  return kExitOk;
}

int cmd_validate(int grid, std::uint64_t seed, bool inject_fault) {
  dice::OracleOptions oracle;
  if (inject_fault) oracle.staleness_offset = 1;
  const auto summary = dice::run_validation(grid, seed, oracle);
  std::printf("validated %d configurations, %d mismatches\n", summary.cases, summary.mismatches);
  if (summary.mismatches > 0) {
    std::fprintf(stderr, "first mismatch: %s\n", summary.first_failure.c_str());
    return kExitFailure;
  }
  return kExitOk;
}

void add_common(CLI::App* sub, CommonOptions& opt, bool with_jobs) {
  sub->add_option("--config", opt.config, "Experiment config (TOML)");
  sub->add_option("--set", opt.overrides, "Override a config key, KEY=VALUE (repeatable)")->take_all();
  sub->add_option("--out", opt.out_dir, "Output directory");
  sub->add_option("--format", opt.format, "Report format")->check(CLI::IsMember({"csv", "json"}));
  sub->add_flag("--timeline", opt.timeline, "Export the simulated timeline as JSON");
  if (with_jobs) sub->add_option("--jobs", opt.jobs, "Concurrent sweep points")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Staleness-centric expert-parallel schedule simulator"};
  app.require_subcommand(1);

  CommonOptions opt;
  auto* run = app.add_subcommand("run", "Run one experiment against a synchronous baseline");
  auto* compare = app.add_subcommand("compare", "Synchronous vs displaced vs interweaved vs combined preset");
  auto* sweep = app.add_subcommand("sweep", "Expand sweep axes and merge the reports");
  auto* validate = app.add_subcommand("validate", "Check the simulator against the reference oracle");
  add_common(run, opt, false);
  add_common(compare, opt, false);
  add_common(sweep, opt, true);

  int grid = 256;
  std::uint64_t seed = 1;
  bool inject_fault = false;
  validate->add_option("--grid", grid, "Number of random configurations")->check(CLI::NonNegativeNumber);
  validate->add_option("--seed", seed, "Grid seed");
  validate->add_flag("--inject-staleness-fault", inject_fault, "Test hook: off-by-one staleness in the oracle");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(opt);
    if (*compare) return cmd_compare(opt);
    if (*sweep) return cmd_sweep(opt);
    if (*validate) return cmd_validate(grid, seed, inject_fault);
  } catch (const dice::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const dice::NumericalError& e) {
    std::cerr << "numerical divergence: " << e.what() << " (step " << e.step() << ", layer " << e.layer() << ")\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

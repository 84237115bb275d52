#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dice/schedules.hpp"

namespace dice {

struct MetricsReport {
  std::string label;
  std::string strategy;
  std::string sync;
  std::string cond;
  int refresh_interval = 1;
  int warmup = 0;
  int period = 0;  // 0 = no periodic sync
  int batch = 0;
  int num_tokens = 0;
  std::uint64_t seed = 0;
  std::string model_hash;  // hex fingerprint of the weights

  double divergence = 0.0;  // ||x - x*|| / ||x*||
  std::map<int, std::uint64_t> staleness_histogram;
  std::uint64_t total_comm_bytes = 0;
  std::uint64_t dispatch_bytes = 0;
  std::uint64_t peak_buffer_bytes = 0;
  double makespan_seconds = 0.0;
  double comm_stall_seconds = 0.0;  // device 0
  double comm_share = 0.0;          // comm_stall_seconds / makespan_seconds
  double speedup_vs_sync = 0.0;
  std::string timeline_path;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Relative L2 distance ||x - ref|| / ||ref||; 0 iff bit-equal, inf when ref is zero and x is not.
double relative_l2(const Matrix& x, const Matrix& ref);

/// Aggregates `run` against a synchronous `baseline` of the same model, seed and x0.
/// Throws ContractError when the two runs are not comparable.
MetricsReport build_report(const RunResult& run, const RunResult& baseline, std::uint64_t seed,
                           const std::string& label = {});

/// Column order of the CSV report; one row per run.
const std::vector<std::string>& csv_columns();

enum class ReportFormat { Csv, Json };
ReportFormat parse_report_format(const std::string& name);

std::string reports_to_csv(const std::vector<MetricsReport>& reports);
std::string reports_to_json(const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> reports_from_json(const std::string& text);

/// Writes the report set to `path`; IoError (naming the path) on failure.
void emit(const std::vector<MetricsReport>& reports, ReportFormat format, const std::string& path);

constexpr int kReportSchemaVersion = 1;

}  // namespace dice

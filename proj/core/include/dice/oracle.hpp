#pragma once

#include <optional>
#include <vector>

#include "dice/model.hpp"
#include "dice/policies.hpp"
#include "dice/schedules.hpp"

namespace dice {

/// Full step-indexed history of a sampling run.
struct OracleTrace {
  std::vector<std::vector<Matrix>> moe_inputs;        // [step][layer]
  std::vector<std::vector<RouteDecision>> routes;     // [step][layer]
  std::vector<std::vector<Matrix>> routed;            // [step][layer] consumed routed contribution
  std::vector<std::vector<int>> provenance;           // [step][layer] generation step consumed
  std::vector<StalenessRecord> staleness;
  Matrix final_sample;
};

struct OracleOptions {
  /// Test hook: extra steps of staleness applied to every asynchronous consumption.
  int staleness_offset = 0;
};

/// Size limits above which oracle_run refuses to work.
struct OracleLimits {
  static constexpr int max_layers = 8;
  static constexpr int max_experts = 16;
  static constexpr std::size_t max_rows = 64;
  static constexpr int max_steps = 64;
};

/// Recomputes the stale recurrence by indexing complete histories:
/// the routed output consumed at (s, l) is evaluated on history[g][l] with
/// g from the staleness law (sync: s, interweaved: s-1, displaced:
/// max(last sync of l, s-2)); conditional reuse is replayed per pair.
/// Throws ContractError for instances above OracleLimits.
OracleTrace oracle_run(const ToyModel& model, const ActivationBlock& x0, Strategy strategy, const PolicyConfig& policy,
                       OracleOptions options = {});

/// Largest provenance gap a configuration may produce.
int max_staleness(Strategy strategy) noexcept;

struct TraceCoordinate {
  int step = -1;   // -1: final sample
  int layer = -1;
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const TraceCoordinate&, const TraceCoordinate&) = default;
};

struct TraceDiff {
  double max_abs_diff = 0.0;
  std::optional<TraceCoordinate> first_divergence;
  bool identical() const noexcept { return !first_divergence.has_value(); }
};

/// Elementwise bit comparison of final samples and, when requested, of every
/// recorded MoE input. The first differing coordinate is reported in
/// (step, layer, row, col) order, MoE inputs before the final sample.
TraceDiff compare_traces(const OracleTrace& a, const OracleTrace& b, bool include_inputs = true);

/// Trace view of a simulator run (needs RunOptions::record_moe_inputs for inputs).
OracleTrace trace_from_run(const RunResult& run);

}  // namespace dice

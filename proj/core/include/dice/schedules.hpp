#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dice/cluster.hpp"
#include "dice/model.hpp"
#include "dice/policies.hpp"

namespace dice {

enum class Strategy { Synchronous, Displaced, Interweaved };

const char* to_string(Strategy s) noexcept;
Strategy parse_strategy(const std::string& name);

/// One consumption of routed-expert output.
struct StalenessRecord {
  int layer = 0;
  int used_step = 0;
  int generated_step = 0;
  int staleness() const noexcept { return used_step - generated_step; }

  friend bool operator==(const StalenessRecord&, const StalenessRecord&) = default;
};

/// Tokens on their way to the experts.
struct DispatchPayload {
  int generated_step = 0;
  Matrix tokens;
  RouteDecision route;
  PairPlan plan;
  AllToAllPlan traffic;
  std::optional<std::vector<CommHandle>> in_flight;  // empty once arrived
};

/// Expert results on their way back to the token home devices.
struct CombinePayload {
  int generated_step = 0;
  std::vector<Matrix> slot_outputs;
  RouteDecision scale_route;  // route of the activations that produced the outputs
  std::optional<std::vector<CommHandle>> in_flight;
};

/// Staleness buffers of one MoE layer. Displaced uses both slots,
/// Interweaved only the combine slot, Synchronous none.
struct LayerBuffers {
  std::optional<DispatchPayload> dispatch_slot;
  std::optional<CombinePayload> combine_slot;

  int occupied() const noexcept { return (dispatch_slot ? 1 : 0) + (combine_slot ? 1 : 0); }
};

struct RunOptions {
  bool record_timeline = true;
  bool record_moe_inputs = false;  // keeps per-step MoE inputs for step_similarity
};

struct RunResult {
  Strategy strategy = Strategy::Synchronous;
  PolicyConfig policy;
  ModelConfig model_config;
  ClusterConfig cluster;
  std::uint64_t model_fingerprint = 0;
  std::uint64_t x0_fingerprint = 0;

  ActivationBlock final_sample;
  SimTimeline timeline;
  std::vector<StalenessRecord> staleness;
  std::vector<int> step_is_sync;  // 1 when the whole step ran synchronously

  std::uint64_t total_comm_bytes = 0;
  std::uint64_t dispatch_bytes = 0;
  std::uint64_t dispatch_pairs = 0;  // active (token, slot) pairs sent in dispatches
  std::uint64_t comm_collectives = 0;
  int peak_slots = 0;               // max total occupied slots across layers
  std::vector<int> peak_layer_slots;
  std::uint64_t peak_buffer_bytes = 0;

  std::vector<std::vector<Matrix>> moe_inputs;          // [step][layer]
  std::vector<std::vector<std::vector<int>>> top1;      // [step][layer][token]
};

/// Executes the MoE stage of individual layers under a given schedule while
/// owning the run's buffers, token cache, timeline and counters.
class Pipeline {
 public:
  Pipeline(const ToyModel& model, Strategy strategy, const PolicyConfig& policy, const ClusterConfig& cluster,
           RunOptions options = {});

  /// Local block for `layer`, charged on every device.
  ActivationBlock local_stage(int layer, const ActivationBlock& x, int step);

  /// Blocking dispatch/combine with fresh scores. Refreshes the slots the
  /// strategy uses unless the layer is permanently synchronous.
  Matrix run_sync_layer(int layer, const Matrix& h, int step);

  /// Consumes the combine slot (2-step staleness in steady state). Falls back
  /// to run_sync_layer when a slot is empty.
  Matrix run_displaced_layer(int layer, const Matrix& h, int step);

  /// Consumes the combine slot produced one step earlier; this step's experts
  /// run on this step's tokens once the dispatch lands.
  Matrix run_interweaved_layer(int layer, const Matrix& h, int step);

  /// Runs the expert work an interweaved layer deferred. Called after the next
  /// dispatch launch (possibly in the following step) and at the end of a run.
  void flush(int step);

  /// Waits for every collective still in flight; a run ends with quiet links.
  void drain(int step);

  /// Full MoE stage of `layer` under the strategy and policy overrides.
  Matrix moe_stage(int layer, const Matrix& h, int step, bool sync_step);

  /// Output head and denoise update. Deferred expert work stays pending.
  ActivationBlock finish_step(const ActivationBlock& x, const Matrix& hidden, int step);

  bool layer_always_sync(int layer) const { return always_sync_[layer] != 0; }
  const LayerBuffers& buffers(int layer) const { return buffers_.at(layer); }
  const TokenCache& cache() const noexcept { return cache_; }
  const SimTimeline& timeline() const noexcept { return result_.timeline; }
  RunResult& result() noexcept { return result_; }
  RunResult take_result() { return std::move(result_); }

 private:
  struct Deferred {
    int layer;
    int step;
    DispatchPayload payload;
  };

  std::string label(int layer, int step, const char* what) const;
  void charge_all(double elements_per_device, int layer, int step, const char* what);
  RouteDecision route_stage(int layer, const Matrix& h, int step);
  DispatchPayload make_payload(int layer, int step, const Matrix& h, const RouteDecision& route, PairPlan plan);
  std::vector<CommHandle> launch(CommKind kind, const AllToAllPlan& traffic, int layer, int step);
  void wait_all(const std::vector<CommHandle>& handles, int layer, int step, const char* what);
  CombinePayload run_experts(DispatchPayload& payload, int step, bool launch_combine);
  Matrix consume(int layer, const Matrix& h, int step, CombinePayload& payload, const RouteDecision& route);
  void run_deferred(Deferred& d);
  void note_buffers();

  const ToyModel& model_;
  Strategy strategy_;
  PolicyConfig policy_;
  ClusterConfig cluster_;
  Placement placement_;
  TokenCache cache_;
  RunOptions options_;
  std::vector<std::uint8_t> always_sync_;
  std::vector<LayerBuffers> buffers_;
  std::optional<Deferred> deferred_;
  RunResult result_;
};

/// S denoising steps of the layer stack under `strategy` and `policy`.
/// Throws NumericalError when activations become non-finite.
RunResult run_sampling(const ToyModel& model, const ActivationBlock& x0, Strategy strategy,
                       const PolicyConfig& policy, const ClusterConfig& cluster, RunOptions options = {});

}  // namespace dice

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dice/model.hpp"

namespace dice {

enum class SyncStrategy { None, Deep, Shallow, Staggered, Explicit };
enum class CondStrategy { Off, LowScore, HighScore, Random };

const char* to_string(SyncStrategy s) noexcept;
const char* to_string(CondStrategy s) noexcept;
SyncStrategy parse_sync_strategy(const std::string& name);
CondStrategy parse_cond_strategy(const std::string& name);

struct PolicyConfig {
  SyncStrategy sync = SyncStrategy::None;
  std::vector<int> explicit_layers;  // only read for SyncStrategy::Explicit
  int refresh_interval = 1;          // R; 1 = every step fresh
  CondStrategy cond = CondStrategy::Off;
  std::uint64_t cond_seed = 0;  // Random strategy stream
  int warmup = 0;               // W
  std::optional<int> period;    // P; nullopt = never
  bool strict = false;          // refresh a reduced pair when its expert id changes

  void validate(int num_layers) const;

  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

/// Layers that always run synchronously, ascending.
/// Deep = [ceil(L/2), L), Shallow = [0, ceil(L/2)), Staggered = odd indices.
std::vector<int> select_sync_layers(SyncStrategy strategy, int num_layers,
                                    const std::vector<int>& explicit_layers = {});

/// true iff step < warmup, or (step - warmup) is a multiple of the period.
/// Without a period only the warmup steps are synchronous.
bool is_sync_step(int step, int warmup, std::optional<int> period) noexcept;

/// Per-token mask over rank slots (token * k + slot) whose refresh cadence is reduced.
///
/// LowScore reduces slots 1..k-1, HighScore reduces slot 0, Random reduces k-1
/// slots per token chosen from a counter-based draw keyed by
/// (seed, layer, token, window_step). The slot kept fresh is uniform over k.
std::vector<std::uint8_t> reduced_slots(const RouteDecision& route, CondStrategy strategy,
                                        std::uint64_t seed = 0, int layer = 0, int window_step = 0);

/// Reduced-slot mask of a single token; the building block of reduced_slots.
std::vector<std::uint8_t> reduced_slots_for_token(int top_k, CondStrategy strategy, std::uint64_t seed,
                                                  int layer, std::size_t token, int window_step);

/// Which (token, slot) pairs travel in one payload, and which fresh results
/// must be written back to the cache when the payload is processed.
struct PairPlan {
  int layer = 0;
  int generated_step = 0;
  int top_k = 0;
  std::vector<std::uint8_t> active;  // token * k + slot
  std::vector<std::uint8_t> store;   // fresh result to cache
  std::size_t active_count = 0;

  bool all_active() const noexcept { return active_count == active.size(); }
};

struct ConditionalResult {
  std::vector<Matrix> slot_outputs;  // per rank slot, full rows
  RouteDecision scale_route;         // cached ids/gates substituted for reused pairs
  std::vector<int> provenance;       // token * k + slot -> step of the values used
};

/// Per-(layer, token, slot) cache of expert contributions for conditional
/// communication. Owned by one sampling run.
///
/// Bookkeeping (refresh decisions) happens when a payload is created; values
/// are written when the payload is processed by the experts. Payload creation
/// and processing are each in increasing step order per layer, so a reused
/// pair always sees the values of its most recent refresh.
class TokenCache {
 public:
  struct Entry {
    bool valid = false;
    int expert_id = -1;
    double gate = 0.0;
    int refresh_step = -1;
    std::vector<double> output;
  };

  TokenCache() = default;
  TokenCache(const ModelConfig& model, const PolicyConfig& policy);

  bool enabled() const noexcept { return policy_.cond != CondStrategy::Off; }

  /// Refresh decision for a payload generated at `step` by an asynchronous layer.
  PairPlan decide(int layer, int step, const RouteDecision& route);

  /// Every pair active; resets the refresh window (synchronous executions).
  PairPlan refresh_all(int layer, int step, const RouteDecision& route);

  /// Builds per-slot outputs from fresh results (active pairs) and cached
  /// contributions (inactive pairs), storing fresh results the plan marks.
  ConditionalResult assemble(const PairPlan& plan, const RouteDecision& route, std::vector<Matrix> fresh);

  const Entry& entry(int layer, std::size_t token, int slot) const;
  int last_refresh(int layer, std::size_t token) const;

 private:
  struct TokenState {
    int last_refresh = -1;
    std::vector<std::uint8_t> reduced;
    std::vector<int> decided_ids;
  };

  std::size_t index(int layer, std::size_t token) const noexcept {
    return static_cast<std::size_t>(layer) * rows_ + token;
  }
  void refresh_token(TokenState& st, int layer, std::size_t token, int step, const RouteDecision& route,
                     PairPlan& plan);

  PolicyConfig policy_{};
  std::size_t rows_ = 0;
  int top_k_ = 0;
  std::vector<TokenState> states_;
  std::vector<Entry> entries_;  // (layer * rows + token) * k + slot
};

/// One-shot conditional step: decide, evaluate, assemble. `fresh_eval` is
/// called with the active mask and must return per-slot outputs.
template <typename FreshEval>
ConditionalResult apply_conditional(TokenCache& cache, int layer, int step, const RouteDecision& route,
                                    FreshEval&& fresh_eval, PairPlan* plan_out = nullptr) {
  PairPlan plan = cache.decide(layer, step, route);
  auto result = cache.assemble(plan, route, fresh_eval(plan.active));
  if (plan_out) *plan_out = std::move(plan);
  return result;
}

}  // namespace dice

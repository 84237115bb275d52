#include "dice/policies.hpp"

#include <algorithm>
#include <cctype>

namespace dice {

namespace {

std::string normalize(const std::string& s) {
  std::string out;
  for (unsigned char c : s) {
    if (c == '-' || c == '_' || c == ' ') continue;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

}  // namespace

const char* to_string(SyncStrategy s) noexcept {
  switch (s) {
    case SyncStrategy::None:
      return "none";
    case SyncStrategy::Deep:
      return "deep";
    case SyncStrategy::Shallow:
      return "shallow";
    case SyncStrategy::Staggered:
      return "staggered";
    case SyncStrategy::Explicit:
      return "explicit";
  }
  return "none";
}

const char* to_string(CondStrategy s) noexcept {
  switch (s) {
    case CondStrategy::Off:
      return "off";
    case CondStrategy::LowScore:
      return "low_score";
    case CondStrategy::HighScore:
      return "high_score";
    case CondStrategy::Random:
      return "random";
  }
  return "off";
}

SyncStrategy parse_sync_strategy(const std::string& name) {
  const auto n = normalize(name);
  if (n == "none") return SyncStrategy::None;
  if (n == "deep") return SyncStrategy::Deep;
  if (n == "shallow") return SyncStrategy::Shallow;
  if (n == "staggered") return SyncStrategy::Staggered;
  if (n == "explicit") return SyncStrategy::Explicit;
  throw ConfigError("unknown sync strategy '" + name + "' (none|deep|shallow|staggered|explicit)");
}

CondStrategy parse_cond_strategy(const std::string& name) {
  const auto n = normalize(name);
  if (n == "off" || n == "none") return CondStrategy::Off;
  if (n == "lowscore" || n == "low") return CondStrategy::LowScore;
  if (n == "highscore" || n == "high") return CondStrategy::HighScore;
  if (n == "random") return CondStrategy::Random;
  throw ConfigError("unknown conditional strategy '" + name + "' (off|low_score|high_score|random)");
}

void PolicyConfig::validate(int num_layers) const {
  if (refresh_interval < 1) throw ConfigError("policy.refresh_interval: must be >= 1");
  if (warmup < 0) throw ConfigError("policy.warmup: must be >= 0");
  if (period && *period < 1) throw ConfigError("policy.period: must be >= 1 (omit for no periodic sync)");
  if (sync == SyncStrategy::Explicit) {
    for (int l : explicit_layers) {
      if (l < 0 || l >= num_layers) {
        throw ConfigError("policy.layers: layer " + std::to_string(l) + " outside [0, " +
                          std::to_string(num_layers) + ")");
      }
    }
  }
}

std::vector<int> select_sync_layers(SyncStrategy strategy, int num_layers, const std::vector<int>& explicit_layers) {
  std::vector<int> out;
  const int half = (num_layers + 1) / 2;
  switch (strategy) {
    case SyncStrategy::None:
      break;
    case SyncStrategy::Deep:
      for (int l = half; l < num_layers; ++l) out.push_back(l);
      break;
    case SyncStrategy::Shallow:
      for (int l = 0; l < half; ++l) out.push_back(l);
      break;
    case SyncStrategy::Staggered:
      for (int l = 1; l < num_layers; l += 2) out.push_back(l);
      break;
    case SyncStrategy::Explicit:
      out = explicit_layers;
      std::sort(out.begin(), out.end());
      out.erase(std::unique(out.begin(), out.end()), out.end());
      break;
  }
  return out;
}

bool is_sync_step(int step, int warmup, std::optional<int> period) noexcept {
  if (step < warmup) return true;
  if (!period) return false;
  return (step - warmup) % *period == 0;
}

std::vector<std::uint8_t> reduced_slots_for_token(int top_k, CondStrategy strategy, std::uint64_t seed, int layer,
                                                  std::size_t token, int window_step) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(top_k), 0);
  switch (strategy) {
    case CondStrategy::Off:
      break;
    case CondStrategy::LowScore:
      for (int s = 1; s < top_k; ++s) mask[s] = 1;
      break;
    case CondStrategy::HighScore:
      mask[0] = 1;
      break;
    case CondStrategy::Random: {
      if (top_k < 2) break;
      std::uint64_t key = hash_combine(seed, static_cast<std::uint64_t>(layer));
      key = hash_combine(key, token);
      key = hash_combine(key, static_cast<std::uint64_t>(static_cast<std::int64_t>(window_step)));
      SplitMix64 rng(key);
      const auto kept = static_cast<int>(rng.next_unit() * top_k);
      for (int s = 0; s < top_k; ++s) mask[s] = s == kept ? 0 : 1;
      break;
    }
  }
  return mask;
}

std::vector<std::uint8_t> reduced_slots(const RouteDecision& route, CondStrategy strategy, std::uint64_t seed,
                                        int layer, int window_step) {
  const int k = route.top_k;
  std::vector<std::uint8_t> mask;
  mask.reserve(route.num_tokens() * k);
  for (std::size_t t = 0; t < route.num_tokens(); ++t) {
    auto m = reduced_slots_for_token(k, strategy, seed, layer, t, window_step);
    mask.insert(mask.end(), m.begin(), m.end());
  }
  return mask;
}

TokenCache::TokenCache(const ModelConfig& model, const PolicyConfig& policy)
    : policy_(policy),
      rows_(model.rows()),
      top_k_(model.top_k),
      states_(static_cast<std::size_t>(model.num_layers) * model.rows()) {
  if (enabled()) {
    entries_.resize(states_.size() * static_cast<std::size_t>(top_k_));
  }
}

void TokenCache::refresh_token(TokenState& st, int layer, std::size_t token, int step, const RouteDecision& route,
                               PairPlan& plan) {
  st.last_refresh = step;
  st.reduced = reduced_slots_for_token(top_k_, policy_.cond, policy_.cond_seed, layer, token, step);
  st.decided_ids.assign(route.expert_ids.begin() + static_cast<std::ptrdiff_t>(token * top_k_),
                        route.expert_ids.begin() + static_cast<std::ptrdiff_t>((token + 1) * top_k_));
  for (int s = 0; s < top_k_; ++s) {
    plan.active[token * top_k_ + s] = 1;
    plan.store[token * top_k_ + s] = st.reduced[s];
  }
}

PairPlan TokenCache::refresh_all(int layer, int step, const RouteDecision& route) {
  PairPlan plan;
  plan.layer = layer;
  plan.generated_step = step;
  plan.top_k = route.top_k;
  plan.active.assign(route.num_tokens() * route.top_k, 1);
  plan.store.assign(plan.active.size(), 0);
  plan.active_count = plan.active.size();
  if (!enabled()) return plan;
  for (std::size_t t = 0; t < route.num_tokens(); ++t) {
    refresh_token(states_[index(layer, t)], layer, t, step, route, plan);
  }
  return plan;
}

PairPlan TokenCache::decide(int layer, int step, const RouteDecision& route) {
  if (!enabled()) return refresh_all(layer, step, route);
  if (route.top_k != top_k_ || route.num_tokens() != rows_) {
    throw ContractError("TokenCache::decide: route shape does not match the cache");
  }
  PairPlan plan;
  plan.layer = layer;
  plan.generated_step = step;
  plan.top_k = top_k_;
  plan.active.assign(rows_ * top_k_, 0);
  plan.store.assign(rows_ * top_k_, 0);
  for (std::size_t t = 0; t < rows_; ++t) {
    TokenState& st = states_[index(layer, t)];
    bool refresh = st.last_refresh < 0 || step - st.last_refresh >= policy_.refresh_interval;
    if (!refresh && policy_.strict) {
      for (int s = 0; s < top_k_; ++s) {
        if (st.reduced[s] && st.decided_ids[s] != route.expert(t, s)) refresh = true;
      }
    }
    if (refresh) {
      refresh_token(st, layer, t, step, route, plan);
      continue;
    }
    for (int s = 0; s < top_k_; ++s) plan.active[t * top_k_ + s] = st.reduced[s] ? 0 : 1;
  }
  plan.active_count = static_cast<std::size_t>(std::count(plan.active.begin(), plan.active.end(), 1));
  return plan;
}

ConditionalResult TokenCache::assemble(const PairPlan& plan, const RouteDecision& route, std::vector<Matrix> fresh) {
  const int k = route.top_k;
  if (fresh.size() != static_cast<std::size_t>(k) || plan.active.size() != route.num_tokens() * k) {
    throw ContractError("TokenCache::assemble: plan/route/output shapes disagree");
  }
  ConditionalResult result;
  result.scale_route = route;
  result.provenance.assign(plan.active.size(), plan.generated_step);
  result.slot_outputs = std::move(fresh);
  if (!enabled()) return result;

  for (std::size_t t = 0; t < route.num_tokens(); ++t) {
    for (int s = 0; s < k; ++s) {
      const std::size_t pair = t * k + s;
      Entry& e = entries_[index(plan.layer, t) * k + s];
      auto row = result.slot_outputs[s].row(t);
      if (plan.active[pair]) {
        if (plan.store[pair]) {
          e.valid = true;
          e.expert_id = route.expert(t, s);
          e.gate = route.gate(t, s);
          e.refresh_step = plan.generated_step;
          e.output.assign(row.begin(), row.end());
        }
        continue;
      }
      if (!e.valid) {
        throw ContractError("TokenCache::assemble: reused pair has no cached value (layer " +
                            std::to_string(plan.layer) + ", token " + std::to_string(t) + ")");
      }
      std::copy(e.output.begin(), e.output.end(), row.begin());
      result.scale_route.expert_ids[pair] = e.expert_id;
      result.scale_route.gates[pair] = e.gate;
      result.provenance[pair] = e.refresh_step;
    }
  }
  return result;
}

const TokenCache::Entry& TokenCache::entry(int layer, std::size_t token, int slot) const {
  return entries_.at(index(layer, token) * top_k_ + slot);
}

int TokenCache::last_refresh(int layer, std::size_t token) const { return states_.at(index(layer, token)).last_refresh; }

}  // namespace dice

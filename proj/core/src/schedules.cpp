#include "dice/schedules.hpp"

#include <algorithm>
#include <cctype>

namespace dice {

const char* to_string(Strategy s) noexcept {
  switch (s) {
    case Strategy::Synchronous:
      return "synchronous";
    case Strategy::Displaced:
      return "displaced";
    case Strategy::Interweaved:
      return "interweaved";
  }
  return "synchronous";
}

Strategy parse_strategy(const std::string& name) {
  std::string n;
  for (unsigned char c : name) n.push_back(static_cast<char>(std::tolower(c)));
  if (n == "synchronous" || n == "sync") return Strategy::Synchronous;
  if (n == "displaced") return Strategy::Displaced;
  if (n == "interweaved") return Strategy::Interweaved;
  throw ConfigError("unknown strategy '" + name + "' (synchronous|displaced|interweaved)");
}

Pipeline::Pipeline(const ToyModel& model, Strategy strategy, const PolicyConfig& policy, const ClusterConfig& cluster,
                   RunOptions options)
    : model_(model),
      strategy_(strategy),
      policy_(policy),
      cluster_(cluster),
      placement_(Placement::uniform(cluster, model.config)),
      cache_(model.config, policy),
      options_(options),
      always_sync_(static_cast<std::size_t>(model.config.num_layers), 0),
      buffers_(static_cast<std::size_t>(model.config.num_layers)) {
  policy.validate(model.config.num_layers);
  for (int l : select_sync_layers(policy.sync, model.config.num_layers, policy.explicit_layers)) {
    always_sync_[l] = 1;
  }
  result_.strategy = strategy;
  result_.policy = policy;
  result_.model_config = model.config;
  result_.cluster = cluster;
  result_.model_fingerprint = model.fingerprint();
  result_.timeline = SimTimeline(cluster, options.record_timeline);
  result_.peak_layer_slots.assign(buffers_.size(), 0);
}

std::string Pipeline::label(int layer, int step, const char* what) const {
  if (!options_.record_timeline) return {};
  return "s" + std::to_string(step) + ".L" + std::to_string(layer) + "." + what;
}

void Pipeline::charge_all(double elements_per_device, int layer, int step, const char* what) {
  const std::string l = label(layer, step, what);
  for (int d = 0; d < cluster_.num_devices; ++d) result_.timeline.charge_compute(d, elements_per_device, l);
}

ActivationBlock Pipeline::local_stage(int layer, const ActivationBlock& x, int step) {
  const auto& c = model_.config;
  const double rows = static_cast<double>(placement_.rows_on(0));
  charge_all(rows * c.hidden_dim * c.hidden_dim, layer, step, "local");
  if (!x.values.all_finite()) throw NumericalError("non-finite activations entering local block", step, layer);
  ActivationBlock y = local_block(model_, layer, x);
  y.layer = layer;
  return y;
}

RouteDecision Pipeline::route_stage(int layer, const Matrix& h, int step) {
  const auto& c = model_.config;
  const double rows = static_cast<double>(placement_.rows_on(0));
  charge_all(rows * c.hidden_dim * c.num_experts, layer, step, "gate");
  RouteDecision route;
  try {
    route = gate(model_, layer, h);
  } catch (const NumericalError& e) {
    throw NumericalError(e.what(), step, layer);
  }
  if (options_.record_moe_inputs) {
    auto& inputs = result_.moe_inputs;
    auto& top1 = result_.top1;
    if (inputs.size() <= static_cast<std::size_t>(step)) {
      inputs.resize(step + 1, std::vector<Matrix>(buffers_.size()));
      top1.resize(step + 1, std::vector<std::vector<int>>(buffers_.size()));
    }
    inputs[step][layer] = h;
    auto& ids = top1[step][layer];
    ids.resize(route.num_tokens());
    for (std::size_t t = 0; t < ids.size(); ++t) ids[t] = route.expert(t, 0);
  }
  return route;
}

DispatchPayload Pipeline::make_payload(int layer, int step, const Matrix& h, const RouteDecision& route,
                                       PairPlan plan) {
  DispatchPayload p;
  p.generated_step = step;
  p.tokens = h;
  p.route = route;
  p.traffic = plan_all_to_all(route, placement_, plan.all_active() ? std::span<const std::uint8_t>{} : plan.active,
                              model_.config.hidden_dim, cluster_.bytes_per_element);
  p.plan = std::move(plan);
  (void)layer;
  return p;
}

std::vector<CommHandle> Pipeline::launch(CommKind kind, const AllToAllPlan& traffic, int layer, int step) {
  const auto& bytes = kind == CommKind::Dispatch ? traffic.send : traffic.recv;
  auto handles = result_.timeline.launch_collective(kind, bytes, label(layer, step, to_string(kind)));
  result_.total_comm_bytes += traffic.total_bytes;
  ++result_.comm_collectives;
  if (kind == CommKind::Dispatch) {
    result_.dispatch_bytes += traffic.total_bytes;
    result_.dispatch_pairs += traffic.active_pairs;
  }
  return handles;
}

void Pipeline::wait_all(const std::vector<CommHandle>& handles, int layer, int step, const char* what) {
  const std::string l = label(layer, step, what);
  for (const auto& h : handles) result_.timeline.wait_comm(h.device, h, l);
}

CombinePayload Pipeline::run_experts(DispatchPayload& payload, int step, bool launch_combine) {
  const auto& c = model_.config;
  const int layer = payload.plan.layer;
  const double per_device = static_cast<double>(payload.plan.active_count) * 2.0 * c.hidden_dim * c.expert_dim /
                            static_cast<double>(cluster_.num_devices);
  charge_all(per_device, layer, step, "experts");
  auto fresh = routed_outputs(model_, layer, payload.tokens, payload.route,
                              payload.plan.all_active() ? std::span<const std::uint8_t>{} : payload.plan.active);
  auto assembled = cache_.assemble(payload.plan, payload.route, std::move(fresh));
  CombinePayload out;
  out.generated_step = payload.generated_step;
  out.slot_outputs = std::move(assembled.slot_outputs);
  out.scale_route = std::move(assembled.scale_route);
  if (launch_combine) out.in_flight = launch(CommKind::Combine, payload.traffic, layer, step);
  return out;
}

Matrix Pipeline::consume(int layer, const Matrix& h, int step, CombinePayload& payload, const RouteDecision& route) {
  const auto& c = model_.config;
  const double rows = static_cast<double>(placement_.rows_on(0));
  charge_all(rows * c.num_shared * 2.0 * c.hidden_dim * c.expert_dim, layer, step, "shared");
  Matrix shared = shared_forward(model_, layer, h);
  if (payload.in_flight) {
    wait_all(*payload.in_flight, layer, step, "combine-wait");
    payload.in_flight.reset();
  }
  charge_all(rows * c.top_k * c.hidden_dim, layer, step, "combine");
  Matrix moe = combine_outputs(route, payload.slot_outputs, shared, payload.scale_route);
  result_.staleness.push_back(StalenessRecord{layer, step, payload.generated_step});
  Matrix out = h;
  auto dst = out.flat();
  auto add = moe.flat();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += add[i];
  return out;
}

void Pipeline::run_deferred(Deferred& d) {
  if (d.payload.in_flight) {
    wait_all(*d.payload.in_flight, d.layer, d.step, "dispatch-wait");
    d.payload.in_flight.reset();
  }
  buffers_[d.layer].combine_slot = run_experts(d.payload, d.step, true);
}

void Pipeline::flush(int step) {
  (void)step;
  if (!deferred_) return;
  Deferred d = std::move(*deferred_);
  deferred_.reset();
  run_deferred(d);
  note_buffers();
}

void Pipeline::drain(int step) {
  for (std::size_t l = 0; l < buffers_.size(); ++l) {
    auto& buf = buffers_[l];
    const int layer = static_cast<int>(l);
    if (buf.dispatch_slot && buf.dispatch_slot->in_flight) {
      wait_all(*buf.dispatch_slot->in_flight, layer, step, "drain");
      buf.dispatch_slot->in_flight.reset();
    }
    if (buf.combine_slot && buf.combine_slot->in_flight) {
      wait_all(*buf.combine_slot->in_flight, layer, step, "drain");
      buf.combine_slot->in_flight.reset();
    }
  }
}

void Pipeline::note_buffers() {
  int total = 0;
  for (std::size_t l = 0; l < buffers_.size(); ++l) {
    const int occ = buffers_[l].occupied();
    total += occ;
    result_.peak_layer_slots[l] = std::max(result_.peak_layer_slots[l], occ);
  }
  if (total > result_.peak_slots) {
    result_.peak_slots = total;
    result_.peak_buffer_bytes = static_cast<std::uint64_t>(total) * model_.config.rows() *
                                static_cast<std::uint64_t>(model_.config.hidden_dim) *
                                static_cast<std::uint64_t>(cluster_.bytes_per_element);
  }
}

Matrix Pipeline::run_sync_layer(int layer, const Matrix& h, int step) {
  RouteDecision route = route_stage(layer, h, step);
  DispatchPayload payload = make_payload(layer, step, h, route, cache_.refresh_all(layer, step, route));
  auto handles = launch(CommKind::Dispatch, payload.traffic, layer, step);
  flush(step);
  wait_all(handles, layer, step, "dispatch-wait");
  CombinePayload combined = run_experts(payload, step, true);
  wait_all(*combined.in_flight, layer, step, "combine-wait");
  combined.in_flight.reset();
  Matrix out = consume(layer, h, step, combined, route);

  if (!always_sync_[layer]) {
    auto& buf = buffers_[layer];
    if (strategy_ == Strategy::Displaced) {
      buf.dispatch_slot = std::move(payload);
      buf.combine_slot = std::move(combined);
    } else if (strategy_ == Strategy::Interweaved) {
      buf.combine_slot = std::move(combined);
    }
  }
  note_buffers();
  return out;
}

Matrix Pipeline::run_displaced_layer(int layer, const Matrix& h, int step) {
  auto& buf = buffers_[layer];
  if (!buf.dispatch_slot || !buf.combine_slot) return run_sync_layer(layer, h, step);

  RouteDecision route = route_stage(layer, h, step);
  DispatchPayload next = make_payload(layer, step, h, route, cache_.decide(layer, step, route));
  next.in_flight = launch(CommKind::Dispatch, next.traffic, layer, step);

  DispatchPayload arrived = std::move(*buf.dispatch_slot);
  if (arrived.in_flight) {
    wait_all(*arrived.in_flight, layer, step, "dispatch-wait");
    arrived.in_flight.reset();
  }
  CombinePayload produced = run_experts(arrived, step, true);

  CombinePayload stale = std::move(*buf.combine_slot);
  Matrix out = consume(layer, h, step, stale, route);
  buf.dispatch_slot = std::move(next);
  buf.combine_slot = std::move(produced);
  note_buffers();
  return out;
}

Matrix Pipeline::run_interweaved_layer(int layer, const Matrix& h, int step) {
  auto& buf = buffers_[layer];
  // With one layer the pending expert work is this layer's own previous step.
  const bool pending_here = deferred_ && deferred_->layer == layer;
  if (!buf.combine_slot && !pending_here) return run_sync_layer(layer, h, step);

  RouteDecision route = route_stage(layer, h, step);
  DispatchPayload next = make_payload(layer, step, h, route, cache_.decide(layer, step, route));
  next.in_flight = launch(CommKind::Dispatch, next.traffic, layer, step);
  // The previous layer's experts run while this layer's dispatch is on the wire.
  flush(step);

  CombinePayload stale = std::move(*buf.combine_slot);
  buf.combine_slot.reset();
  Matrix out = consume(layer, h, step, stale, route);
  deferred_ = Deferred{layer, step, std::move(next)};
  return out;
}

Matrix Pipeline::moe_stage(int layer, const Matrix& h, int step, bool sync_step) {
  if (sync_step || always_sync_[layer] || strategy_ == Strategy::Synchronous) return run_sync_layer(layer, h, step);
  if (strategy_ == Strategy::Displaced) return run_displaced_layer(layer, h, step);
  return run_interweaved_layer(layer, h, step);
}

ActivationBlock Pipeline::finish_step(const ActivationBlock& x, const Matrix& hidden, int step) {
  const auto& c = model_.config;
  const double rows = static_cast<double>(placement_.rows_on(0));
  charge_all(rows * c.hidden_dim * 2.0, -1, step, "head");
  ActivationBlock next = denoise_update(x, output_head(hidden), c.step_size, step);
  if (!next.values.all_finite()) {
    throw NumericalError("sample became non-finite after step " + std::to_string(step), step, -1);
  }
  return next;
}

RunResult run_sampling(const ToyModel& model, const ActivationBlock& x0, Strategy strategy, const PolicyConfig& policy,
                       const ClusterConfig& cluster, RunOptions options) {
  const auto& c = model.config;
  if (x0.values.rows() != c.rows() || x0.values.cols() != static_cast<std::size_t>(c.hidden_dim)) {
    throw ContractError("run_sampling: x0 shape does not match the model");
  }
  if (x0.generated_step != 0) throw ContractError("run_sampling: x0 must be generated at step 0");

  Pipeline pipe(model, strategy, policy, cluster, options);
  std::vector<int> sync_layers = select_sync_layers(policy.sync, c.num_layers, policy.explicit_layers);
  const bool all_layers_sync = static_cast<int>(sync_layers.size()) == c.num_layers;

  ActivationBlock x = x0;
  auto& result = pipe.result();
  result.x0_fingerprint = fingerprint(x0.values.flat());
  for (int s = 0; s < c.num_steps; ++s) {
    const bool sync_step = is_sync_step(s, policy.warmup, policy.period);
    // Step 0 always runs synchronously: the buffers start empty.
    result.step_is_sync.push_back(sync_step || s == 0 || all_layers_sync || strategy == Strategy::Synchronous ? 1 : 0);
    ActivationBlock h{x.values, s, 0};
    for (int l = 0; l < c.num_layers; ++l) {
      h = pipe.local_stage(l, h, s);
      h.values = pipe.moe_stage(l, h.values, s, sync_step);
    }
    x = pipe.finish_step(x, h.values, s);
  }
  pipe.flush(c.num_steps - 1);
  pipe.drain(c.num_steps - 1);
  RunResult out = pipe.take_result();
  out.final_sample = std::move(x);
  return out;
}

}  // namespace dice

#include "dice/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace dice {

double quantize_duration(double seconds) noexcept {
  return std::ldexp(std::nearbyint(std::ldexp(seconds, kTimeQuantumExponent)), -kTimeQuantumExponent);
}

void ClusterConfig::validate(const ModelConfig& model) const {
  if (num_devices < 1) throw ConfigError("cluster.num_devices: must be >= 1");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("cluster.alpha: must be finite and >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("cluster.beta: must be finite and >= 0");
  if (bytes_per_element < 1) throw ConfigError("cluster.bytes_per_element: must be >= 1");
  if (!(compute_rate > 0.0) || !std::isfinite(compute_rate)) {
    throw ConfigError("cluster.compute_rate: must be finite and > 0");
  }
  if (!(compute_overhead >= 0.0) || !std::isfinite(compute_overhead)) {
    throw ConfigError("cluster.compute_overhead: must be finite and >= 0");
  }
  if (model.num_experts % num_devices != 0) {
    throw ConfigError("cluster.num_devices: " + std::to_string(num_devices) + " does not divide num_experts " +
                      std::to_string(model.num_experts));
  }
  if (model.rows() % static_cast<std::size_t>(num_devices) != 0) {
    throw ConfigError("cluster.num_devices: " + std::to_string(num_devices) + " does not divide batch*num_tokens " +
                      std::to_string(model.rows()));
  }
}

Placement::Placement(int num_devices, int num_experts, std::size_t rows)
    : num_devices_(num_devices), num_experts_(num_experts), rows_(rows) {
  if (num_devices < 1 || num_experts % num_devices != 0) {
    throw ConfigError("placement: experts must divide evenly across devices");
  }
}

Placement Placement::uniform(const ClusterConfig& cluster, const ModelConfig& model) {
  cluster.validate(model);
  return Placement(cluster.num_devices, model.num_experts, model.rows());
}

int Placement::expert_device(int expert) const {
  if (expert < 0 || expert >= num_experts_) throw ContractError("placement: expert id out of range");
  return expert / (num_experts_ / num_devices_);
}

int Placement::home_device(std::size_t row) const {
  if (row >= rows_) throw ContractError("placement: token row out of range");
  return static_cast<int>(row * static_cast<std::size_t>(num_devices_) / rows_);
}

std::size_t Placement::rows_on(int device) const {
  const auto d = static_cast<std::size_t>(device);
  const auto n = static_cast<std::size_t>(num_devices_);
  return (d + 1) * rows_ / n - d * rows_ / n;
}

AllToAllPlan plan_all_to_all(const RouteDecision& route, const Placement& placement,
                             std::span<const std::uint8_t> active, int hidden_dim, int bytes_per_element) {
  const int k = route.top_k;
  const std::size_t tokens = route.num_tokens();
  if (!active.empty() && active.size() != tokens * k) {
    throw ContractError("plan_all_to_all: active mask size mismatch");
  }
  AllToAllPlan plan;
  plan.send.assign(static_cast<std::size_t>(placement.num_devices()), 0);
  plan.recv.assign(static_cast<std::size_t>(placement.num_devices()), 0);
  const auto row_bytes = static_cast<std::uint64_t>(hidden_dim) * static_cast<std::uint64_t>(bytes_per_element);
  for (std::size_t t = 0; t < tokens; ++t) {
    const int home = placement.home_device(t);
    for (int s = 0; s < k; ++s) {
      if (!active.empty() && active[t * k + s] == 0) continue;
      ++plan.active_pairs;
      const int target = placement.expert_device(route.expert(t, s));
      if (target == home) continue;
      ++plan.remote_pairs;
      plan.send[home] += row_bytes;
      plan.recv[target] += row_bytes;
    }
  }
  plan.total_bytes = plan.remote_pairs * row_bytes;
  return plan;
}

const char* to_string(CommKind kind) noexcept {
  return kind == CommKind::Dispatch ? "dispatch" : "combine";
}

const char* to_string(EventKind kind) noexcept {
  switch (kind) {
    case EventKind::Compute:
      return "compute";
    case EventKind::CommLaunch:
      return "comm-launch";
    case EventKind::CommWaitStall:
      return "comm-wait-stall";
  }
  return "unknown";
}

SimTimeline::SimTimeline(const ClusterConfig& config, bool record_events)
    : config_(config),
      record_events_(record_events),
      clocks_(static_cast<std::size_t>(config.num_devices), 0.0),
      link_free_(static_cast<std::size_t>(config.num_devices), 0.0),
      compute_(static_cast<std::size_t>(config.num_devices), 0.0),
      stall_(static_cast<std::size_t>(config.num_devices), 0.0) {}

void SimTimeline::record(int device, EventKind kind, double start, double end, const std::string& label) {
  if (record_events_) events_.push_back(TimelineEvent{device, kind, start, end, label});
}

CommHandle SimTimeline::launch_comm(int device, CommKind kind, std::uint64_t payload_bytes,
                                    const std::string& label) {
  CommHandle h;
  h.id = next_id_++;
  h.device = device;
  h.kind = kind;
  h.payload_bytes = payload_bytes;
  h.launch_time = clocks_.at(device);
  h.start_time = std::max(h.launch_time, link_free_[device]);
  h.ready_time = h.start_time + quantize_duration(config_.alpha + config_.beta * static_cast<double>(payload_bytes));
  link_free_[device] = h.ready_time;
  record(device, EventKind::CommLaunch, h.launch_time, h.launch_time, label);
  return h;
}

std::vector<CommHandle> SimTimeline::launch_collective(CommKind kind, std::span<const std::uint64_t> bytes_per_device,
                                                       const std::string& label) {
  if (bytes_per_device.size() != clocks_.size()) {
    throw ContractError("launch_collective: need one byte count per device");
  }
  std::vector<CommHandle> handles;
  handles.reserve(clocks_.size());
  double ready = 0.0;
  for (int d = 0; d < num_devices(); ++d) {
    handles.push_back(launch_comm(d, kind, bytes_per_device[d], label));
    ready = std::max(ready, handles.back().ready_time);
  }
  for (auto& h : handles) {
    h.ready_time = ready;
    link_free_[h.device] = ready;
  }
  return handles;
}

void SimTimeline::wait_comm(int device, const CommHandle& handle, const std::string& label) {
  double& clock = clocks_.at(device);
  if (handle.ready_time <= clock) return;
  record(device, EventKind::CommWaitStall, clock, handle.ready_time, label);
  stall_[device] += handle.ready_time - clock;
  clock = handle.ready_time;
}

void SimTimeline::charge_compute(int device, double element_count, const std::string& label) {
  if (element_count <= 0.0) return;
  double& clock = clocks_.at(device);
  const double duration = quantize_duration(config_.compute_overhead + element_count / config_.compute_rate);
  record(device, EventKind::Compute, clock, clock + duration, label);
  compute_[device] += duration;
  clock += duration;
}

double SimTimeline::makespan() const noexcept {
  double m = 0.0;
  for (double c : clocks_) m = std::max(m, c);
  return m;
}

std::string timeline_to_json(const SimTimeline& timeline) {
  nlohmann::ordered_json events = nlohmann::ordered_json::array();
  for (const auto& e : timeline.events()) {
    events.push_back({{"device", e.device},
                      {"kind", to_string(e.kind)},
                      {"start", e.start},
                      {"end", e.end},
                      {"label", e.label}});
  }
  return events.dump();
}

void write_timeline_json(const SimTimeline& timeline, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open timeline file for writing: " + path);
  out << timeline_to_json(timeline) << '\n';
  if (!out) throw IoError("failed writing timeline file: " + path);
}

}  // namespace dice

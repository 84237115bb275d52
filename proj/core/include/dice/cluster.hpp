#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dice/model.hpp"

namespace dice {

/// Alpha-beta communication model plus a linear compute model.
///
/// Defaults are calibrated so that a synchronous XL-toy run on 4 devices spends
/// roughly 62% / 70% / 73% of its time in all-to-all at batch 4 / 8 / 16
/// (see README, "Calibration").
struct ClusterConfig {
  int num_devices = 4;
  double alpha = 2.0e-5;             // seconds per collective launch
  double beta = 1.12e-7;             // seconds per byte
  int bytes_per_element = 2;         // half-precision payloads
  double compute_rate = 1.0e9;       // multiply-adds per second
  double compute_overhead = 4.5e-5;  // fixed seconds per non-empty compute event

  /// Throws ConfigError. Requires num_experts % num_devices == 0 and
  /// rows % num_devices == 0 (even data-parallel sharding).
  void validate(const ModelConfig& model) const;

  friend bool operator==(const ClusterConfig&, const ClusterConfig&) = default;
};

/// Simulated durations are whole multiples of 2^-40 s, so clock sums and maxima
/// are exact and do not depend on event order.
constexpr int kTimeQuantumExponent = 40;
double quantize_duration(double seconds) noexcept;

/// Uniform expert placement and contiguous token sharding.
class Placement {
 public:
  Placement() = default;
  Placement(int num_devices, int num_experts, std::size_t rows);
  static Placement uniform(const ClusterConfig& cluster, const ModelConfig& model);

  int num_devices() const noexcept { return num_devices_; }
  int num_experts() const noexcept { return num_experts_; }
  std::size_t rows() const noexcept { return rows_; }
  int expert_device(int expert) const;
  int home_device(std::size_t row) const;
  std::size_t rows_on(int device) const;

 private:
  int num_devices_ = 1;
  int num_experts_ = 1;
  std::size_t rows_ = 0;
};

/// Byte counts of one all-to-all. `send[d]` is what device d puts on the wire
/// for the dispatch direction; the combine direction mirrors it (`recv[d]`).
struct AllToAllPlan {
  std::uint64_t total_bytes = 0;
  std::uint64_t remote_pairs = 0;
  std::uint64_t active_pairs = 0;
  std::vector<std::uint64_t> send;
  std::vector<std::uint64_t> recv;
};

/// Bytes for the (token, slot) pairs marked in `active` (empty span = all pairs).
/// Pairs whose expert lives on the token's home device cost nothing.
AllToAllPlan plan_all_to_all(const RouteDecision& route, const Placement& placement,
                             std::span<const std::uint8_t> active, int hidden_dim,
                             int bytes_per_element);

enum class CommKind { Dispatch, Combine };
enum class EventKind { Compute, CommLaunch, CommWaitStall };

const char* to_string(CommKind kind) noexcept;
const char* to_string(EventKind kind) noexcept;

/// An in-flight collective as seen by one device.
///
/// `launch_time` is the device clock at issue. The device's link is a FIFO, so
/// transfer begins at `start_time` = max(launch_time, link free); for a
/// single-device launch ready_time = start_time + alpha + beta * payload_bytes
/// (rounded to the time quantum).
struct CommHandle {
  std::uint64_t id = 0;
  int device = 0;
  double launch_time = 0.0;
  double start_time = 0.0;
  double ready_time = 0.0;
  std::uint64_t payload_bytes = 0;
  CommKind kind = CommKind::Dispatch;
};

struct TimelineEvent {
  int device = 0;
  EventKind kind = EventKind::Compute;
  double start = 0.0;
  double end = 0.0;
  std::string label;
};

/// Per-device clocks and the event log of one simulated run.
class SimTimeline {
 public:
  SimTimeline() = default;
  explicit SimTimeline(const ClusterConfig& config, bool record_events = true);

  int num_devices() const noexcept { return static_cast<int>(clocks_.size()); }
  double clock(int device) const { return clocks_.at(device); }
  const ClusterConfig& config() const noexcept { return config_; }
  const std::vector<TimelineEvent>& events() const noexcept { return events_; }

  /// Non-blocking; never advances the device clock.
  CommHandle launch_comm(int device, CommKind kind, std::uint64_t payload_bytes,
                         const std::string& label = {});

  /// One collective across all devices. Every participant's handle carries the
  /// same ready_time: the maximum of the per-device completion times.
  std::vector<CommHandle> launch_collective(CommKind kind, std::span<const std::uint64_t> bytes_per_device,
                                            const std::string& label = {});

  /// clock := max(clock, ready_time), logging a stall event if the clock moved.
  void wait_comm(int device, const CommHandle& handle, const std::string& label = {});

  /// Advances the clock by overhead + elements / compute_rate, rounded to the
  /// time quantum (nothing for 0 elements).
  void charge_compute(int device, double element_count, const std::string& label = {});

  /// Maximum final clock over devices; 0 for a fresh timeline.
  double makespan() const noexcept;

  double compute_seconds(int device) const { return compute_.at(device); }
  double stall_seconds(int device) const { return stall_.at(device); }

 private:
  void record(int device, EventKind kind, double start, double end, const std::string& label);

  ClusterConfig config_{};
  bool record_events_ = true;
  std::vector<double> clocks_;
  std::vector<double> link_free_;
  std::vector<double> compute_;
  std::vector<double> stall_;
  std::vector<TimelineEvent> events_;
  std::uint64_t next_id_ = 0;
};

/// JSON array of {device, kind, start, end, label} in record order.
std::string timeline_to_json(const SimTimeline& timeline);
void write_timeline_json(const SimTimeline& timeline, const std::string& path);

}  // namespace dice

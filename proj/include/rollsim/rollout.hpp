#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <utility>
#include <vector>

#include "rollsim/simcore.hpp"
#include "rollsim/workload.hpp"

namespace rollsim {

using TrajectoryId = std::int64_t;
using ReplicaId = std::uint32_t;
using MachineId = std::uint32_t;
using Version = std::int64_t;

enum class TrajectoryState { Waiting, Decoding, EnvWait, Transferred, Complete, LostRecovered };

struct VersionSegment {
  Version version = 0;
  std::int64_t tokens = 0;
  friend bool operator==(const VersionSegment&, const VersionSegment&) = default;
};

struct Trajectory {
  TrajectoryId id = 0;
  PromptId prompt_id = 0;
  std::int64_t prompt_tokens = 1;
  std::int64_t target_len = 1;
  std::int64_t generated = 0;
  int env_calls_remaining = 0;
  TrajectoryState state = TrajectoryState::Waiting;
  std::vector<VersionSegment> version_segments;
  Seconds dispatch_time = 0.0;
  std::optional<Seconds> completion_time;
  std::optional<std::int64_t> staleness;
  // Tokens whose KV must be rebuilt before the next decode step.
  std::int64_t prefill_debt = 0;
  bool awaiting_env = false;  // an environment call is outstanding

  std::int64_t kv_tokens() const { return prompt_tokens + generated; }
  bool done() const { return generated >= target_len; }
  Version current_version() const {
    return version_segments.empty() ? 0 : version_segments.back().version;
  }
  // Opens a segment for `v` unless the last one already has that version.
  void start_segment(Version v);
  void add_token();
};

// Dense id-indexed storage; ids are assigned sequentially.
class TrajectoryTable {
 public:
  TrajectoryId create(PromptId prompt, std::int64_t prompt_tokens, std::int64_t target_len,
                      int env_calls, Seconds dispatch_time);
  Trajectory& operator[](TrajectoryId id) { return rows_[static_cast<std::size_t>(id)]; }
  const Trajectory& operator[](TrajectoryId id) const { return rows_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return rows_.size(); }
  const std::vector<Trajectory>& rows() const { return rows_; }

 private:
  std::vector<Trajectory> rows_;
};

struct DecodeLatencyModel {
  Seconds t_step = 0.05;
  int roofline_batch = 64;  // B
  double overload_slope = 1.0;

  // t_step on [1, B]; grows linearly past the roofline batch.
  Seconds latency(int batch) const;
  void validate() const;
};

enum class ReplicaPhase { RampUp, Steady, RampDown, Idle, FetchingWeights, Failed };

const char* to_string(ReplicaPhase phase);

struct ReplicaSpec {
  std::int64_t kv_capacity = 16384;  // tokens
  DecodeLatencyModel decode;
  double c_max = 0.99;
  Seconds prefill_per_token = 0.0;  // KV rebuild cost for resumed trajectories
};

struct StepPlan {
  Seconds latency = 0.0;
  std::vector<TrajectoryId> batch;
  std::vector<TrajectoryId> preempted;
  std::int64_t prefill_tokens = 0;
};

struct StepResult {
  std::int64_t tokens = 0;
  std::vector<TrajectoryId> completed;
  std::vector<TrajectoryId> env_calls;
};

// One rollout replica: KV-bounded continuous batching over a trajectory table.
class Replica {
 public:
  Replica(ReplicaId id, MachineId machine, ReplicaSpec spec);

  ReplicaId id() const { return id_; }
  MachineId machine() const { return machine_; }
  const ReplicaSpec& spec() const { return spec_; }

  Version weight_version() const { return version_; }
  void set_weight_version(Version v) { version_ = v; }

  // Queues behind any waiting trajectory, then admits from the queue head
  // while the head fits in the KV cache and |active| < B.
  void admit(TrajectoryTable& table, TrajectoryId id);
  void admit_from_waiting(TrajectoryTable& table);

  // Number of active trajectories able to decode (not in an env wait).
  int decoding_count(const TrajectoryTable& table) const;
  bool step_in_flight() const { return step_in_flight_; }
  bool can_step(const TrajectoryTable& table) const;

  // Starts a decode step. Preempts the most recently admitted trajectories
  // when one more token each would overflow the cache. Throws on a failed
  // replica or when nothing can decode.
  StepPlan begin_step(TrajectoryTable& table);
  // Applies one token to every trajectory of the in-flight batch that is
  // still active; completes, parks env calls, then admits from waiting.
  StepResult finish_step(TrajectoryTable& table, const EnvLatencyModel& env);
  void abort_step();
  std::uint64_t step_token() const { return step_token_; }

  // Convenience: begin + finish with no time passing in between.
  Seconds decode_step(TrajectoryTable& table, const EnvLatencyModel& env, StepResult* out = nullptr);

  void env_return(TrajectoryTable& table, TrajectoryId id);

  // Removes every active and waiting trajectory (failure, transfer).
  std::vector<TrajectoryId> release_all(TrajectoryTable& table);

  void set_fetching(bool fetching) { fetching_ = fetching; }
  bool fetching() const { return fetching_; }
  void fail(TrajectoryTable& table, std::vector<TrajectoryId>* lost);
  void reinit();  // returns with an empty cache at the same version
  bool failed() const { return failed_; }
  bool healthy() const { return !failed_; }

  void set_paused_until(Seconds t) { paused_until_ = t; }
  Seconds paused_until() const { return paused_until_; }

  double c_used() const;
  double c_prev() const { return c_prev_; }
  void set_c_prev(double v) { c_prev_ = v; }
  void sample_c_prev() { c_prev_ = c_used(); }
  int n_reqs() const { return static_cast<int>(active_.size() + waiting_.size()); }
  std::int64_t occupancy() const { return occupancy_; }

  std::pair<double, ReplicaPhase> kv_utilization() const;
  ActivityCode activity(const TrajectoryTable& table) const;

  const std::vector<TrajectoryId>& active() const { return active_; }
  const std::deque<TrajectoryId>& waiting() const { return waiting_; }

 private:
  void activate(TrajectoryTable& table, TrajectoryId id);
  void remove_active(TrajectoryTable& table, std::size_t index);

  ReplicaId id_;
  MachineId machine_;
  ReplicaSpec spec_;
  Version version_ = 0;
  std::vector<TrajectoryId> active_;  // admission order
  std::deque<TrajectoryId> waiting_;
  std::int64_t occupancy_ = 0;
  double c_prev_ = 0.0;
  bool fetching_ = false;
  bool failed_ = false;
  bool step_in_flight_ = false;
  std::uint64_t step_token_ = 0;
  std::vector<TrajectoryId> step_batch_;
  Seconds paused_until_ = 0.0;
};

}  // namespace rollsim

#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "rollsim/datapool.hpp"
#include "rollsim/repack.hpp"
#include "rollsim/rollout.hpp"
#include "rollsim/sim_relay.hpp"
#include "rollsim/trainer.hpp"
#include "rollsim/workload.hpp"

namespace rollsim {

enum class PolicyKind { Synchronous, OneStep, Stream, PartialRollout, TrajectoryLevel };

const char* to_string(PolicyKind kind);
std::optional<PolicyKind> parse_policy_kind(std::string_view name);

struct PolicyConfig {
  PolicyKind kind = PolicyKind::TrajectoryLevel;
  int staleness_bound = 1;           // k for the one-step and stream pipelines
  Seconds reprefill_per_token = 1e-4;  // partial rollout
  bool repack_enabled = false;       // trajectory-level only

  void validate() const;
};

struct ReplicaPoolConfig {
  int count = 16;
  int per_machine = 2;  // replicas sharing one machine and one relay
  std::int64_t kv_capacity = 16384;
  Seconds t_step = 0.05;
  int roofline_batch = 48;
  double overload_slope = 1.0;
  Seconds prefill_per_token = 2e-5;
  int prompts_per_batch = 4;
  Seconds reinit_latency = 60.0;
  Seconds replacement_delay = 30.0;  // evicted machine -> replacement joins
  int max_replacements = -1;         // < 0: unlimited

  int machines() const { return (count + per_machine - 1) / per_machine; }
  void validate() const;
};

struct WorkloadConfig {
  LengthDistribution response = LengthDistribution::lognormal_from_tail_ratio(256.0, 10.0, 8192);
  LengthDistribution prompt = LengthDistribution::lognormal(128.0, 0.3, 1024);
  EnvLatencyModel env;
  std::int64_t prompt_pool_size = 4096;
  bool cycle = true;
  int group_size = 16;

  void validate() const;
};

enum class FaultTarget { Replica, Machine, Relay, Trainer };
enum class FaultKind { Reinit, Evict, Crash, Restore };

const char* to_string(FaultTarget target);
const char* to_string(FaultKind kind);
std::optional<FaultTarget> parse_fault_target(std::string_view name);
std::optional<FaultKind> parse_fault_kind(std::string_view name);

// replica/reinit, machine/evict, relay/crash and trainer/restore are the
// supported combinations.
struct FaultSpec {
  Seconds time = 0.0;
  FaultTarget target = FaultTarget::Replica;
  std::uint32_t id = 0;
  FaultKind kind = FaultKind::Reinit;

  friend bool operator==(const FaultSpec&, const FaultSpec&) = default;
};

struct MetricsConfig {
  Seconds sample_period = 1.0;
  Seconds steady_start = 300.0;  // summary window starts here
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  Seconds horizon = 3600.0;
  PolicyConfig policy;
  ReplicaPoolConfig replicas;
  // One round of prompts (16 replicas x 4 prompts x 16 responses) per iteration.
  TrainerConfig trainer{.global_batch = 1024, .t_minibatch = 8.0};
  ActorLink actor_link{16e9, 1.0 / 25e9, 1e-3};
  WorkloadConfig workload;
  SimRelayConfig relay;
  RepackConfig repack;
  BufferPolicy buffer;
  std::vector<FaultSpec> faults;
  MetricsConfig metrics;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

}  // namespace rollsim

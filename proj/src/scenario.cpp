#include "rollsim/scenario.hpp"

#include <array>
#include <stdexcept>
#include <string>
#include <utility>

namespace rollsim {

namespace {

constexpr std::array<std::pair<PolicyKind, const char*>, 5> kPolicyNames{{
    {PolicyKind::Synchronous, "synchronous"},
    {PolicyKind::OneStep, "one-step-staleness"},
    {PolicyKind::Stream, "stream-generation"},
    {PolicyKind::PartialRollout, "partial-rollout"},
    {PolicyKind::TrajectoryLevel, "trajectory-level"},
}};

constexpr std::array<std::pair<FaultTarget, const char*>, 4> kTargetNames{{
    {FaultTarget::Replica, "replica"},
    {FaultTarget::Machine, "machine"},
    {FaultTarget::Relay, "relay"},
    {FaultTarget::Trainer, "trainer"},
}};

constexpr std::array<std::pair<FaultKind, const char*>, 4> kFaultNames{{
    {FaultKind::Reinit, "reinit"},
    {FaultKind::Evict, "evict"},
    {FaultKind::Crash, "crash"},
    {FaultKind::Restore, "restore"},
}};

template <typename E, std::size_t N>
const char* name_of(const std::array<std::pair<E, const char*>, N>& table, E value) {
  for (const auto& [e, name] : table) {
    if (e == value) return name;
  }
  return "unknown";
}

template <typename E, std::size_t N>
std::optional<E> parse_name(const std::array<std::pair<E, const char*>, N>& table,
                            std::string_view name) {
  for (const auto& [e, n] : table) {
    if (name == n) return e;
  }
  return std::nullopt;
}

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw std::invalid_argument(field + ": " + what);
}

// Re-throws a nested validation error with the field prefix attached.
template <typename F>
void within(const std::string& field, F&& check) {
  try {
    check();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(field + ": " + e.what());
  }
}

}  // namespace

const char* to_string(PolicyKind kind) { return name_of(kPolicyNames, kind); }
std::optional<PolicyKind> parse_policy_kind(std::string_view name) {
  return parse_name(kPolicyNames, name);
}
const char* to_string(FaultTarget target) { return name_of(kTargetNames, target); }
const char* to_string(FaultKind kind) { return name_of(kFaultNames, kind); }
std::optional<FaultTarget> parse_fault_target(std::string_view name) {
  return parse_name(kTargetNames, name);
}
std::optional<FaultKind> parse_fault_kind(std::string_view name) {
  return parse_name(kFaultNames, name);
}

void PolicyConfig::validate() const {
  require(staleness_bound >= 0, "policy.staleness_bound", "must be >= 0");
  require(reprefill_per_token >= 0.0, "policy.reprefill_per_token_s", "must be >= 0");
  require(!repack_enabled || kind == PolicyKind::TrajectoryLevel, "policy.repack_enabled",
          "repack is only available under the trajectory-level policy");
}

void ReplicaPoolConfig::validate() const {
  require(count >= 1, "replicas.count", "must be >= 1");
  require(per_machine >= 1, "replicas.per_machine", "must be >= 1");
  require(kv_capacity >= 1, "replicas.kv_capacity_tokens", "must be >= 1");
  require(t_step > 0.0, "replicas.t_step_s", "must be > 0");
  require(roofline_batch >= 1, "replicas.roofline_batch", "must be >= 1");
  require(overload_slope >= 0.0, "replicas.overload_slope", "must be >= 0");
  require(prefill_per_token >= 0.0, "replicas.prefill_per_token_s", "must be >= 0");
  require(prompts_per_batch >= 1, "replicas.prompts_per_batch", "must be >= 1");
  require(reinit_latency >= 0.0, "replicas.reinit_latency_s", "must be >= 0");
  require(replacement_delay >= 0.0, "replicas.replacement_delay_s", "must be >= 0");
}

void WorkloadConfig::validate() const {
  within("workload.response", [&] { response.validate(); });
  within("workload.prompt", [&] { prompt.validate(); });
  within("workload.env", [&] { env.validate(); });
  require(prompt_pool_size >= 1, "workload.prompt_pool_size", "must be >= 1");
  require(group_size >= 1, "workload.group_size", "must be >= 1");
}

void ScenarioConfig::validate() const {
  require(horizon > 0.0, "horizon_s", "must be > 0");
  policy.validate();
  replicas.validate();
  workload.validate();
  within("trainer", [&] { trainer.validate(); });
  require(actor_link.model_bytes >= 0.0, "trainer.actor_model_bytes", "must be >= 0");
  require(actor_link.t_byte >= 0.0, "trainer.actor_t_byte_s", "must be >= 0");
  require(actor_link.t_start >= 0.0, "trainer.actor_t_start_s", "must be >= 0");
  within("relay", [&] { relay.validate(); });
  within("repack", [&] { repack.validate(); });
  require(metrics.sample_period > 0.0, "metrics.sample_period_s", "must be > 0");
  require(metrics.steady_start >= 0.0 && metrics.steady_start < horizon, "metrics.steady_start_s",
          "must lie in [0, horizon)");

  require(workload.response.max_len + workload.prompt.max_len <= replicas.kv_capacity,
          "replicas.kv_capacity_tokens",
          "must hold the longest prompt plus the longest response");
  const auto per_round = static_cast<std::size_t>(replicas.count) *
                         static_cast<std::size_t>(replicas.prompts_per_batch) *
                         static_cast<std::size_t>(workload.group_size);
  require(trainer.global_batch == per_round, "trainer.global_batch",
          "must equal replicas.count * replicas.prompts_per_batch * workload.group_size (" +
              std::to_string(per_round) + ")");
  if (relay.heartbeats) {
    require(replicas.replacement_delay > relay.hb_timeout + relay.rebuild_latency,
            "replicas.replacement_delay_s",
            "must exceed relay hb_timeout + rebuild_latency so the old node leaves the chain first");
  }

  for (std::size_t i = 0; i < faults.size(); ++i) {
    const auto& f = faults[i];
    const std::string field = "faults[" + std::to_string(i) + "]";
    require(f.time >= 0.0, field + ".time_s", "must be >= 0");
    switch (f.target) {
      case FaultTarget::Replica:
        require(f.kind == FaultKind::Reinit, field + ".kind", "replica faults use \"reinit\"");
        require(f.id < static_cast<std::uint32_t>(replicas.count), field + ".id",
                "no such replica");
        break;
      case FaultTarget::Machine:
        require(f.kind == FaultKind::Evict, field + ".kind", "machine faults use \"evict\"");
        require(f.id < static_cast<std::uint32_t>(replicas.machines()), field + ".id",
                "no such machine");
        break;
      case FaultTarget::Relay:
        require(f.kind == FaultKind::Crash, field + ".kind", "relay faults use \"crash\"");
        require(f.id < static_cast<std::uint32_t>(replicas.machines()), field + ".id",
                "no such relay");
        break;
      case FaultTarget::Trainer:
        require(f.kind == FaultKind::Restore, field + ".kind", "trainer faults use \"restore\"");
        break;
    }
  }
}

}  // namespace rollsim

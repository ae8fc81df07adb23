#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "rollsim/policies.hpp"

using namespace rollsim;

namespace {

// Four replicas on two machines; a few minutes of simulated time per run.
ScenarioConfig small(PolicyKind kind, Seconds horizon = 900.0) {
  ScenarioConfig c;
  c.seed = 7;
  c.horizon = horizon;
  c.policy.kind = kind;
  c.policy.repack_enabled = false;
  c.replicas.count = 4;
  c.replicas.per_machine = 2;
  c.replicas.kv_capacity = 4096;
  c.replicas.roofline_batch = 16;
  c.replicas.prompts_per_batch = 2;
  c.replicas.reinit_latency = 20.0;
  c.replicas.replacement_delay = 15.0;
  c.workload.group_size = 4;
  c.workload.response = LengthDistribution::lognormal_from_tail_ratio(64.0, 10.0, 2048);
  c.workload.prompt = LengthDistribution::constant(32.0, 64);
  c.workload.prompt_pool_size = 256;
  c.trainer.global_batch = 32;
  c.trainer.minibatches_per_iter = 4;
  c.trainer.t_minibatch = 2.0;
  c.trainer.recovery_latency = 20.0;
  c.actor_link = {1e9, 1e-10, 1e-3};
  c.relay.model_bytes = 1e9;
  c.relay.t_byte = 1e-10;
  c.relay.shard_bytes = 1e9;
  c.metrics.steady_start = 60.0;
  return c;
}

std::vector<Sample> named(const MetricsLog& log, const std::string& name) {
  std::vector<Sample> out;
  for (const auto& s : log.samples()) {
    if (s.name == name) out.push_back(s);
  }
  return out;
}

std::int64_t max_staleness(const ExperienceBuffer& buf) {
  std::int64_t m = 0;
  for (const auto& r : buf.records()) m = std::max(m, r.staleness);
  return m;
}

void expect_lossless(const Orchestrator& run) {
  const auto c = run.conservation();
  EXPECT_TRUE(c.exact()) << "decoded " << c.decoded << " in_traj " << c.in_trajectories << " committed "
                         << c.committed << " partial " << c.partial;
  for (const auto& r : run.buffer().records()) {
    const auto& t = run.trajectories()[r.trajectory_id];
    ASSERT_EQ(r.response_tokens, t.target_len);
    std::int64_t seg = 0;
    for (const auto& s : t.version_segments) seg += s.tokens;
    ASSERT_EQ(seg, t.generated);
  }
}

}  // namespace

TEST(Policies, SynchronousIsOnPolicy) {
  Orchestrator run(small(PolicyKind::Synchronous));
  run.run();
  ASSERT_GT(run.iterations(), 2);
  EXPECT_EQ(max_staleness(run.buffer()), 0);
  expect_lossless(run);
}

TEST(Policies, OneStepAndStreamStayWithinOneVersion) {
  for (auto kind : {PolicyKind::OneStep, PolicyKind::Stream}) {
    Orchestrator run(small(kind));
    run.run();
    ASSERT_GT(run.iterations(), 2) << to_string(kind);
    EXPECT_EQ(max_staleness(run.buffer()), 1) << to_string(kind);
    for (const auto& r : run.buffer().records()) EXPECT_EQ(r.segment_count, 1u);
    expect_lossless(run);
  }
}

TEST(Policies, StalenessBoundGeneralizes) {
  auto c = small(PolicyKind::OneStep);
  c.policy.staleness_bound = 3;
  Orchestrator run(c);
  run.run();
  EXPECT_LE(max_staleness(run.buffer()), 3);
}

TEST(Policies, TrajectoryLevelKeepsOneVersionPerTrajectory) {
  auto c = small(PolicyKind::TrajectoryLevel);
  c.policy.repack_enabled = true;
  Orchestrator run(c);
  run.run();
  ASSERT_GT(run.iterations(), 2);
  for (const auto& r : run.buffer().records()) ASSERT_EQ(r.segment_count, 1u);
  EXPECT_GT(run.repack_pairs(), 0);
  expect_lossless(run);
}

TEST(Policies, PartialRolloutChargesReprefill) {
  Orchestrator run(small(PolicyKind::PartialRollout));
  run.run();
  ASSERT_GT(run.interrupts(), 0);
  // Every interrupt rebuilds the KV of all tokens generated so far, and
  // each one opens a new version segment.
  const double per_token = run.config().policy.reprefill_per_token;
  double expected = 0.0;
  std::int64_t boundaries = 0;
  for (const auto& t : run.trajectories().rows()) {
    std::int64_t before = 0;
    for (std::size_t j = 0; j < t.version_segments.size(); ++j) {
      if (j > 0) {
        expected += static_cast<double>(before) * per_token;
        ++boundaries;
      }
      before += t.version_segments[j].tokens;
    }
  }
  EXPECT_EQ(boundaries, run.interrupts());
  EXPECT_NEAR(run.reprefill_total(), expected, 1e-9 * std::max(1.0, expected));
  const auto curve = named(run.metrics(), "partial.reprefill_s");
  ASSERT_FALSE(curve.empty());
  EXPECT_NEAR(curve.back().value, run.reprefill_total(), 1e-9);
  bool mixed = false;
  for (const auto& r : run.buffer().records()) mixed = mixed || r.segment_count > 1;
  EXPECT_TRUE(mixed);
}

TEST(Policies, SameSeedSameLog) {
  auto c = small(PolicyKind::TrajectoryLevel, 400.0);
  c.policy.repack_enabled = true;
  c.faults = {{150.0, FaultTarget::Replica, 1, FaultKind::Reinit}};
  std::string logs[2];
  for (auto& text : logs) {
    Orchestrator run(c);
    run.run();
    std::ostringstream os;
    run.metrics().write_jsonl(os);
    text = os.str();
  }
  EXPECT_EQ(logs[0], logs[1]);
  auto other = c;
  other.seed = 8;
  Orchestrator run(other);
  run.run();
  std::ostringstream os;
  run.metrics().write_jsonl(os);
  EXPECT_NE(os.str(), logs[0]);
}

TEST(Policies, PeriodicRepackTriggers) {
  auto c = small(PolicyKind::TrajectoryLevel, 60.0);
  c.policy.repack_enabled = true;
  c.trainer.t_minibatch = 1000.0;  // no version bumps inside the horizon
  c.metrics.steady_start = 0.0;
  Orchestrator run(c);
  run.run();
  EXPECT_EQ(run.iterations(), 0);
  EXPECT_EQ(run.repack_ticks(), 12);
  EXPECT_EQ(run.repack_version_triggers(), 0);
}

TEST(Policies, VersionBumpTriggersRepack) {
  auto c = small(PolicyKind::TrajectoryLevel, 300.0);
  c.policy.repack_enabled = true;
  Orchestrator run(c);
  run.run();
  ASSERT_GT(run.iterations(), 0);
  EXPECT_EQ(run.repack_version_triggers(), run.iterations());
}

TEST(Policies, ReplicaReinitIsLossless) {
  for (auto kind : {PolicyKind::Synchronous, PolicyKind::OneStep, PolicyKind::Stream,
                    PolicyKind::PartialRollout, PolicyKind::TrajectoryLevel}) {
    auto c = small(kind, 600.0);
    c.faults = {{100.0, FaultTarget::Replica, 2, FaultKind::Reinit}};
    Orchestrator run(c);
    run.run();
    EXPECT_EQ(named(run.metrics(), "recovery.replica_reinit").size(), 1u) << to_string(kind);
    EXPECT_GT(run.iterations(), 0) << to_string(kind);
    expect_lossless(run);
  }
}

TEST(Policies, EvictedMachineRedirectsToSameVersionReplica) {
  // Two replicas, one per machine: everything on machine 0 moves to replica 1.
  auto c = small(PolicyKind::TrajectoryLevel, 300.0);
  c.replicas.count = 2;
  c.replicas.per_machine = 1;
  c.trainer.global_batch = 16;
  c.faults = {{50.0, FaultTarget::Machine, 0, FaultKind::Evict}};
  Orchestrator run(c);
  run.run();
  const auto lost = named(run.metrics(), "recovery.partials");
  ASSERT_EQ(lost.size(), 1u);
  EXPECT_GT(lost[0].value, 0.0);
  const auto redirected = named(run.metrics(), "recovery.redirected");
  EXPECT_EQ(static_cast<double>(redirected.size()), lost[0].value);
  EXPECT_EQ(named(run.metrics(), "recovery.machine_replaced").size(), 1u);
  for (const auto& r : run.buffer().records()) EXPECT_EQ(r.segment_count, 1u);
  expect_lossless(run);
}

TEST(Policies, MachineAndRelayFaultsKeepTokens) {
  for (auto kind : {PolicyKind::PartialRollout, PolicyKind::TrajectoryLevel, PolicyKind::OneStep}) {
    auto c = small(kind, 700.0);
    c.faults = {{120.0, FaultTarget::Machine, 1, FaultKind::Evict},
                {300.0, FaultTarget::Relay, 0, FaultKind::Crash},
                {400.0, FaultTarget::Replica, 3, FaultKind::Reinit}};
    Orchestrator run(c);
    run.run();
    EXPECT_FALSE(named(run.metrics(), "relay.failure_detected").empty()) << to_string(kind);
    const auto& rebuilds = run.relay().rebuilds();
    EXPECT_TRUE(std::any_of(rebuilds.begin(), rebuilds.end(), [](const auto& r) { return r.master_changed; }))
        << to_string(kind);
    EXPECT_GT(run.iterations(), 3) << to_string(kind);
    expect_lossless(run);
  }
}

TEST(Policies, TrainerRestoresFromCheckpoint) {
  auto c = small(PolicyKind::TrajectoryLevel, 900.0);
  c.trainer.checkpoint_every = 3;
  c.faults = {{300.0, FaultTarget::Trainer, 0, FaultKind::Restore}};
  Orchestrator run(c);
  run.run();
  const auto versions = named(run.metrics(), "trainer.version");
  const auto restored = named(run.metrics(), "recovery.trainer_restored");
  ASSERT_EQ(restored.size(), 1u);
  EXPECT_DOUBLE_EQ(restored[0].t, 300.0 + c.trainer.recovery_latency);
  // Version just before the fault, and the value restored.
  double before = 0.0;
  for (const auto& s : versions) {
    if (s.t <= 300.0) before = s.value;
  }
  const double checkpoint = std::floor(before / 3.0) * 3.0;
  EXPECT_DOUBLE_EQ(restored[0].value, checkpoint);
  // Relays keep what they hold through the outage.
  for (const auto& s : run.metrics().samples()) {
    if (s.name.rfind("relay.", 0) == 0 && s.name.size() > 8 &&
        s.name.compare(s.name.size() - 8, 8, ".version") == 0 && s.t > 300.0 && s.t < restored[0].t) {
      EXPECT_LE(s.value, before);
    }
  }
  EXPECT_GT(run.trainer().current_version(), static_cast<Version>(before));
  expect_lossless(run);
}

TEST(Policies, ExhaustedRecoveryThrows) {
  auto c = small(PolicyKind::TrajectoryLevel, 300.0);
  c.replicas.count = 2;
  c.replicas.per_machine = 2;
  c.trainer.global_batch = 16;
  c.replicas.max_replacements = 0;
  c.faults = {{50.0, FaultTarget::Machine, 0, FaultKind::Evict}};
  Orchestrator run(c);
  EXPECT_THROW(run.run(), RecoveryExhausted);
}

TEST(Policies, BarrierIdlesMoreThanContinuous) {
  auto idle = [](PolicyKind kind) {
    Orchestrator run(small(kind, 600.0));
    run.run();
    double sum = 0.0;
    for (ReplicaId r = 0; r < 4; ++r) sum += bubble_fraction(run.metrics(), r, {60.0, 600.0});
    return sum / 4.0;
  };
  EXPECT_GT(idle(PolicyKind::Synchronous), idle(PolicyKind::TrajectoryLevel));
}

TEST(Policies, WrappersOverrideKind) {
  auto c = small(PolicyKind::TrajectoryLevel, 200.0);
  const auto log = run_synchronous(c);
  EXPECT_FALSE(log.iteration_marks().empty());
  for (const auto& s : log.samples()) {
    if (s.name == "traj.staleness") {
      ASSERT_EQ(s.value, 0.0);
    }
  }
}

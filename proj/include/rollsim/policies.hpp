#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "rollsim/datapool.hpp"
#include "rollsim/rollout.hpp"
#include "rollsim/scenario.hpp"
#include "rollsim/sim_relay.hpp"
#include "rollsim/simcore.hpp"
#include "rollsim/trainer.hpp"
#include "rollsim/workload.hpp"

namespace rollsim {

// Raised when a fault leaves nothing able to make progress (no healthy or
// recoverable replica, or an empty relay chain).
class RecoveryExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Token bookkeeping across faults. Every token ever decoded is either in a
// committed record or in a live partial.
struct Conservation {
  std::int64_t decoded = 0;          // tokens produced by decode steps
  std::int64_t in_trajectories = 0;  // sum of generated over all trajectories
  std::int64_t committed = 0;        // response tokens in the experience buffer
  std::int64_t partial = 0;          // tokens held in the partial pool
  bool exact() const { return decoded == in_trajectories && decoded == committed + partial; }
};

// One simulated experiment: replicas, trainer, data pools, relay tier and
// repack manager wired together under one execution policy.
class Orchestrator {
 public:
  explicit Orchestrator(ScenarioConfig config);
  Orchestrator(const Orchestrator&) = delete;
  Orchestrator& operator=(const Orchestrator&) = delete;
  ~Orchestrator();

  // Runs to the configured horizon. Throws RecoveryExhausted.
  const MetricsLog& run();

  const ScenarioConfig& config() const { return config_; }
  const MetricsLog& metrics() const { return engine_.metrics(); }
  const TrajectoryTable& trajectories() const { return table_; }
  const ExperienceBuffer& buffer() const { return buffer_; }
  const PartialPool& partials() const { return partials_; }
  const std::vector<Replica>& replicas() const { return replicas_; }
  const Trainer& trainer() const { return trainer_; }
  const SimRelayTier& relay() const { return *relay_; }
  Seconds now() const { return engine_.now(); }

  Conservation conservation() const;
  Seconds reprefill_total() const { return reprefill_total_; }
  std::int64_t interrupts() const { return interrupts_; }
  std::int64_t repack_events() const { return repack_events_; }
  std::int64_t repack_pairs() const { return repack_pairs_; }
  // Manager runs: periodic checks and runs fired by a trainer version bump.
  std::int64_t repack_ticks() const { return repack_ticks_; }
  std::int64_t repack_version_triggers() const { return repack_version_triggers_; }
  std::int64_t iterations() const { return static_cast<std::int64_t>(iteration_versions_.size()); }

 private:
  enum Recovery : std::int64_t { kReplicaReinit = 1, kMachineReplaced = 2, kTrainerRestored = 3 };
  enum Publish : std::int64_t { kPublishTick = 1 };

  struct ReplicaCtl {
    std::string state_metric;
    std::string kv_metric;
    std::string nreq_metric;
    std::string phase_metric;
    int last_activity = -1;
    std::uint64_t incarnation = 0;
    std::uint64_t step_token = 0;
    std::vector<TrajectoryId> step_batch;
    bool resume_pending = false;    // TransferDone scheduled
    bool waiting_relay = false;     // no acceptable version at the relay yet
    bool needs_load = false;        // fresh machine without weights
    bool on_dead_machine = false;
    std::optional<Version> interrupt_to;  // partial rollout
    std::vector<TrajectoryId> pending;    // assigned but not yet admitted
  };

  bool barrier_policy() const;
  bool continuous_policy() const { return !barrier_policy(); }
  int staleness_k() const;

  void on_event(const Event& e);
  void on_step_done(const Event& e);
  void on_env_return(TrajectoryId id);
  void on_pulled(const Event& e);
  void on_fault(std::size_t index);
  void on_recovery(const Event& e);
  void on_trainer_done(const Event& e);
  void on_publish(const Event& e);
  void on_sample();

  void kick(ReplicaId r);
  void replica_ready(ReplicaId r);
  void update_activity(ReplicaId r);
  void start_fetch(ReplicaId r, Version v, Seconds latency);
  // Newest acceptable version for `r` and its pull latency.
  std::optional<std::pair<Version, Seconds>> locate_newest(ReplicaId r) const;
  std::optional<Seconds> locate_version(ReplicaId r, Version v) const;
  Seconds remote_pull_latency() const;

  void draw_batch(ReplicaId r);
  TrajectoryId create_trajectory(const Prompt& p);
  void admit(ReplicaId r, TrajectoryId id);
  void commit(TrajectoryId id);

  bool serve_orphans(ReplicaId r);
  void orphan(TrajectoryId id, Version key);
  void place(TrajectoryId id, ReplicaId failed);
  std::optional<ReplicaId> least_loaded(std::optional<Version> version, ReplicaId exclude) const;
  void fail_replica(ReplicaId r);
  void check_exhaustion();

  void try_train();
  void try_start_round();
  void start_round();
  void apply_interrupt(ReplicaId r);
  void run_repack(bool periodic);
  void on_broadcast_done(Version v);

  ScenarioConfig config_;
  Engine engine_;
  ComponentId self_ = 0;
  TrajectoryTable table_;
  PartialPool partials_;
  ExperienceBuffer buffer_;
  Trainer trainer_;
  std::unique_ptr<SimRelayTier> relay_;
  PromptPool prompts_;
  std::vector<Replica> replicas_;
  std::vector<ReplicaCtl> ctl_;
  ReplicaSpec spec_;

  std::int64_t decoded_ = 0;
  std::int64_t trajectories_created_ = 0;
  Seconds reprefill_total_ = 0.0;
  std::int64_t interrupts_ = 0;
  std::int64_t repack_events_ = 0;
  std::int64_t repack_pairs_ = 0;
  std::int64_t repack_ticks_ = 0;
  std::int64_t repack_version_triggers_ = 0;
  std::int64_t replacements_used_ = 0;
  std::int64_t redirected_ = 0;
  std::int64_t version_fallbacks_ = 0;
  std::vector<int> env_calls_made_;  // per trajectory

  // Recovered partials with no same-version home, keyed by version.
  // Key -1 holds trajectories with no tokens yet (any version will do).
  std::map<Version, std::deque<TrajectoryId>> orphans_;

  // Trainer.
  std::uint64_t trainer_incarnation_ = 0;
  bool trainer_busy_ = false;
  bool trainer_publishing_ = false;
  std::vector<Version> iteration_versions_;
  std::optional<Version> last_published_;

  // Barrier policies (synchronous, one-step, stream).
  std::int64_t round_ = -1;
  std::int64_t round_outstanding_ = 0;
  Version round_version_ = 0;  // minimum version for the current round
  std::vector<std::int64_t> traj_round_;

  int recoveries_pending_ = 0;  // scheduled replica or machine recoveries
  std::set<MachineId> replacing_;
  bool started_ = false;
};

// Runs the scenario under one policy, overriding config.policy.kind.
MetricsLog run_synchronous(ScenarioConfig config);
MetricsLog run_one_step(ScenarioConfig config);
MetricsLog run_stream(ScenarioConfig config);
MetricsLog run_partial_rollout(ScenarioConfig config);
MetricsLog run_trajectory_level(ScenarioConfig config);

// Writes metrics.jsonl, timeline.csv, experience.jsonl and summary.json.
void write_outputs(const Orchestrator& run, const std::filesystem::path& dir);

}  // namespace rollsim

#include "rollsim/policies.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <utility>

#include "rollsim/repack.hpp"
#include "rollsim/summary.hpp"

namespace rollsim {

namespace {

ScenarioConfig validated(ScenarioConfig c) {
  c.validate();
  return c;
}

}  // namespace

Orchestrator::Orchestrator(ScenarioConfig config)
    : config_(validated(std::move(config))),
      buffer_(config_.buffer),
      trainer_(config_.trainer),
      prompts_(config_.workload.prompt_pool_size, config_.workload.cycle,
               config_.workload.group_size, config_.workload.prompt,
               RngStream(config_.seed, "workload.prompts")) {
  self_ = engine_.register_component([this](const Event& e) { on_event(e); });

  const auto& rp = config_.replicas;
  spec_.kv_capacity = rp.kv_capacity;
  spec_.decode = DecodeLatencyModel{rp.t_step, rp.roofline_batch, rp.overload_slope};
  spec_.c_max = config_.repack.c_max;
  spec_.prefill_per_token = config_.policy.kind == PolicyKind::PartialRollout
                                ? config_.policy.reprefill_per_token
                                : rp.prefill_per_token;

  replicas_.reserve(static_cast<std::size_t>(rp.count));
  ctl_.resize(static_cast<std::size_t>(rp.count));
  for (int r = 0; r < rp.count; ++r) {
    const auto id = static_cast<ReplicaId>(r);
    replicas_.emplace_back(id, static_cast<MachineId>(r / rp.per_machine), spec_);
    auto& c = ctl_[id];
    const std::string base = "replica." + std::to_string(r) + ".";
    c.state_metric = replica_state_metric(id);
    c.kv_metric = base + "kv";
    c.nreq_metric = base + "n_reqs";
    c.phase_metric = base + "phase";
  }

  std::vector<NodeId> order;
  for (int m = 0; m < rp.machines(); ++m) order.push_back(static_cast<NodeId>(m));
  relay_ = std::make_unique<SimRelayTier>(engine_, config_.relay, order);
  RelayListener listener;
  listener.on_complete = [this](NodeId, Version, Seconds) {
    for (ReplicaId r = 0; r < replicas_.size(); ++r) {
      if (ctl_[r].waiting_relay) kick(r);
    }
  };
  listener.on_broadcast_done = [this](Version v, Seconds) { on_broadcast_done(v); };
  listener.on_failure_detected = [this](NodeId n, Seconds) {
    engine_.record("relay.failure_detected", static_cast<double>(n));
  };
  listener.on_master_changed = [this](NodeId n) {
    engine_.record("relay.master_changed", static_cast<double>(n));
    if (last_published_ && relay_->publish(*last_published_)) {
      engine_.record("relay.republished", static_cast<double>(*last_published_));
    }
  };
  relay_->set_listener(std::move(listener));
}

Orchestrator::~Orchestrator() = default;

bool Orchestrator::barrier_policy() const {
  switch (config_.policy.kind) {
    case PolicyKind::Synchronous:
    case PolicyKind::OneStep:
    case PolicyKind::Stream:
      return true;
    default:
      return false;
  }
}

int Orchestrator::staleness_k() const {
  return config_.policy.kind == PolicyKind::Synchronous ? 0 : config_.policy.staleness_bound;
}

const MetricsLog& Orchestrator::run() {
  if (started_) throw std::logic_error("scenario already ran");
  started_ = true;

  // Version 0 is resident everywhere before the clock starts.
  relay_->publish(0);
  last_published_ = 0;

  for (std::size_t i = 0; i < config_.faults.size(); ++i) {
    EventPayload p;
    p.a = static_cast<std::int64_t>(i);
    engine_.schedule_at(config_.faults[i].time, EventKind::FaultInject, self_, p);
  }
  engine_.schedule_at(0.0, EventKind::MetricsSample, self_);
  if (config_.policy.repack_enabled) {
    engine_.schedule_at(config_.repack.period, EventKind::RepackTick, self_);
  }

  if (barrier_policy()) {
    try_start_round();
  } else {
    for (ReplicaId r = 0; r < replicas_.size(); ++r) kick(r);
  }
  engine_.run_until(config_.horizon);
  return engine_.metrics();
}

Conservation Orchestrator::conservation() const {
  Conservation c;
  c.decoded = decoded_;
  for (const auto& t : table_.rows()) c.in_trajectories += t.generated;
  for (const auto& r : buffer_.records()) c.committed += r.response_tokens;
  c.partial = partials_.total_tokens();
  return c;
}

// ---- events ---------------------------------------------------------------

void Orchestrator::on_event(const Event& e) {
  switch (e.kind) {
    case EventKind::DecodeStepComplete:
      on_step_done(e);
      break;
    case EventKind::EnvReturn:
      on_env_return(e.payload.a);
      break;
    case EventKind::WeightsPulled:
      on_pulled(e);
      break;
    case EventKind::FaultInject:
      on_fault(static_cast<std::size_t>(e.payload.a));
      break;
    case EventKind::RecoveryDone:
      on_recovery(e);
      break;
    case EventKind::TrainerMinibatchDone:
      on_trainer_done(e);
      break;
    case EventKind::WeightsPublished:
      on_publish(e);
      break;
    case EventKind::TransferDone: {
      const auto r = static_cast<ReplicaId>(e.payload.a);
      ctl_[r].resume_pending = false;
      kick(r);
      break;
    }
    case EventKind::RepackTick:
      if (e.payload.a == 0) {
        run_repack(true);
        engine_.schedule_in(config_.repack.period, EventKind::RepackTick, self_);
      } else {
        run_repack(false);
      }
      break;
    case EventKind::MetricsSample:
      on_sample();
      break;
    default:
      break;
  }
}

void Orchestrator::on_step_done(const Event& e) {
  const auto r = static_cast<ReplicaId>(e.payload.a);
  Replica& rep = replicas_[r];
  auto& c = ctl_[r];
  if (static_cast<std::uint64_t>(e.payload.c) != c.incarnation || !rep.step_in_flight() ||
      rep.step_token() != static_cast<std::uint64_t>(e.payload.b)) {
    return;  // aborted by repack or failure
  }
  StepResult res = rep.finish_step(table_, config_.workload.env);
  decoded_ += res.tokens;
  const Seconds now = engine_.now();
  for (TrajectoryId id : c.step_batch) {
    if (table_[id].state != TrajectoryState::Complete) partials_.stream_from(table_[id], r, now);
  }
  c.step_batch.clear();
  for (TrajectoryId id : res.env_calls) {
    RngStream rng(config_.seed, "workload.env",
                  static_cast<std::uint64_t>(id) * 64 +
                      static_cast<std::uint64_t>(env_calls_made_[static_cast<std::size_t>(id)]++));
    EventPayload p;
    p.a = id;
    engine_.schedule_in(sample_env_latency(config_.workload.env, rng), EventKind::EnvReturn, self_,
                        p);
  }
  for (TrajectoryId id : res.completed) commit(id);
  kick(r);
}

void Orchestrator::on_env_return(TrajectoryId id) {
  Trajectory& t = table_[id];
  t.awaiting_env = false;
  if (t.state == TrajectoryState::EnvWait) t.state = TrajectoryState::Decoding;
  if (!partials_.contains(id)) return;
  const auto& rec = partials_.get(id);
  if (!rec.owned) return;
  const ReplicaId r = rec.replica_id;
  if (!replicas_[r].failed()) kick(r);
}

void Orchestrator::on_pulled(const Event& e) {
  const auto r = static_cast<ReplicaId>(e.payload.a);
  auto& c = ctl_[r];
  if (static_cast<std::uint64_t>(e.payload.c) != c.incarnation) return;
  Replica& rep = replicas_[r];
  const Version v = e.payload.b;
  rep.set_fetching(false);
  rep.set_weight_version(v);
  c.needs_load = false;

  if (c.interrupt_to && v >= *c.interrupt_to) {
    // Resident trajectories continue under the new weights and rebuild
    // their KV cache first.
    std::vector<TrajectoryId> ids(rep.active().begin(), rep.active().end());
    ids.insert(ids.end(), rep.waiting().begin(), rep.waiting().end());
    for (TrajectoryId id : ids) {
      Trajectory& t = table_[id];
      if (t.generated > 0) {
        t.prefill_debt = std::max(t.prefill_debt, t.generated);
        reprefill_total_ += static_cast<double>(t.generated) * config_.policy.reprefill_per_token;
        ++interrupts_;
      }
      t.start_segment(v);
      partials_.stream_from(t, r, engine_.now());
    }
    c.interrupt_to.reset();
    engine_.record("partial.reprefill_s", reprefill_total_);
  }
  kick(r);
}

void Orchestrator::on_fault(std::size_t index) {
  const FaultSpec& f = config_.faults[index];
  const Seconds now = engine_.now();
  switch (f.target) {
    case FaultTarget::Replica: {
      const auto r = static_cast<ReplicaId>(f.id);
      if (replicas_[r].failed()) break;
      engine_.record("fault.replica", f.id);
      fail_replica(r);
      EventPayload p;
      p.a = kReplicaReinit;
      p.b = r;
      p.c = static_cast<std::int64_t>(ctl_[r].incarnation);
      ++recoveries_pending_;
      engine_.schedule_at(now + config_.replicas.reinit_latency, EventKind::RecoveryDone, self_, p);
      break;
    }
    case FaultTarget::Machine: {
      const auto m = static_cast<MachineId>(f.id);
      engine_.record("fault.machine", f.id);
      for (ReplicaId r = 0; r < replicas_.size(); ++r) {
        if (replicas_[r].machine() != m) continue;
        ctl_[r].on_dead_machine = true;
        if (!replicas_[r].failed()) fail_replica(r);
      }
      if (relay_->alive(m)) relay_->fail_node(m);
      const int budget = config_.replicas.max_replacements;
      if (budget < 0 || replacements_used_ < budget) {
        ++replacements_used_;
        ++recoveries_pending_;
        replacing_.insert(m);
        EventPayload p;
        p.a = kMachineReplaced;
        p.b = m;
        engine_.schedule_at(now + config_.replicas.replacement_delay, EventKind::RecoveryDone, self_,
                            p);
      }
      break;
    }
    case FaultTarget::Relay: {
      const auto n = static_cast<NodeId>(f.id);
      engine_.record("fault.relay", f.id);
      if (relay_->alive(n)) relay_->fail_node(n);
      break;
    }
    case FaultTarget::Trainer: {
      if (trainer_.failed()) break;
      engine_.record("fault.trainer", 0.0);
      trainer_.fail(buffer_);
      ++trainer_incarnation_;
      trainer_busy_ = false;
      trainer_publishing_ = false;
      EventPayload p;
      p.a = kTrainerRestored;
      engine_.schedule_at(now + config_.trainer.recovery_latency, EventKind::RecoveryDone, self_,
                          p);
      break;
    }
  }
  check_exhaustion();
}

void Orchestrator::on_recovery(const Event& e) {
  switch (e.payload.a) {
    case kReplicaReinit: {
      --recoveries_pending_;
      const auto r = static_cast<ReplicaId>(e.payload.b);
      auto& c = ctl_[r];
      // A machine eviction after the reinit was scheduled takes precedence.
      if (static_cast<std::uint64_t>(e.payload.c) != c.incarnation || c.on_dead_machine) break;
      if (replicas_[r].failed()) replicas_[r].reinit();
      engine_.record("recovery.replica_reinit", r);
      kick(r);
      break;
    }
    case kMachineReplaced: {
      --recoveries_pending_;
      const auto m = static_cast<MachineId>(e.payload.b);
      replacing_.erase(m);
      relay_->join_node(m);
      engine_.record("recovery.machine_replaced", m);
      for (ReplicaId r = 0; r < replicas_.size(); ++r) {
        if (replicas_[r].machine() != m) continue;
        auto& c = ctl_[r];
        c.on_dead_machine = false;
        c.needs_load = true;
        ++c.incarnation;
        if (replicas_[r].failed()) replicas_[r].reinit();
      }
      for (ReplicaId r = 0; r < replicas_.size(); ++r) {
        if (replicas_[r].machine() == m) kick(r);
      }
      break;
    }
    case kTrainerRestored: {
      const Version v = trainer_.restore();
      engine_.record("recovery.trainer_restored", static_cast<double>(v));
      engine_.record("trainer.version", static_cast<double>(v));
      try_train();
      break;
    }
    default:
      break;
  }
}

void Orchestrator::on_trainer_done(const Event& e) {
  if (static_cast<std::uint64_t>(e.payload.a) != trainer_incarnation_) return;
  trainer_busy_ = false;
  IterationDone done;
  if (!trainer_.finish_minibatch(&done)) {
    try_train();
    return;
  }
  const Seconds now = engine_.now();
  engine_.metrics().mark_iteration(now, done.tokens);
  engine_.record("trainer.version", static_cast<double>(done.version));
  if (done.checkpointed) engine_.record("trainer.checkpoint", static_cast<double>(done.version));
  iteration_versions_.push_back(done.version);

  // The trainer is blocked while the weights go out to the relay master.
  trainer_publishing_ = true;
  EventPayload p;
  p.a = kPublishTick;
  p.b = done.version;
  p.c = static_cast<std::int64_t>(trainer_incarnation_);
  engine_.schedule_in(Trainer::publish_stall(config_.actor_link), EventKind::WeightsPublished, self_,
                      p);

  if (config_.policy.repack_enabled) {
    EventPayload tick;
    tick.a = 1;
    engine_.schedule_at(now, EventKind::RepackTick, self_, tick);
  }
  try_start_round();
}

void Orchestrator::on_publish(const Event& e) {
  if (static_cast<std::uint64_t>(e.payload.c) != trainer_incarnation_) return;
  trainer_publishing_ = false;
  const Version v = e.payload.b;
  if (relay_->publish(v)) {
    last_published_ = v;
    engine_.record("trainer.published", static_cast<double>(v));
  } else {
    engine_.record("trainer.publish_rejected", static_cast<double>(v));
  }
  try_train();
}

void Orchestrator::on_sample() {
  const Seconds now = engine_.now();
  for (ReplicaId r = 0; r < replicas_.size(); ++r) {
    const auto [c, phase] = replicas_[r].kv_utilization();
    engine_.record(ctl_[r].kv_metric, c);
    engine_.record(ctl_[r].nreq_metric, replicas_[r].n_reqs());
    engine_.record(ctl_[r].phase_metric, static_cast<double>(phase));
  }
  engine_.record("gen.tokens_total", static_cast<double>(decoded_));
  engine_.record("buffer.available", static_cast<double>(buffer_.available()));
  engine_.record("partial.tokens", static_cast<double>(partials_.total_tokens()));
  const Seconds next = now + config_.metrics.sample_period;
  if (next <= config_.horizon) engine_.schedule_at(next, EventKind::MetricsSample, self_);
}

// ---- replica driving ------------------------------------------------------

void Orchestrator::kick(ReplicaId r) {
  Replica& rep = replicas_[r];
  auto& c = ctl_[r];
  if (rep.failed() || rep.fetching() || rep.step_in_flight()) {
    update_activity(r);
    return;
  }
  if (rep.paused_until() > engine_.now()) {
    if (!c.resume_pending) {
      c.resume_pending = true;
      EventPayload p;
      p.a = r;
      engine_.schedule_at(rep.paused_until(), EventKind::TransferDone, self_, p);
    }
    update_activity(r);
    return;
  }
  if (c.interrupt_to) apply_interrupt(r);
  if (!rep.fetching() && rep.n_reqs() == 0) replica_ready(r);
  if (rep.can_step(table_)) {
    StepPlan plan = rep.begin_step(table_);
    c.step_batch = std::move(plan.batch);
    EventPayload p;
    p.a = r;
    p.b = static_cast<std::int64_t>(rep.step_token());
    p.c = static_cast<std::int64_t>(c.incarnation);
    engine_.schedule_in(plan.latency, EventKind::DecodeStepComplete, self_, p);
  }
  update_activity(r);
}

void Orchestrator::replica_ready(ReplicaId r) {
  Replica& rep = replicas_[r];
  auto& c = ctl_[r];
  c.waiting_relay = false;
  if (serve_orphans(r)) return;

  if (barrier_policy()) {
    if (c.pending.empty()) return;
    auto newest = locate_newest(r);
    if (!newest || newest->first < round_version_) {
      c.waiting_relay = true;
      return;
    }
    if (newest->first != rep.weight_version() || c.needs_load) {
      start_fetch(r, newest->first, newest->second);
      return;
    }
    auto ids = std::move(c.pending);
    c.pending.clear();
    rep.set_c_prev(0.0);
    for (TrajectoryId id : ids) admit(r, id);
    return;
  }

  auto newest = locate_newest(r);
  if (!newest) {
    c.waiting_relay = true;
    return;
  }
  if (newest->first > rep.weight_version() || c.needs_load) {
    start_fetch(r, newest->first, newest->second);
    return;
  }
  draw_batch(r);
}

void Orchestrator::update_activity(ReplicaId r) {
  const int code = static_cast<int>(replicas_[r].activity(table_));
  auto& c = ctl_[r];
  if (code != c.last_activity) {
    c.last_activity = code;
    engine_.record(c.state_metric, code);
  }
}

void Orchestrator::start_fetch(ReplicaId r, Version v, Seconds latency) {
  replicas_[r].set_fetching(true);
  EventPayload p;
  p.a = r;
  p.b = v;
  p.c = static_cast<std::int64_t>(ctl_[r].incarnation);
  engine_.schedule_in(latency, EventKind::WeightsPulled, self_, p);
  update_activity(r);
}

Seconds Orchestrator::remote_pull_latency() const {
  const auto& rc = relay_->config();
  return rc.shard_bytes * rc.t_byte + rc.t_start;
}

std::optional<std::pair<Version, Seconds>> Orchestrator::locate_newest(ReplicaId r) const {
  const NodeId own = replicas_[r].machine();
  if (relay_->alive(own)) {
    // A fresh node catches up from its predecessor; wait for it.
    if (auto v = relay_->newest_complete(own)) return std::make_pair(*v, relay_->pull_latency());
    if (relay_->topology().contains(own)) return std::nullopt;
  }
  for (NodeId n : relay_->topology().order()) {
    if (!relay_->alive(n)) continue;
    if (auto v = relay_->newest_complete(n)) return std::make_pair(*v, remote_pull_latency());
  }
  return std::nullopt;
}

std::optional<Seconds> Orchestrator::locate_version(ReplicaId r, Version v) const {
  const NodeId own = replicas_[r].machine();
  if (relay_->alive(own) && relay_->holds_complete(own, v)) return relay_->pull_latency();
  for (NodeId n : relay_->topology().order()) {
    if (relay_->alive(n) && relay_->holds_complete(n, v)) return remote_pull_latency();
  }
  return std::nullopt;
}

void Orchestrator::draw_batch(ReplicaId r) {
  PromptBatch batch = prompts_.next_prompts(config_.replicas.prompts_per_batch);
  if (batch.prompts.empty()) {
    if (batch.end_of_data) engine_.record("workload.end_of_data", r);
    return;
  }
  replicas_[r].set_c_prev(0.0);
  for (const Prompt& p : batch.prompts) {
    for (int g = 0; g < config_.workload.group_size; ++g) admit(r, create_trajectory(p));
  }
}

TrajectoryId Orchestrator::create_trajectory(const Prompt& p) {
  // Lengths are keyed by creation ordinal so every policy sees the same draws.
  const auto ordinal = static_cast<std::uint64_t>(trajectories_created_++);
  RngStream rng(config_.seed, "workload.length", ordinal);
  const std::int64_t len = sample_length(config_.workload.response, rng);
  const int calls = env_calls_for(config_.workload.env, len);
  const TrajectoryId id = table_.create(p.id, p.prompt_tokens, len, calls, engine_.now());
  env_calls_made_.push_back(0);
  traj_round_.push_back(round_);
  return id;
}

void Orchestrator::admit(ReplicaId r, TrajectoryId id) {
  replicas_[r].admit(table_, id);
  partials_.stream_from(table_[id], r, engine_.now());
}

void Orchestrator::commit(TrajectoryId id) {
  Trajectory& t = table_[id];
  const Seconds now = engine_.now();
  t.completion_time = now;
  auto res = buffer_.commit_complete(t, trainer_.current_version(), now, partials_);
  t.staleness = res.record.staleness;
  engine_.record("traj.staleness", static_cast<double>(res.record.staleness));
  engine_.record("traj.latency", now - t.dispatch_time);
  engine_.record("traj.segments", static_cast<double>(t.version_segments.size()));
  if (barrier_policy() && traj_round_[static_cast<std::size_t>(id)] == round_) {
    --round_outstanding_;
  }
  try_train();
  if (barrier_policy() && round_outstanding_ == 0) try_start_round();
}

// ---- faults ---------------------------------------------------------------

void Orchestrator::orphan(TrajectoryId id, Version key) {
  orphans_[key].push_back(id);
  engine_.record("recovery.queued", static_cast<double>(id));
}

bool Orchestrator::serve_orphans(ReplicaId r) {
  if (orphans_.empty()) return false;
  Replica& rep = replicas_[r];
  auto& c = ctl_[r];
  if (c.needs_load) {
    // Load weights first; zero-token work can join the round queue.
    if (barrier_policy()) {
      auto it = orphans_.find(-1);
      if (it != orphans_.end()) {
        c.pending.insert(c.pending.end(), it->second.begin(), it->second.end());
        for (TrajectoryId id : it->second) partials_.set_owner(id, r);
        orphans_.erase(it);
      }
    }
    return false;
  }

  auto take = [&](std::map<Version, std::deque<TrajectoryId>>::iterator it, bool fresh) {
    rep.set_c_prev(0.0);
    for (TrajectoryId id : it->second) {
      Trajectory& t = table_[id];
      if (fresh) {
        t.version_segments.clear();
      } else {
        t.start_segment(rep.weight_version());
        t.prefill_debt = t.kv_tokens();
      }
      admit(r, id);
    }
    orphans_.erase(it);
  };

  if (auto it = orphans_.find(rep.weight_version()); it != orphans_.end()) {
    take(it, false);
    return true;
  }
  if (auto it = orphans_.find(-1); it != orphans_.end()) {
    if (barrier_policy()) {
      c.pending.insert(c.pending.end(), it->second.begin(), it->second.end());
      for (TrajectoryId id : it->second) partials_.set_owner(id, r);
      orphans_.erase(it);
      return false;
    }
    take(it, true);
    return true;
  }
  for (auto& [v, q] : orphans_) {
    if (auto lat = locate_version(r, v)) {
      start_fetch(r, v, *lat);
      return true;
    }
  }
  // Nobody can serve the recorded version any more: continue under this
  // replica's weights as a new segment.
  for (auto it = orphans_.begin(); it != orphans_.end(); ++it) {
    const Version v = it->first;
    bool served = false;
    for (const auto& other : replicas_) {
      if (!other.failed() && other.weight_version() == v) served = true;
    }
    if (served) continue;
    version_fallbacks_ += static_cast<std::int64_t>(it->second.size());
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      engine_.record("recovery.version_fallback", static_cast<double>(v));
    }
    take(it, false);
    return true;
  }
  return false;
}

std::optional<ReplicaId> Orchestrator::least_loaded(std::optional<Version> version,
                                                    ReplicaId exclude) const {
  std::optional<ReplicaId> best;
  std::size_t best_load = std::numeric_limits<std::size_t>::max();
  for (ReplicaId r = 0; r < replicas_.size(); ++r) {
    const Replica& rep = replicas_[r];
    if (r == exclude || rep.failed() || rep.fetching() || ctl_[r].needs_load) continue;
    if (version && rep.weight_version() != *version) continue;
    const std::size_t load = static_cast<std::size_t>(rep.n_reqs()) + ctl_[r].pending.size();
    if (load < best_load) {
      best_load = load;
      best = r;
    }
  }
  return best;
}

void Orchestrator::place(TrajectoryId id, ReplicaId failed) {
  Trajectory& t = table_[id];
  const bool started = t.generated > 0;
  if (!started) t.version_segments.clear();
  std::optional<Version> need;
  if (started && config_.policy.kind != PolicyKind::PartialRollout) need = t.current_version();

  auto dst = least_loaded(need, failed);
  if (!dst) {
    orphan(id, started ? t.current_version() : -1);
    return;
  }
  Replica& d = replicas_[*dst];
  auto& dc = ctl_[*dst];
  if (!started && barrier_policy() &&
      (!dc.pending.empty() || dc.waiting_relay || d.weight_version() < round_version_)) {
    dc.pending.push_back(id);
    partials_.set_owner(id, *dst);
    return;
  }
  if (started) {
    t.start_segment(d.weight_version());
    t.prefill_debt = t.kv_tokens();
  }
  ++redirected_;
  engine_.record("recovery.redirected", static_cast<double>(*dst));
  admit(*dst, id);
}

void Orchestrator::fail_replica(ReplicaId r) {
  Replica& rep = replicas_[r];
  auto& c = ctl_[r];
  ++c.incarnation;
  std::vector<TrajectoryId> lost;
  rep.fail(table_, &lost);
  c.step_batch.clear();
  c.interrupt_to.reset();
  c.waiting_relay = false;
  c.pending.clear();
  auto recovered = partials_.recover_partials(r);
  engine_.record("recovery.partials", static_cast<double>(recovered.size()));
  for (const auto& rec : recovered) place(rec.trajectory_id, r);
  update_activity(r);
  for (ReplicaId d = 0; d < replicas_.size(); ++d) {
    if (d != r && !replicas_[d].failed()) kick(d);
  }
}

void Orchestrator::check_exhaustion() {
  bool healthy = false;
  for (const auto& rep : replicas_) healthy = healthy || !rep.failed();
  if (!healthy && recoveries_pending_ == 0) {
    throw RecoveryExhausted("no healthy or recoverable rollout replica remains");
  }
  bool relay_alive = false;
  for (NodeId n = 0; n < static_cast<NodeId>(config_.replicas.machines()); ++n) {
    relay_alive = relay_alive || relay_->alive(n);
  }
  if (!relay_alive && replacing_.empty()) {
    throw RecoveryExhausted("relay chain is empty and no replacement is pending");
  }
}

// ---- trainer and rounds ---------------------------------------------------

void Orchestrator::try_train() {
  if (trainer_.failed() || trainer_busy_ || trainer_publishing_) return;
  const Seconds dur = config_.policy.kind == PolicyKind::Stream ? trainer_.begin_minibatch(buffer_)
                                                                : trainer_.train_iteration(buffer_);
  if (dur < 0.0) return;
  trainer_busy_ = true;
  EventPayload p;
  p.a = static_cast<std::int64_t>(trainer_incarnation_);
  engine_.schedule_in(dur, EventKind::TrainerMinibatchDone, self_, p);
}

void Orchestrator::try_start_round() {
  if (!barrier_policy()) return;
  if (round_ >= 0 && round_outstanding_ > 0) return;
  const std::int64_t next = round_ + 1;
  const std::int64_t need = next - staleness_k();
  if (need > iterations()) return;
  round_version_ = need <= 0 ? 0 : iteration_versions_[static_cast<std::size_t>(need - 1)];
  start_round();
}

void Orchestrator::start_round() {
  ++round_;
  round_outstanding_ = 0;
  engine_.record("round.start", static_cast<double>(round_));
  std::vector<ReplicaId> healthy;
  for (ReplicaId r = 0; r < replicas_.size(); ++r) {
    if (!replicas_[r].failed() && !ctl_[r].on_dead_machine) healthy.push_back(r);
  }
  const int ppb = config_.replicas.prompts_per_batch;
  PromptBatch batch = prompts_.next_prompts(static_cast<std::int64_t>(config_.replicas.count) * ppb);
  if (batch.prompts.empty()) {
    engine_.record("workload.end_of_data", static_cast<double>(round_));
    return;
  }
  const Seconds now = engine_.now();
  for (std::size_t i = 0; i < batch.prompts.size(); ++i) {
    for (int g = 0; g < config_.workload.group_size; ++g) {
      const TrajectoryId id = create_trajectory(batch.prompts[i]);
      ++round_outstanding_;
      if (healthy.empty()) {
        partials_.stream_partial(PartialRecord{id, 0, 0, {}, now, false});
        orphan(id, -1);
        continue;
      }
      const ReplicaId r = healthy[(i / static_cast<std::size_t>(ppb)) % healthy.size()];
      ctl_[r].pending.push_back(id);
      partials_.stream_from(table_[id], r, now);
    }
  }
  for (ReplicaId r : healthy) kick(r);
}

void Orchestrator::apply_interrupt(ReplicaId r) {
  Replica& rep = replicas_[r];
  auto& c = ctl_[r];
  const Version v = *c.interrupt_to;
  if (rep.weight_version() >= v || rep.n_reqs() == 0) {
    c.interrupt_to.reset();
    return;
  }
  auto lat = locate_version(r, v);
  if (!lat) {
    auto newest = locate_newest(r);
    if (!newest || newest->first < v) {
      c.interrupt_to.reset();
      return;
    }
    c.interrupt_to = newest->first;
    lat = newest->second;
  }
  start_fetch(r, *c.interrupt_to, *lat);
}

void Orchestrator::on_broadcast_done(Version v) {
  if (config_.policy.kind == PolicyKind::PartialRollout) {
    for (ReplicaId r = 0; r < replicas_.size(); ++r) {
      Replica& rep = replicas_[r];
      if (rep.failed() || rep.weight_version() >= v || rep.n_reqs() == 0) continue;
      auto& c = ctl_[r];
      c.interrupt_to = std::max(c.interrupt_to.value_or(v), v);
      kick(r);
    }
  }
  for (ReplicaId r = 0; r < replicas_.size(); ++r) {
    if (ctl_[r].waiting_relay) kick(r);
  }
}

void Orchestrator::run_repack(bool periodic) {
  if (!config_.policy.repack_enabled) return;
  ++(periodic ? repack_ticks_ : repack_version_triggers_);
  const double c_max = config_.repack.c_max;
  const int b = config_.replicas.roofline_batch;
  std::vector<const Replica*> live;
  for (const auto& rep : replicas_) {
    if (!rep.failed() && !rep.fetching()) live.push_back(&rep);
  }
  std::set<ReplicaId> touched;
  std::int64_t pairs = 0, moved = 0;
  for (const auto& [v, group] : collect_and_group(live)) {
    auto candidates = select_candidates(group, c_max, b);
    if (candidates.size() < 2) continue;
    RepackPlan plan = plan_consolidation(candidates, c_max, b);
    if (plan.empty()) continue;
    ExecuteResult res =
        execute(plan, replicas_, table_, c_max, engine_.now(), config_.repack.transfer_overhead);
    for (const auto& pair : res.executed) {
      ++pairs;
      moved += static_cast<std::int64_t>(pair.moved.size());
      for (TrajectoryId id : pair.moved) partials_.set_owner(id, pair.dest);
      ctl_[pair.source].step_batch.clear();
      ctl_[pair.dest].step_batch.clear();
      touched.insert(pair.source);
      touched.insert(pair.dest);
    }
  }
  if (pairs > 0) {
    ++repack_events_;
    repack_pairs_ += pairs;
    engine_.record("repack.pairs", static_cast<double>(pairs));
    engine_.record("repack.moved", static_cast<double>(moved));
  }
  if (periodic) {
    for (ReplicaId r = 0; r < replicas_.size(); ++r) {
      if (!replicas_[r].failed() && !touched.count(r)) replicas_[r].sample_c_prev();
    }
  }
  for (ReplicaId r : touched) kick(r);
}

// ---- entry points ---------------------------------------------------------

namespace {

MetricsLog run_as(ScenarioConfig config, PolicyKind kind) {
  config.policy.kind = kind;
  if (kind != PolicyKind::TrajectoryLevel) config.policy.repack_enabled = false;
  Orchestrator o(std::move(config));
  return o.run();
}

}  // namespace

MetricsLog run_synchronous(ScenarioConfig config) {
  return run_as(std::move(config), PolicyKind::Synchronous);
}
MetricsLog run_one_step(ScenarioConfig config) {
  return run_as(std::move(config), PolicyKind::OneStep);
}
MetricsLog run_stream(ScenarioConfig config) { return run_as(std::move(config), PolicyKind::Stream); }
MetricsLog run_partial_rollout(ScenarioConfig config) {
  return run_as(std::move(config), PolicyKind::PartialRollout);
}
MetricsLog run_trajectory_level(ScenarioConfig config) {
  return run_as(std::move(config), PolicyKind::TrajectoryLevel);
}

void write_outputs(const Orchestrator& run, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const MetricsLog& log = run.metrics();
  {
    std::ofstream os(dir / "metrics.jsonl");
    log.write_jsonl(os);
  }
  {
    // One row per replica per sample: kv, n_reqs and phase are recorded
    // back to back in that order.
    std::ofstream os(dir / "timeline.csv");
    os << "t,replica,c_used,n_reqs,phase\n";
    const auto n = run.replicas().size();
    std::vector<double> kv(n, 0.0), nreq(n, 0.0);
    for (const auto& s : log.samples()) {
      const std::string_view name = s.name;
      if (name.substr(0, 8) != "replica.") continue;
      const auto dot = name.find('.', 8);
      if (dot == std::string_view::npos) continue;
      const auto id = static_cast<std::size_t>(std::stoul(std::string(name.substr(8, dot - 8))));
      const auto field = name.substr(dot + 1);
      if (id >= n) continue;
      if (field == "kv") {
        kv[id] = s.value;
      } else if (field == "n_reqs") {
        nreq[id] = s.value;
      } else if (field == "phase") {
        os << s.t << ',' << id << ',' << kv[id] << ',' << nreq[id] << ','
           << to_string(static_cast<ReplicaPhase>(static_cast<int>(s.value))) << '\n';
      }
    }
  }
  {
    std::ofstream os(dir / "experience.jsonl");
    run.buffer().write_jsonl(os);
  }
  {
    std::ofstream os(dir / "summary.json");
    os << to_json(summarize(log, {run.config().metrics.steady_start, run.config().horizon})) << '\n';
  }
}

}  // namespace rollsim

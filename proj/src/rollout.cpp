#include "rollsim/rollout.hpp"

#include <algorithm>
#include <stdexcept>

namespace rollsim {

void Trajectory::start_segment(Version v) {
  if (version_segments.empty() || version_segments.back().version != v) {
    if (!version_segments.empty() && version_segments.back().tokens == 0) {
      version_segments.back().version = v;
    } else {
      version_segments.push_back(VersionSegment{v, 0});
    }
  }
}

void Trajectory::add_token() {
  ++generated;
  ++version_segments.back().tokens;
}

TrajectoryId TrajectoryTable::create(PromptId prompt, std::int64_t prompt_tokens,
                                     std::int64_t target_len, int env_calls,
                                     Seconds dispatch_time) {
  Trajectory t;
  t.id = static_cast<TrajectoryId>(rows_.size());
  t.prompt_id = prompt;
  t.prompt_tokens = prompt_tokens;
  t.target_len = target_len;
  t.env_calls_remaining = env_calls;
  t.dispatch_time = dispatch_time;
  rows_.push_back(std::move(t));
  return rows_.back().id;
}

Seconds DecodeLatencyModel::latency(int batch) const {
  if (batch <= roofline_batch) return t_step;
  return t_step * (1.0 + overload_slope * static_cast<double>(batch - roofline_batch) /
                             static_cast<double>(roofline_batch));
}

void DecodeLatencyModel::validate() const {
  if (!(t_step > 0.0)) throw std::invalid_argument("t_step must be > 0");
  if (roofline_batch < 1) throw std::invalid_argument("roofline batch must be >= 1");
  if (!(overload_slope >= 0.0)) throw std::invalid_argument("overload_slope must be >= 0");
}

const char* to_string(ReplicaPhase phase) {
  switch (phase) {
    case ReplicaPhase::RampUp: return "ramp-up";
    case ReplicaPhase::Steady: return "steady";
    case ReplicaPhase::RampDown: return "ramp-down";
    case ReplicaPhase::Idle: return "idle";
    case ReplicaPhase::FetchingWeights: return "fetching-weights";
    case ReplicaPhase::Failed: return "failed";
  }
  return "unknown";
}

Replica::Replica(ReplicaId id, MachineId machine, ReplicaSpec spec)
    : id_(id), machine_(machine), spec_(spec) {
  spec_.decode.validate();
  if (spec_.kv_capacity < 1) throw std::invalid_argument("kv_capacity must be >= 1");
}

void Replica::activate(TrajectoryTable& table, TrajectoryId id) {
  Trajectory& t = table[id];
  t.start_segment(t.version_segments.empty() ? version_ : t.current_version());
  t.state = t.awaiting_env ? TrajectoryState::EnvWait : TrajectoryState::Decoding;
  occupancy_ += t.kv_tokens();
  active_.push_back(id);
}

void Replica::admit(TrajectoryTable& table, TrajectoryId id) {
  if (failed_) throw std::logic_error("admit on a failed replica");
  Trajectory& t = table[id];
  if (t.version_segments.empty()) t.start_segment(version_);
  t.state = TrajectoryState::Waiting;
  waiting_.push_back(id);
  admit_from_waiting(table);
}

void Replica::admit_from_waiting(TrajectoryTable& table) {
  while (!waiting_.empty() &&
         static_cast<int>(active_.size()) < spec_.decode.roofline_batch &&
         occupancy_ + table[waiting_.front()].kv_tokens() <= spec_.kv_capacity) {
    TrajectoryId id = waiting_.front();
    waiting_.pop_front();
    activate(table, id);
  }
}

int Replica::decoding_count(const TrajectoryTable& table) const {
  int n = 0;
  for (TrajectoryId id : active_) n += table[id].state == TrajectoryState::Decoding ? 1 : 0;
  return n;
}

bool Replica::can_step(const TrajectoryTable& table) const {
  return !failed_ && !fetching_ && !step_in_flight_ && decoding_count(table) > 0;
}

void Replica::remove_active(TrajectoryTable& table, std::size_t index) {
  occupancy_ -= table[active_[index]].kv_tokens();
  active_.erase(active_.begin() + static_cast<std::ptrdiff_t>(index));
}

StepPlan Replica::begin_step(TrajectoryTable& table) {
  if (failed_) throw std::logic_error("decode step on a failed replica");
  if (step_in_flight_) throw std::logic_error("decode step already in flight");
  StepPlan plan;
  int decoding = decoding_count(table);
  if (decoding == 0) throw std::logic_error("decode step with nothing to decode");

  // Preempt newest admissions until one more token per decoding trajectory fits.
  while (occupancy_ + decoding > spec_.kv_capacity) {
    if (active_.size() <= 1) {
      throw std::logic_error("single trajectory exceeds KV capacity");
    }
    const std::size_t victim = active_.size() - 1;
    const TrajectoryId id = active_[victim];
    Trajectory& t = table[id];
    if (t.state == TrajectoryState::Decoding) --decoding;
    remove_active(table, victim);
    t.state = TrajectoryState::Waiting;
    t.prefill_debt = t.kv_tokens();
    waiting_.push_front(id);
    plan.preempted.push_back(id);
    if (decoding == 0) throw std::logic_error("preemption emptied the decode batch");
  }

  step_batch_.clear();
  for (TrajectoryId id : active_) {
    Trajectory& t = table[id];
    if (t.state != TrajectoryState::Decoding) continue;
    step_batch_.push_back(id);
    plan.prefill_tokens += t.prefill_debt;
    t.prefill_debt = 0;
  }
  plan.batch = step_batch_;
  plan.latency = spec_.decode.latency(static_cast<int>(step_batch_.size())) +
                 static_cast<double>(plan.prefill_tokens) * spec_.prefill_per_token;
  step_in_flight_ = true;
  return plan;
}

StepResult Replica::finish_step(TrajectoryTable& table, const EnvLatencyModel& env) {
  if (!step_in_flight_) throw std::logic_error("finish_step without a step in flight");
  step_in_flight_ = false;
  ++step_token_;
  StepResult result;
  for (TrajectoryId id : step_batch_) {
    Trajectory& t = table[id];
    if (t.state != TrajectoryState::Decoding) continue;
    t.add_token();
    ++occupancy_;
    ++result.tokens;
    if (t.done()) {
      result.completed.push_back(id);
    } else if (t.env_calls_remaining > 0 && env.kind != EnvLatencyKind::None &&
               t.generated % env.tokens_between_calls == 0) {
      --t.env_calls_remaining;
      t.awaiting_env = true;
      t.state = TrajectoryState::EnvWait;
      result.env_calls.push_back(id);
    }
  }
  if (!result.completed.empty()) {
    for (TrajectoryId id : result.completed) {
      auto it = std::find(active_.begin(), active_.end(), id);
      remove_active(table, static_cast<std::size_t>(it - active_.begin()));
      table[id].state = TrajectoryState::Complete;
    }
  }
  step_batch_.clear();
  admit_from_waiting(table);
  return result;
}

void Replica::abort_step() {
  if (!step_in_flight_) return;
  step_in_flight_ = false;
  ++step_token_;
  step_batch_.clear();
}

Seconds Replica::decode_step(TrajectoryTable& table, const EnvLatencyModel& env, StepResult* out) {
  StepPlan plan = begin_step(table);
  StepResult r = finish_step(table, env);
  if (out) *out = std::move(r);
  return plan.latency;
}

void Replica::env_return(TrajectoryTable& table, TrajectoryId id) {
  Trajectory& t = table[id];
  t.awaiting_env = false;
  if (t.state == TrajectoryState::EnvWait) t.state = TrajectoryState::Decoding;
}

std::vector<TrajectoryId> Replica::release_all(TrajectoryTable& table) {
  abort_step();
  std::vector<TrajectoryId> out;
  out.reserve(active_.size() + waiting_.size());
  for (TrajectoryId id : active_) out.push_back(id);
  for (TrajectoryId id : waiting_) out.push_back(id);
  for (TrajectoryId id : out) table[id].state = TrajectoryState::Waiting;
  active_.clear();
  waiting_.clear();
  occupancy_ = 0;
  return out;
}

void Replica::fail(TrajectoryTable& table, std::vector<TrajectoryId>* lost) {
  if (failed_) throw std::logic_error("replica already failed");
  auto ids = release_all(table);
  for (TrajectoryId id : ids) table[id].state = TrajectoryState::LostRecovered;
  if (lost) *lost = std::move(ids);
  failed_ = true;
  fetching_ = false;
}

void Replica::reinit() {
  if (!failed_) throw std::logic_error("reinit on a healthy replica");
  failed_ = false;
  c_prev_ = 0.0;
}

double Replica::c_used() const {
  return static_cast<double>(occupancy_) / static_cast<double>(spec_.kv_capacity);
}

std::pair<double, ReplicaPhase> Replica::kv_utilization() const {
  const double c = c_used();
  if (failed_) return {c, ReplicaPhase::Failed};
  if (fetching_) return {c, ReplicaPhase::FetchingWeights};
  if (n_reqs() == 0) return {c, ReplicaPhase::Idle};
  if (!waiting_.empty() && c >= spec_.c_max) return {c, ReplicaPhase::Steady};
  if (c < std::min(spec_.c_max, c_prev_)) return {c, ReplicaPhase::RampDown};
  return {c, ReplicaPhase::RampUp};
}

ActivityCode Replica::activity(const TrajectoryTable& table) const {
  if (failed_) return ActivityCode::Failed;
  if (fetching_) return ActivityCode::Fetching;
  if (step_in_flight_) return ActivityCode::Decoding;
  if (active_.empty()) return ActivityCode::Idle;
  if (decoding_count(table) > 0) return ActivityCode::Decoding;
  return ActivityCode::EnvWait;
}

}  // namespace rollsim

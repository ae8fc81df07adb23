#include "rollsim/simcore.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace rollsim {

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::DecodeStepComplete: return "decode-step-complete";
    case EventKind::EnvReturn: return "env-return";
    case EventKind::WeightsPublished: return "weights-published";
    case EventKind::BroadcastChunkArrived: return "broadcast-chunk-arrived";
    case EventKind::Heartbeat: return "heartbeat";
    case EventKind::HeartbeatTimeout: return "heartbeat-timeout";
    case EventKind::RepackTick: return "repack-tick";
    case EventKind::TrainerMinibatchDone: return "trainer-minibatch-done";
    case EventKind::FaultInject: return "fault-inject";
    case EventKind::RecoveryDone: return "recovery-done";
    case EventKind::WeightsPulled: return "weights-pulled";
    case EventKind::TransferDone: return "transfer-done";
    case EventKind::MetricsSample: return "metrics-sample";
  }
  return "unknown";
}

// ---------------------------------------------------------------- MetricsLog

void MetricsLog::record(Seconds t, std::string_view name, double value) {
  samples_.push_back(Sample{t, std::string(name), value});
}

void MetricsLog::mark_iteration(Seconds t, std::int64_t tokens) {
  if (!marks_.empty() && t <= marks_.back().t) {
    throw std::logic_error("iteration marks must be strictly increasing");
  }
  marks_.push_back(IterationMark{t, tokens});
}

void MetricsLog::write_jsonl(std::ostream& os) const {
  // Samples and marks are interleaved by time; marks go after samples with the
  // same timestamp so the file order is a pure function of the log contents.
  std::size_t si = 0;
  std::size_t mi = 0;
  while (si < samples_.size() || mi < marks_.size()) {
    bool take_mark = mi < marks_.size() &&
                     (si >= samples_.size() || marks_[mi].t < samples_[si].t);
    nlohmann::json j;
    if (take_mark) {
      j["t"] = marks_[mi].t;
      j["mark"] = "iteration";
      j["iteration"] = mi + 1;
      j["tokens"] = marks_[mi].tokens;
      ++mi;
    } else {
      j["t"] = samples_[si].t;
      j["name"] = samples_[si].name;
      j["value"] = samples_[si].value;
      ++si;
    }
    os << j.dump() << '\n';
  }
}

MetricsLog MetricsLog::read_jsonl(std::istream& is) {
  MetricsLog log;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.contains("mark")) {
      log.mark_iteration(j.at("t").get<double>(), j.at("tokens").get<std::int64_t>());
    } else {
      log.record(j.at("t").get<double>(), j.at("name").get<std::string>(),
                 j.at("value").get<double>());
    }
  }
  return log;
}

double throughput(const MetricsLog& log, std::size_t iteration_index) {
  const auto& marks = log.iteration_marks();
  if (iteration_index == 0 || iteration_index >= marks.size()) {
    throw std::out_of_range("iteration has no start/end mark pair");
  }
  const Seconds dt = marks[iteration_index].t - marks[iteration_index - 1].t;
  if (dt <= 0.0) throw std::domain_error("zero-length iteration");
  return static_cast<double>(marks[iteration_index].tokens) / dt;
}

double mean_throughput(const MetricsLog& log, std::size_t first, std::size_t count) {
  const auto& marks = log.iteration_marks();
  if (first == 0 || count == 0 || first + count > marks.size()) {
    throw std::out_of_range("iteration range not covered by marks");
  }
  std::int64_t tokens = 0;
  for (std::size_t i = first; i < first + count; ++i) tokens += marks[i].tokens;
  const Seconds dt = marks[first + count - 1].t - marks[first - 1].t;
  if (dt <= 0.0) throw std::domain_error("zero-length iteration range");
  return static_cast<double>(tokens) / dt;
}

std::string replica_state_metric(std::uint32_t replica_id) {
  return "replica." + std::to_string(replica_id) + ".state";
}

double bubble_fraction(const MetricsLog& log, std::uint32_t replica_id,
                       std::pair<Seconds, Seconds> window) {
  const auto [w0, w1] = window;
  if (!(w1 > w0)) throw std::invalid_argument("empty window");
  const std::string name = replica_state_metric(replica_id);

  // Step function of the activity code; idle before the first transition.
  int code = static_cast<int>(ActivityCode::Idle);
  Seconds cursor = w0;
  Seconds idle = 0.0;
  for (const auto& s : log.samples()) {
    if (s.name != name) continue;
    if (s.t >= w1) break;
    if (s.t > cursor) {
      if (code == static_cast<int>(ActivityCode::Idle)) idle += s.t - cursor;
      cursor = s.t;
    }
    code = static_cast<int>(s.value);
  }
  if (code == static_cast<int>(ActivityCode::Idle)) idle += w1 - cursor;
  return idle / (w1 - w0);
}

// ----------------------------------------------------------------- RngStream

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::string_view stream_id, std::uint64_t index) {
  // FNV-1a over the id gives a stable, order-independent stream key.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream_id) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed ^ h) + splitmix64(index));
}

RngStream::RngStream(std::uint64_t seed, std::string_view stream_id)
    : RngStream(seed, stream_id, 0) {}

RngStream::RngStream(std::uint64_t seed, std::string_view stream_id, std::uint64_t index)
    : seed_(seed), gen_(mix_seed(seed, stream_id, index)) {}

double RngStream::uniform() {
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double RngStream::normal() { return normal_(gen_); }

std::uint64_t RngStream::next_u64() { return gen_(); }

// -------------------------------------------------------------------- Engine

ComponentId Engine::register_component(Handler handler) {
  handlers_.push_back(std::move(handler));
  return static_cast<ComponentId>(handlers_.size() - 1);
}

void Engine::schedule(Event event) {
  if (event.fire_time < now_) {
    throw std::logic_error("event scheduled in the past");
  }
  if (event.target >= handlers_.size()) {
    throw std::logic_error("event targets an unregistered component");
  }
  event.seq = next_seq_++;
  queue_.push(event);
}

void Engine::schedule_at(Seconds t, EventKind kind, ComponentId target, EventPayload payload) {
  schedule(Event{t, kind, target, payload, 0});
}

void Engine::schedule_in(Seconds dt, EventKind kind, ComponentId target, EventPayload payload) {
  schedule(Event{now_ + dt, kind, target, payload, 0});
}

const MetricsLog& Engine::run_until(Seconds t_end) {
  if (t_end < now_) throw std::logic_error("run_until target precedes clock");
  while (!queue_.empty() && queue_.top().fire_time <= t_end) {
    Event ev = queue_.top();
    queue_.pop();
    now_ = ev.fire_time;
    ++fired_;
    handlers_[ev.target](ev);
  }
  now_ = t_end;
  return log_;
}

}  // namespace rollsim

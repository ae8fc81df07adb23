#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <queue>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rollsim {

using Seconds = double;
using ComponentId = std::uint32_t;

enum class EventKind : std::uint8_t {
  DecodeStepComplete,
  EnvReturn,
  WeightsPublished,
  BroadcastChunkArrived,
  Heartbeat,
  HeartbeatTimeout,
  RepackTick,
  TrainerMinibatchDone,
  FaultInject,
  RecoveryDone,
  WeightsPulled,
  TransferDone,
  MetricsSample,
};

std::string_view to_string(EventKind kind);

// Kind-specific record. Interpretation is owned by the target component.
struct EventPayload {
  std::int64_t a = 0;
  std::int64_t b = 0;
  std::int64_t c = 0;
  double x = 0.0;
};

struct Event {
  Seconds fire_time = 0.0;
  EventKind kind = EventKind::MetricsSample;
  ComponentId target = 0;
  EventPayload payload{};
  std::uint64_t seq = 0;  // assigned by the engine
};

struct Sample {
  Seconds t;
  std::string name;
  double value;
};

struct IterationMark {
  Seconds t;
  std::int64_t tokens;  // prompt + response tokens of the global batch
};

// Timestamped measurement stream. Serializes as JSON lines.
class MetricsLog {
 public:
  void record(Seconds t, std::string_view name, double value);
  // Marks must be strictly increasing in time.
  void mark_iteration(Seconds t, std::int64_t tokens);

  const std::vector<Sample>& samples() const { return samples_; }
  const std::vector<IterationMark>& iteration_marks() const { return marks_; }

  void write_jsonl(std::ostream& os) const;
  static MetricsLog read_jsonl(std::istream& is);

 private:
  std::vector<Sample> samples_;
  std::vector<IterationMark> marks_;
};

// Tokens of iteration `iteration_index` divided by the time between the
// previous and this actor-update completion. Index 0 has no start mark.
double throughput(const MetricsLog& log, std::size_t iteration_index);

// Aggregate over iterations [first, first + count): total tokens / elapsed.
double mean_throughput(const MetricsLog& log, std::size_t first, std::size_t count);

// Replica activity codes recorded under "replica.<id>.state".
enum class ActivityCode : int { Idle = 0, Decoding = 1, EnvWait = 2, Fetching = 3, Failed = 4 };

std::string replica_state_metric(std::uint32_t replica_id);

// Fraction of the window the replica spent idle: no decode step in flight,
// no environment wait, not fetching weights and not failed.
double bubble_fraction(const MetricsLog& log, std::uint32_t replica_id,
                       std::pair<Seconds, Seconds> window);

// Deterministic per-component random stream. Streams derived from the same
// root seed with different ids never share state.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view stream_id);
  RngStream(std::uint64_t seed, std::string_view stream_id, std::uint64_t index);

  double uniform();           // [0, 1)
  double normal();            // standard normal
  std::uint64_t next_u64();

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t mix_seed(std::uint64_t seed, std::string_view stream_id, std::uint64_t index = 0);

class Engine {
 public:
  using Handler = std::function<void(const Event&)>;

  Engine() = default;
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  ComponentId register_component(Handler handler);

  // Throws std::logic_error when fire_time < now.
  void schedule(Event event);
  void schedule_at(Seconds t, EventKind kind, ComponentId target, EventPayload payload = {});
  void schedule_in(Seconds dt, EventKind kind, ComponentId target, EventPayload payload = {});

  // Fires every event with fire_time <= t_end in (time, insertion) order.
  const MetricsLog& run_until(Seconds t_end);

  Seconds now() const { return now_; }
  std::size_t pending() const { return queue_.size(); }
  std::uint64_t fired() const { return fired_; }

  // Records a sample stamped with the current clock.
  void record(std::string_view name, double value) { log_.record(now_, name, value); }
  MetricsLog& metrics() { return log_; }
  const MetricsLog& metrics() const { return log_; }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.fire_time != b.fire_time) return a.fire_time > b.fire_time;
      return a.seq > b.seq;
    }
  };

  Seconds now_ = 0.0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t fired_ = 0;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::vector<Handler> handlers_;
  MetricsLog log_;
};

}  // namespace rollsim

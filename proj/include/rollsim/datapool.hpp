#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <tuple>
#include <vector>

#include "rollsim/rollout.hpp"

namespace rollsim {

struct PartialRecord {
  TrajectoryId trajectory_id = 0;
  ReplicaId replica_id = 0;
  std::int64_t tokens_so_far = 0;
  std::vector<VersionSegment> version_segments;
  Seconds last_update = 0.0;
  bool owned = true;  // false once recovered and awaiting reassignment
};

// In-progress trajectories, one record per in-flight trajectory. Ids are dense
// so records live in an id-indexed vector.
class PartialPool {
 public:
  // Upsert; a newer snapshot replaces the old one.
  void stream_partial(PartialRecord record);
  // In-place refresh from the live trajectory.
  void stream_from(const Trajectory& t, ReplicaId replica, Seconds now);

  bool contains(TrajectoryId id) const;
  const PartialRecord& get(TrajectoryId id) const;
  void erase(TrajectoryId id);
  void set_owner(TrajectoryId id, ReplicaId replica);

  // All partials owned by the failed replica; ownership is cleared.
  std::vector<PartialRecord> recover_partials(ReplicaId failed_replica);

  std::size_t size() const { return count_; }
  std::int64_t total_tokens() const;

 private:
  PartialRecord* slot(TrajectoryId id);

  std::vector<std::optional<PartialRecord>> rows_;
  std::size_t count_ = 0;
};

struct ExperienceRecord {
  TrajectoryId trajectory_id = 0;
  PromptId prompt_id = 0;
  std::int64_t total_tokens = 0;  // prompt + response
  std::int64_t response_tokens = 0;
  Version generated_version = 0;  // last segment's version
  std::size_t segment_count = 1;
  Seconds dispatch_time = 0.0;
  Seconds completion_time = 0.0;
  std::int64_t staleness = 0;
  bool consumed = false;
};

enum class SamplingStrategy { Fifo, StalenessPriority };
enum class EvictionStrategy { None, DropOldest, DropStalest };

struct BufferPolicy {
  SamplingStrategy sampling = SamplingStrategy::Fifo;
  EvictionStrategy eviction = EvictionStrategy::None;
  std::optional<std::size_t> capacity;  // unconsumed records; unbounded when empty
};

struct SampleResult {
  std::vector<ExperienceRecord> records;
  bool insufficient = false;
};

struct CommitResult {
  ExperienceRecord record;
  bool clamped = false;  // raw staleness was negative
};

// Completed trajectories, written by rollouts and drained by the trainer.
class ExperienceBuffer {
 public:
  explicit ExperienceBuffer(BufferPolicy policy = {});

  // Moves a finished trajectory out of the partial pool. Staleness is the
  // trainer version minus the last segment's version, clamped at zero.
  CommitResult commit_complete(const Trajectory& t, Version trainer_version, Seconds now,
                               PartialPool& partials);

  // Up to n unconsumed records per the sampling strategy; marks them consumed.
  SampleResult sample(std::size_t n);
  // Restores records taken by a discarded training iteration.
  void unconsume(const std::vector<TrajectoryId>& ids);

  std::size_t available() const { return unconsumed_.size(); }
  std::size_t size() const { return records_.size(); }
  std::size_t evicted() const { return evicted_; }
  std::size_t clamped() const { return clamped_; }
  const std::vector<ExperienceRecord>& records() const { return records_; }
  const BufferPolicy& policy() const { return policy_; }

  void write_jsonl(std::ostream& os) const;

 private:
  // (primary key, completion_time, record index)
  using Key = std::tuple<double, double, std::size_t>;
  Key key_for(std::size_t index) const;
  void evict_if_needed();

  BufferPolicy policy_;
  std::vector<ExperienceRecord> records_;
  std::vector<std::size_t> index_of_;  // trajectory id -> record index + 1 (0 = none)
  std::set<Key> unconsumed_;
  std::size_t evicted_ = 0;
  std::size_t clamped_ = 0;
};

}  // namespace rollsim

#include "rollsim/datapool.hpp"

#include <algorithm>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace rollsim {

// --------------------------------------------------------------- PartialPool

PartialRecord* PartialPool::slot(TrajectoryId id) {
  const auto idx = static_cast<std::size_t>(id);
  if (idx >= rows_.size()) rows_.resize(std::max(idx + 1, rows_.size() * 2));
  return rows_[idx] ? &*rows_[idx] : nullptr;
}

void PartialPool::stream_partial(PartialRecord record) {
  const auto idx = static_cast<std::size_t>(record.trajectory_id);
  if (!slot(record.trajectory_id)) ++count_;
  rows_[idx] = std::move(record);
}

void PartialPool::stream_from(const Trajectory& t, ReplicaId replica, Seconds now) {
  PartialRecord* r = slot(t.id);
  if (!r) {
    rows_[static_cast<std::size_t>(t.id)] = PartialRecord{};
    r = &*rows_[static_cast<std::size_t>(t.id)];
    ++count_;
  }
  r->trajectory_id = t.id;
  r->replica_id = replica;
  r->tokens_so_far = t.generated;
  r->version_segments = t.version_segments;
  r->last_update = now;
  r->owned = true;
}

bool PartialPool::contains(TrajectoryId id) const {
  const auto idx = static_cast<std::size_t>(id);
  return idx < rows_.size() && rows_[idx].has_value();
}

const PartialRecord& PartialPool::get(TrajectoryId id) const {
  if (!contains(id)) throw std::out_of_range("no partial record for trajectory");
  return *rows_[static_cast<std::size_t>(id)];
}

void PartialPool::erase(TrajectoryId id) {
  if (!contains(id)) return;
  rows_[static_cast<std::size_t>(id)].reset();
  --count_;
}

void PartialPool::set_owner(TrajectoryId id, ReplicaId replica) {
  PartialRecord* r = slot(id);
  if (!r) throw std::out_of_range("no partial record for trajectory");
  r->replica_id = replica;
  r->owned = true;
}

std::vector<PartialRecord> PartialPool::recover_partials(ReplicaId failed_replica) {
  std::vector<PartialRecord> out;
  for (auto& row : rows_) {
    if (row && row->owned && row->replica_id == failed_replica) {
      row->owned = false;
      out.push_back(*row);
    }
  }
  return out;
}

std::int64_t PartialPool::total_tokens() const {
  std::int64_t total = 0;
  for (const auto& row : rows_) {
    if (row) total += row->tokens_so_far;
  }
  return total;
}

// ---------------------------------------------------------- ExperienceBuffer

ExperienceBuffer::ExperienceBuffer(BufferPolicy policy) : policy_(policy) {}

ExperienceBuffer::Key ExperienceBuffer::key_for(std::size_t index) const {
  const ExperienceRecord& r = records_[index];
  const double primary = policy_.sampling == SamplingStrategy::Fifo
                             ? r.completion_time
                             : static_cast<double>(r.staleness);
  return {primary, r.completion_time, index};
}

CommitResult ExperienceBuffer::commit_complete(const Trajectory& t, Version trainer_version,
                                               Seconds now, PartialPool& partials) {
  if (t.generated != t.target_len) {
    throw std::logic_error("commit of an incomplete trajectory");
  }
  CommitResult result;
  ExperienceRecord& r = result.record;
  r.trajectory_id = t.id;
  r.prompt_id = t.prompt_id;
  r.response_tokens = t.generated;
  r.total_tokens = t.prompt_tokens + t.generated;
  r.generated_version = t.current_version();
  r.segment_count = t.version_segments.size();
  r.dispatch_time = t.dispatch_time;
  r.completion_time = now;
  const std::int64_t raw = trainer_version - r.generated_version;
  r.staleness = std::max<std::int64_t>(raw, 0);
  result.clamped = raw < 0;
  if (result.clamped) ++clamped_;

  partials.erase(t.id);
  const std::size_t index = records_.size();
  records_.push_back(r);
  const auto tid = static_cast<std::size_t>(t.id);
  if (tid >= index_of_.size()) index_of_.resize(std::max(tid + 1, index_of_.size() * 2), 0);
  index_of_[tid] = index + 1;
  unconsumed_.insert(key_for(index));
  evict_if_needed();
  return result;
}

void ExperienceBuffer::evict_if_needed() {
  if (!policy_.capacity || policy_.eviction == EvictionStrategy::None) return;
  while (unconsumed_.size() > *policy_.capacity) {
    auto victim = unconsumed_.begin();
    for (auto it = unconsumed_.begin(); it != unconsumed_.end(); ++it) {
      const auto& a = records_[std::get<2>(*it)];
      const auto& b = records_[std::get<2>(*victim)];
      const bool worse = policy_.eviction == EvictionStrategy::DropOldest
                             ? a.completion_time < b.completion_time
                             : a.staleness > b.staleness;
      if (worse) victim = it;
    }
    unconsumed_.erase(victim);
    ++evicted_;
  }
}

SampleResult ExperienceBuffer::sample(std::size_t n) {
  if (n == 0) throw std::invalid_argument("sample size must be >= 1");
  SampleResult out;
  while (out.records.size() < n && !unconsumed_.empty()) {
    const std::size_t index = std::get<2>(*unconsumed_.begin());
    unconsumed_.erase(unconsumed_.begin());
    records_[index].consumed = true;
    out.records.push_back(records_[index]);
  }
  out.insufficient = out.records.size() < n;
  return out;
}

void ExperienceBuffer::unconsume(const std::vector<TrajectoryId>& ids) {
  for (TrajectoryId id : ids) {
    const auto tid = static_cast<std::size_t>(id);
    if (tid >= index_of_.size() || index_of_[tid] == 0) continue;
    const std::size_t index = index_of_[tid] - 1;
    if (!records_[index].consumed) continue;
    records_[index].consumed = false;
    unconsumed_.insert(key_for(index));
  }
}

void ExperienceBuffer::write_jsonl(std::ostream& os) const {
  for (const auto& r : records_) {
    nlohmann::json j;
    j["trajectory_id"] = r.trajectory_id;
    j["prompt_id"] = r.prompt_id;
    j["total_tokens"] = r.total_tokens;
    j["response_tokens"] = r.response_tokens;
    j["generated_version"] = r.generated_version;
    j["segments"] = r.segment_count;
    j["dispatch_time"] = r.dispatch_time;
    j["completion_time"] = r.completion_time;
    j["staleness"] = r.staleness;
    j["consumed"] = r.consumed;
    os << j.dump() << '\n';
  }
}

}  // namespace rollsim

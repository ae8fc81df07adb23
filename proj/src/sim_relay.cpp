#include "rollsim/sim_relay.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "rollsim/wire.hpp"

namespace rollsim {

void SimRelayConfig::validate() const {
  if (!(model_bytes >= 0.0)) throw std::invalid_argument("relay model_bytes must be >= 0");
  if (!(t_byte > 0.0)) throw std::invalid_argument("relay t_byte must be > 0");
  if (!(t_start >= 0.0)) throw std::invalid_argument("relay t_start must be >= 0");
  if (chunks < 0) throw std::invalid_argument("relay chunks must be >= 0");
  if (k_cap < 1) throw std::invalid_argument("relay k_cap must be >= 1");
  if (!(reshard_latency >= 0.0)) throw std::invalid_argument("reshard_latency must be >= 0");
  if (heartbeats && !(hb_timeout > hb_interval && hb_interval > 0.0)) {
    throw std::invalid_argument("need 0 < hb_interval < hb_timeout");
  }
  if (!(rebuild_latency >= 0.0)) throw std::invalid_argument("rebuild_latency must be >= 0");
  if (retention < 1) throw std::invalid_argument("retention must be >= 1");
  if (!(shard_bytes >= 0.0 && local_t_byte >= 0.0 && local_t_start >= 0.0)) {
    throw std::invalid_argument("local pull parameters must be >= 0");
  }
}

SimRelayTier::SimRelayTier(Engine& engine, SimRelayConfig config, std::vector<NodeId> order)
    : engine_(engine), config_(config), topology_(std::move(order)) {
  config_.validate();
  if (topology_.empty()) throw std::invalid_argument("relay chain needs at least one node");
  component_ = engine_.register_component([this](const Event& e) { on_event(e); });
  for (NodeId n : topology_.order()) {
    nodes_[n] = Node{};
    if (config_.heartbeats) schedule_heartbeat(n, engine_.now());
  }
}

std::uint64_t SimRelayTier::chunk_sum(Version v, std::int64_t index) {
  std::uint64_t x = static_cast<std::uint64_t>(v) * 0x9E3779B97F4A7C15ULL +
                    static_cast<std::uint64_t>(index) + 1;
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void SimRelayTier::schedule_heartbeat(NodeId n, Seconds at) {
  EventPayload p;
  p.a = n;
  engine_.schedule_at(at, EventKind::Heartbeat, component_, p);
}

bool SimRelayTier::publish(Version version) {
  const NodeId m = topology_.master();
  const Node& master = nodes_.at(m);
  if (!master.alive) return false;
  if (master.newest_complete && version <= *master.newest_complete) return false;
  if (pending_ && version <= *pending_) return false;
  if (resharding_ && version <= *resharding_) return false;
  resharding_ = version;
  EventPayload p;
  p.a = kStart;
  p.b = version;
  engine_.schedule_in(config_.reshard_latency, EventKind::WeightsPublished, component_, p);
  return true;
}

std::optional<Version> SimRelayTier::newest_complete(NodeId n) const {
  auto it = nodes_.find(n);
  if (it == nodes_.end() || !it->second.alive) return std::nullopt;
  return it->second.newest_complete;
}

bool SimRelayTier::holds_complete(NodeId n, Version v) const {
  auto it = nodes_.find(n);
  if (it == nodes_.end() || !it->second.alive) return false;
  auto vit = it->second.versions.find(v);
  return vit != it->second.versions.end() && vit->second.complete();
}

Seconds SimRelayTier::pull_latency() const {
  return config_.shard_bytes * config_.local_t_byte + config_.local_t_start;
}

std::pair<std::optional<Version>, Seconds> SimRelayTier::pull(NodeId n) const {
  return {newest_complete(n), pull_latency()};
}

bool SimRelayTier::alive(NodeId n) const {
  auto it = nodes_.find(n);
  return it != nodes_.end() && it->second.alive;
}

std::int64_t SimRelayTier::chunk_count(Version v) const {
  auto it = chunk_counts_.find(v);
  if (it == chunk_counts_.end()) throw std::out_of_range("unknown version");
  return it->second;
}

std::uint64_t SimRelayTier::digest(NodeId n, Version v) const {
  const Node& node = nodes_.at(n);
  auto it = node.versions.find(v);
  if (it == node.versions.end() || !it->second.complete()) return 0;
  const auto& sums = it->second.sums;
  return fnv1a64(reinterpret_cast<const std::uint8_t*>(sums.data()),
                 sums.size() * sizeof(std::uint64_t));
}

std::optional<Seconds> SimRelayTier::completion_time(NodeId n, Version v) const {
  const Node& node = nodes_.at(n);
  auto it = node.completed_at.find(v);
  if (it == node.completed_at.end()) return std::nullopt;
  return it->second;
}

std::optional<Seconds> SimRelayTier::broadcast_start(Version v) const {
  auto it = broadcast_start_.find(v);
  if (it == broadcast_start_.end()) return std::nullopt;
  return it->second;
}

void SimRelayTier::fail_node(NodeId n) {
  Node& node = nodes_.at(n);
  if (!node.alive) return;
  node.alive = false;
  engine_.record("relay." + std::to_string(n) + ".failed", 1.0);
  if (!config_.heartbeats) detect(n);
}

void SimRelayTier::fail_node_after_chunks(NodeId n, Version version, std::int64_t chunks) {
  nodes_.at(n).kill_after = std::make_pair(version, chunks);
}

void SimRelayTier::join_node(NodeId n) {
  nodes_[n] = Node{};
  topology_ = topology_.join(n);
  engine_.record("relay.epoch", static_cast<double>(topology_.epoch()));
  if (config_.heartbeats) schedule_heartbeat(n, engine_.now());
  if (active_) {
    begin_phase();
    return;
  }
  const Node& master = nodes_.at(topology_.master());
  if (master.alive && master.newest_complete) {
    active_ = *master.newest_complete;
    t_chunk_ = chunk_time(BroadcastParams{2, config_.model_bytes, config_.t_byte, config_.t_start},
                          chunk_count(*active_));
    begin_phase();
  }
}

void SimRelayTier::on_event(const Event& e) {
  switch (e.kind) {
    case EventKind::WeightsPublished: {
      const Version v = e.payload.b;
      if (resharding_ && *resharding_ <= v) resharding_.reset();
      const NodeId m = topology_.master();
      Node& master = nodes_.at(m);
      if (!master.alive) return;  // the retry path re-publishes to the new master
      if (master.newest_complete && v <= *master.newest_complete) return;
      if (!chunk_counts_.count(v)) {
        const int p = static_cast<int>(std::max<std::size_t>(topology_.size(), 2));
        const BroadcastParams params{p, config_.model_bytes, config_.t_byte, config_.t_start};
        chunk_counts_[v] = config_.chunks > 0 ? config_.chunks : optimal_chunks(params, config_.k_cap);
      }
      const std::int64_t k = chunk_counts_[v];
      VersionState& vs = master.versions[v];
      vs.sums.resize(static_cast<std::size_t>(k));
      vs.have.assign(static_cast<std::size_t>(k), 1);
      vs.slot.assign(static_cast<std::size_t>(k), 0);
      for (std::int64_t i = 0; i < k; ++i) vs.sums[static_cast<std::size_t>(i)] = chunk_sum(v, i);
      vs.count = k;
      mark_complete(m, v);
      if (!active_) {
        start_broadcast(v);
      } else if (*active_ == v) {
        begin_phase();
      } else if (!pending_ || *pending_ < v) {
        pending_ = v;
      }
      return;
    }
    case EventKind::BroadcastChunkArrived: {
      auto it = in_flight_.find(static_cast<std::uint64_t>(e.payload.a));
      if (it == in_flight_.end()) return;
      const Message m = it->second;
      in_flight_.erase(it);
      deliver(m);
      return;
    }
    case EventKind::Heartbeat: {
      const auto n = static_cast<NodeId>(e.payload.a);
      Node& node = nodes_.at(n);
      if (!node.alive || !topology_.contains(n)) return;
      ++node.heartbeats;
      EventPayload p;
      p.a = n;
      p.b = static_cast<std::int64_t>(node.heartbeats);
      engine_.schedule_in(config_.hb_timeout, EventKind::HeartbeatTimeout, component_, p);
      schedule_heartbeat(n, engine_.now() + config_.hb_interval);
      return;
    }
    case EventKind::HeartbeatTimeout: {
      const auto n = static_cast<NodeId>(e.payload.a);
      const Node& node = nodes_.at(n);
      if (node.heartbeats != static_cast<std::uint64_t>(e.payload.b)) return;
      if (!topology_.contains(n)) return;
      detect(n);
      return;
    }
    case EventKind::RecoveryDone:
      apply_rebuild();
      return;
    default:
      throw std::logic_error("relay tier received unexpected event kind");
  }
}

void SimRelayTier::start_broadcast(Version v) {
  active_ = v;
  broadcast_start_.emplace(v, engine_.now());
  t_chunk_ = chunk_time(BroadcastParams{2, config_.model_bytes, config_.t_byte, config_.t_start},
                        chunk_count(v));
  engine_.record("relay.broadcast_start", static_cast<double>(v));
  begin_phase();
}

std::int64_t SimRelayTier::lowest_missing(NodeId n, Version v) const {
  const Node& node = nodes_.at(n);
  auto it = node.versions.find(v);
  if (it == node.versions.end()) return 0;
  const auto& have = it->second.have;
  auto pos = std::find(have.begin(), have.end(), 0);
  return static_cast<std::int64_t>(pos - have.begin());
}

void SimRelayTier::begin_phase() {
  if (!active_) return;
  const Version v = *active_;
  phase_origin_ = engine_.now();
  ++phase_;
  for (NodeId n : topology_.order()) {
    Node& node = nodes_.at(n);
    node.link_free_slot = 0;
    auto it = node.versions.find(v);
    if (it != node.versions.end()) std::fill(it->second.slot.begin(), it->second.slot.end(), 0);
    auto succ = topology_.successor(n);
    node.next_to_send = succ ? lowest_missing(*succ, v) : chunk_count(v);
  }
  for (NodeId n : topology_.order()) pump(n);
  maybe_finish_broadcast();
}

void SimRelayTier::pump(NodeId n) {
  if (!active_) return;
  Node& node = nodes_.at(n);
  if (!node.alive || !topology_.contains(n)) return;
  auto succ = topology_.successor(n);
  if (!succ) return;
  const Version v = *active_;
  auto it = node.versions.find(v);
  if (it == node.versions.end()) return;
  VersionState& vs = it->second;
  const auto k = static_cast<std::int64_t>(vs.have.size());
  while (node.next_to_send < k && vs.have[static_cast<std::size_t>(node.next_to_send)]) {
    const auto i = static_cast<std::size_t>(node.next_to_send);
    const std::int64_t send_slot = std::max(vs.slot[i], node.link_free_slot);
    const std::int64_t arrival = send_slot + 1;
    node.link_free_slot = arrival;
    const std::uint64_t id = next_message_++;
    in_flight_.emplace(id, Message{n, *succ, v, node.next_to_send, vs.sums[i], topology_.epoch(),
                                   arrival, phase_});
    EventPayload p;
    p.a = static_cast<std::int64_t>(id);
    engine_.schedule_at(phase_origin_ + static_cast<double>(arrival) * t_chunk_,
                        EventKind::BroadcastChunkArrived, component_, p);
    ++node.next_to_send;
  }
}

void SimRelayTier::deliver(const Message& m) {
  if (m.epoch != topology_.epoch()) {
    ++stale_drops_;
    return;
  }
  if (!nodes_.at(m.from).alive || !nodes_.at(m.to).alive || !topology_.contains(m.to)) return;
  // A chunk sent in an earlier phase of this epoch becomes available now.
  receive(m.to, m.version, m.index, m.sum, m.phase == phase_ ? m.slot : current_slot());
}

std::int64_t SimRelayTier::current_slot() const {
  if (!(t_chunk_ > 0.0)) return 0;
  auto s = static_cast<std::int64_t>(std::ceil((engine_.now() - phase_origin_) / t_chunk_));
  s = std::max<std::int64_t>(s, 0);
  while (phase_origin_ + static_cast<double>(s) * t_chunk_ < engine_.now()) ++s;
  return s;
}

void SimRelayTier::receive(NodeId n, Version v, std::int64_t index, std::uint64_t sum,
                           std::int64_t slot) {
  Node& node = nodes_.at(n);
  VersionState& vs = node.versions[v];
  const auto k = static_cast<std::size_t>(chunk_count(v));
  if (vs.have.empty()) {
    vs.sums.assign(k, 0);
    vs.have.assign(k, 0);
    vs.slot.assign(k, 0);
  }
  const auto i = static_cast<std::size_t>(index);
  if (vs.have[i]) return;
  vs.have[i] = 1;
  vs.sums[i] = sum;
  vs.slot[i] = slot;
  ++vs.count;
  if (node.kill_after && node.kill_after->first == v && node.kill_after->second == vs.count) {
    node.kill_after.reset();
    fail_node(n);
    return;
  }
  if (vs.complete()) mark_complete(n, v);
  if (active_ && *active_ == v) pump(n);
  maybe_finish_broadcast();
}

void SimRelayTier::mark_complete(NodeId n, Version v) {
  Node& node = nodes_.at(n);
  node.completed_at.emplace(v, engine_.now());
  if (!node.newest_complete || v > *node.newest_complete) node.newest_complete = v;
  prune(n);
  engine_.record("relay." + std::to_string(n) + ".version", static_cast<double>(v));
  if (listener_.on_complete) listener_.on_complete(n, v, engine_.now());
}

void SimRelayTier::maybe_finish_broadcast() {
  if (!active_) return;
  const Version v = *active_;
  for (NodeId n : topology_.order()) {
    const Node& node = nodes_.at(n);
    if (!node.alive) continue;
    auto it = node.versions.find(v);
    if (it == node.versions.end() || !it->second.complete()) return;
  }
  active_.reset();
  engine_.record("relay.broadcast_done", static_cast<double>(v));
  if (listener_.on_broadcast_done) listener_.on_broadcast_done(v, engine_.now());
  if (active_) return;  // the listener re-published
  if (pending_) {
    const Version next = *pending_;
    pending_.reset();
    if (holds_complete(topology_.master(), next)) {
      start_broadcast(next);
    } else if (listener_.on_master_changed) {
      listener_.on_master_changed(topology_.master());
    }
  }
}

void SimRelayTier::prune(NodeId n) {
  Node& node = nodes_.at(n);
  std::vector<Version> complete;
  for (const auto& [v, vs] : node.versions) {
    if (vs.complete()) complete.push_back(v);
  }
  std::set<Version> keep;
  for (auto it = complete.rbegin(); it != complete.rend() && keep.size() < static_cast<std::size_t>(config_.retention); ++it) {
    keep.insert(*it);
  }
  if (active_) keep.insert(*active_);
  if (pending_) keep.insert(*pending_);
  const Version newest = node.newest_complete.value_or(-1);
  for (auto it = node.versions.begin(); it != node.versions.end();) {
    const bool old_partial = !it->second.complete() && it->first < newest;
    if (!keep.count(it->first) && (it->second.complete() || old_partial)) {
      it = node.versions.erase(it);
    } else {
      ++it;
    }
  }
}

void SimRelayTier::detect(NodeId n) {
  if (detected_.count(n) || !topology_.contains(n)) return;
  detected_.insert(n);
  engine_.record("relay." + std::to_string(n) + ".detected", 1.0);
  if (listener_.on_failure_detected) listener_.on_failure_detected(n, engine_.now());
  if (!rebuild_scheduled_) {
    rebuild_scheduled_ = true;
    first_detection_ = engine_.now();
    EventPayload p;
    p.a = kRebuild;
    engine_.schedule_in(config_.rebuild_latency, EventKind::RecoveryDone, component_, p);
  }
}

void SimRelayTier::apply_rebuild() {
  rebuild_scheduled_ = false;
  if (detected_.empty()) return;
  RebuildRecord rec;
  rec.failed = detected_;
  rec.detected_at = first_detection_;
  const NodeId old_master = topology_.master();
  topology_ = topology_.rebuild(detected_);
  detected_.clear();
  rec.rebuilt_at = engine_.now();
  rec.epoch = topology_.epoch();
  rec.master_changed = topology_.master() != old_master;
  rebuilds_.push_back(rec);
  engine_.record("relay.epoch", static_cast<double>(rec.epoch));
  engine_.record("relay.rebuild_s", rec.rebuilt_at - rec.detected_at);

  const NodeId master = topology_.master();
  if (active_ && !holds_complete(master, *active_)) {
    begin_phase();
    if (listener_.on_master_changed) listener_.on_master_changed(master);
    return;
  }
  if (active_) {
    begin_phase();
  } else if (rec.master_changed && pending_ && !holds_complete(master, *pending_)) {
    pending_.reset();
    if (listener_.on_master_changed) listener_.on_master_changed(master);
  }
}

}  // namespace rollsim

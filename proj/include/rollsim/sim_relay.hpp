#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <unordered_map>
#include <vector>

#include "rollsim/chain.hpp"
#include "rollsim/relay_model.hpp"
#include "rollsim/rollout.hpp"
#include "rollsim/simcore.hpp"

namespace rollsim {

struct SimRelayConfig {
  double model_bytes = 1e9;  // M
  Seconds t_byte = 1e-9;     // inter-relay link
  Seconds t_start = 1e-3;
  std::int64_t chunks = 0;  // 0 selects optimal_chunks for the current chain
  std::int64_t k_cap = kDefaultChunkCap;
  Seconds reshard_latency = 0.0;
  bool heartbeats = true;
  Seconds hb_interval = 0.1;
  Seconds hb_timeout = 0.5;
  Seconds rebuild_latency = 0.01;  // control round trip after detection
  int retention = 2;               // complete versions kept per node
  // Relay -> colocated replica pull.
  double shard_bytes = 1e9;
  Seconds local_t_byte = 1e-10;
  Seconds local_t_start = 1e-4;

  void validate() const;
};

struct RebuildRecord {
  std::set<NodeId> failed;
  Seconds detected_at = 0.0;
  Seconds rebuilt_at = 0.0;
  std::uint64_t epoch = 0;
  bool master_changed = false;
};

struct RelayListener {
  std::function<void(NodeId, Version, Seconds)> on_complete;
  std::function<void(Version, Seconds)> on_broadcast_done;  // every live node complete
  std::function<void(NodeId, Seconds)> on_failure_detected;
  std::function<void(NodeId)> on_master_changed;  // new master lacks the in-flight version
};

// Chain-pipelined version distribution over the engine. Chunk i reaches
// position j at phase_origin + slot * t_chunk with an integer slot, so with
// no failures the tail completes at exactly T(p, k).
class SimRelayTier {
 public:
  SimRelayTier(Engine& engine, SimRelayConfig config, std::vector<NodeId> order);

  const SimRelayConfig& config() const { return config_; }
  const ChainTopology& topology() const { return topology_; }

  // Master receives a new blob now; broadcast starts after the reshard.
  // Returns false (rejected) unless version exceeds every version the
  // master holds or is re-sending. Broadcasts are serialized; a newer
  // pending version replaces an older pending one.
  bool publish(Version version);

  std::optional<Version> newest_complete(NodeId n) const;
  bool holds_complete(NodeId n, Version v) const;
  Seconds pull_latency() const;
  // Newest complete version at the node plus the local pull latency.
  std::pair<std::optional<Version>, Seconds> pull(NodeId n) const;

  // Silences the node. Detection follows the heartbeat timeout, or is
  // immediate when heartbeats are disabled.
  void fail_node(NodeId n);
  // Fails `n` the moment it holds `chunks` chunks of `version`.
  void fail_node_after_chunks(NodeId n, Version version, std::int64_t chunks);
  // Adds a fresh node at the tail; it catches up on the newest version.
  void join_node(NodeId n);
  bool alive(NodeId n) const;

  std::int64_t chunk_count(Version v) const;
  std::uint64_t digest(NodeId n, Version v) const;
  std::optional<Seconds> completion_time(NodeId n, Version v) const;
  std::optional<Version> active_version() const { return active_; }
  std::optional<Seconds> broadcast_start(Version v) const;
  bool broadcasting() const { return active_.has_value(); }

  const std::vector<RebuildRecord>& rebuilds() const { return rebuilds_; }
  std::uint64_t stale_drops() const { return stale_drops_; }

  void set_listener(RelayListener listener) { listener_ = std::move(listener); }

 private:
  struct VersionState {
    std::vector<std::uint64_t> sums;  // per-chunk checksum
    std::vector<char> have;
    std::vector<std::int64_t> slot;  // phase slot at which the chunk became available
    std::int64_t count = 0;
    bool complete() const { return count == static_cast<std::int64_t>(have.size()); }
  };
  struct Node {
    bool alive = true;
    std::map<Version, VersionState> versions;
    std::map<Version, Seconds> completed_at;
    std::optional<Version> newest_complete;
    std::int64_t next_to_send = 0;
    std::int64_t link_free_slot = 0;
    std::uint64_t heartbeats = 0;
    std::optional<std::pair<Version, std::int64_t>> kill_after;
  };
  struct Message {
    NodeId from = 0;
    NodeId to = 0;
    Version version = 0;
    std::int64_t index = 0;
    std::uint64_t sum = 0;
    std::uint64_t epoch = 0;
    std::int64_t slot = 0;
    std::uint64_t phase = 0;
  };
  enum Op : std::int64_t { kStart = 1, kRebuild = 2 };

  void on_event(const Event& e);
  void start_broadcast(Version v);
  void begin_phase();
  void pump(NodeId n);
  void deliver(const Message& m);
  void receive(NodeId n, Version v, std::int64_t index, std::uint64_t sum, std::int64_t slot);
  void mark_complete(NodeId n, Version v);
  void maybe_finish_broadcast();
  void prune(NodeId n);
  void detect(NodeId n);
  void apply_rebuild();
  void schedule_heartbeat(NodeId n, Seconds at);
  static std::uint64_t chunk_sum(Version v, std::int64_t index);
  std::int64_t lowest_missing(NodeId n, Version v) const;
  std::int64_t current_slot() const;

  Engine& engine_;
  SimRelayConfig config_;
  ComponentId component_;
  ChainTopology topology_;
  std::map<NodeId, Node> nodes_;
  std::optional<Version> active_;
  std::optional<Version> pending_;
  std::optional<Version> resharding_;  // accepted, reshard not finished
  std::map<Version, std::int64_t> chunk_counts_;
  std::map<Version, Seconds> broadcast_start_;
  Seconds phase_origin_ = 0.0;
  std::uint64_t phase_ = 0;
  double t_chunk_ = 0.0;
  std::unordered_map<std::uint64_t, Message> in_flight_;
  std::uint64_t next_message_ = 0;
  std::set<NodeId> detected_;   // awaiting rebuild
  Seconds first_detection_ = 0.0;
  bool rebuild_scheduled_ = false;
  std::vector<RebuildRecord> rebuilds_;
  std::uint64_t stale_drops_ = 0;
  RelayListener listener_;
};

}  // namespace rollsim

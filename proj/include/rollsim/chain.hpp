#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

namespace rollsim {

using NodeId = std::uint32_t;

// Ordered broadcast chain. The head is the master; every rebuild bumps the
// epoch so messages from older chains can be recognized and dropped.
class ChainTopology {
 public:
  ChainTopology() = default;
  explicit ChainTopology(std::vector<NodeId> order, std::uint64_t epoch = 0);

  const std::vector<NodeId>& order() const { return order_; }
  std::uint64_t epoch() const { return epoch_; }
  NodeId master() const;
  std::size_t size() const { return order_.size(); }
  bool empty() const { return order_.empty(); }
  bool contains(NodeId n) const;
  std::size_t position(NodeId n) const;

  std::optional<NodeId> successor(NodeId n) const;
  std::optional<NodeId> predecessor(NodeId n) const;

  // Removes failed nodes, keeps survivor order, bumps the epoch. When the
  // master is among them the first survivor takes over. Throws
  // std::runtime_error when nothing survives.
  ChainTopology rebuild(const std::set<NodeId>& failed) const;
  // Same as rebuild when the master is in `failed`.
  ChainTopology elect_master(const std::set<NodeId>& failed) const;
  // Appends a replacement node at the tail.
  ChainTopology join(NodeId n) const;

 private:
  std::vector<NodeId> order_;
  std::uint64_t epoch_ = 0;
};

// Tracks the last heartbeat per node.
class HeartbeatMonitor {
 public:
  HeartbeatMonitor(double interval, double timeout);

  double interval() const { return interval_; }
  double timeout() const { return timeout_; }

  void watch(NodeId n, double now);
  void unwatch(NodeId n);
  void observe(NodeId n, double t);
  double last_seen(NodeId n) const;
  double deadline(NodeId n) const { return last_seen(n) + timeout_; }
  // Watched nodes silent for at least the timeout.
  std::vector<NodeId> expired(double now) const;

 private:
  double interval_;
  double timeout_;
  std::map<NodeId, double> last_;
};

}  // namespace rollsim

#include "rollsim/chain.hpp"

#include <algorithm>
#include <stdexcept>

namespace rollsim {

ChainTopology::ChainTopology(std::vector<NodeId> order, std::uint64_t epoch)
    : order_(std::move(order)), epoch_(epoch) {
  std::set<NodeId> seen(order_.begin(), order_.end());
  if (seen.size() != order_.size()) throw std::invalid_argument("duplicate node in chain");
}

NodeId ChainTopology::master() const {
  if (order_.empty()) throw std::logic_error("empty chain has no master");
  return order_.front();
}

bool ChainTopology::contains(NodeId n) const {
  return std::find(order_.begin(), order_.end(), n) != order_.end();
}

std::size_t ChainTopology::position(NodeId n) const {
  auto it = std::find(order_.begin(), order_.end(), n);
  if (it == order_.end()) throw std::out_of_range("node not in chain");
  return static_cast<std::size_t>(it - order_.begin());
}

std::optional<NodeId> ChainTopology::successor(NodeId n) const {
  const std::size_t i = position(n);
  if (i + 1 >= order_.size()) return std::nullopt;
  return order_[i + 1];
}

std::optional<NodeId> ChainTopology::predecessor(NodeId n) const {
  const std::size_t i = position(n);
  if (i == 0) return std::nullopt;
  return order_[i - 1];
}

ChainTopology ChainTopology::rebuild(const std::set<NodeId>& failed) const {
  std::vector<NodeId> next;
  next.reserve(order_.size());
  for (NodeId n : order_) {
    if (!failed.count(n)) next.push_back(n);
  }
  if (next.empty()) throw std::runtime_error("every relay in the chain has failed");
  return ChainTopology(std::move(next), epoch_ + 1);
}

ChainTopology ChainTopology::elect_master(const std::set<NodeId>& failed) const {
  return rebuild(failed);
}

ChainTopology ChainTopology::join(NodeId n) const {
  if (contains(n)) throw std::invalid_argument("node already in chain");
  std::vector<NodeId> next = order_;
  next.push_back(n);
  return ChainTopology(std::move(next), epoch_ + 1);
}

HeartbeatMonitor::HeartbeatMonitor(double interval, double timeout)
    : interval_(interval), timeout_(timeout) {
  if (!(interval > 0.0)) throw std::invalid_argument("heartbeat interval must be > 0");
  if (!(timeout > interval)) throw std::invalid_argument("heartbeat timeout must exceed interval");
}

void HeartbeatMonitor::watch(NodeId n, double now) { last_[n] = now; }

void HeartbeatMonitor::unwatch(NodeId n) { last_.erase(n); }

void HeartbeatMonitor::observe(NodeId n, double t) {
  auto it = last_.find(n);
  if (it != last_.end()) it->second = std::max(it->second, t);
}

double HeartbeatMonitor::last_seen(NodeId n) const {
  auto it = last_.find(n);
  if (it == last_.end()) throw std::out_of_range("node not watched");
  return it->second;
}

std::vector<NodeId> HeartbeatMonitor::expired(double now) const {
  std::vector<NodeId> out;
  for (const auto& [n, t] : last_) {
    if (now - t >= timeout_) out.push_back(n);
  }
  return out;
}

}  // namespace rollsim

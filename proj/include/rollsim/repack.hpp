#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rollsim/rollout.hpp"

namespace rollsim {

struct RolloutSnapshot {
  ReplicaId replica_id = 0;
  Version weight_version = 0;
  double c_used = 0.0;
  double c_prev = 0.0;
  int n_reqs = 0;
};

struct Load {
  double c = 0.0;
  int n = 0;
};

struct RepackPlan {
  std::vector<std::pair<ReplicaId, ReplicaId>> pairs;  // (source, dest) in decision order
  std::set<ReplicaId> emptied;
  std::map<ReplicaId, Load> assigned;  // per destination, sum of assigned sources

  bool empty() const { return pairs.empty(); }
};

// Human-readable record of each planner decision.
struct PlanTrace {
  std::vector<std::string> lines;
  std::size_t can_fit_evaluations = 0;
};

RolloutSnapshot snapshot_of(const Replica& r);

// Groups snapshots by weight version. Failed replicas are skipped.
std::map<Version, std::vector<RolloutSnapshot>> collect_and_group(
    const std::vector<const Replica*>& replicas);
std::map<Version, std::vector<RolloutSnapshot>> collect_and_group(
    const std::vector<RolloutSnapshot>& snapshots);

// Ramp-down candidates (C_used < min(C_max, C_prev) and N_reqs < B), sorted
// ascending by C_used; ties keep replica id order.
std::vector<RolloutSnapshot> select_candidates(const std::vector<RolloutSnapshot>& group,
                                               double c_max, int b, PlanTrace* trace = nullptr);

bool can_fit(const RolloutSnapshot& dest, const RolloutSnapshot& source, const RepackPlan& plan,
             double c_max, int b);

// Best-fit consolidation over a sorted candidate list. A replica that has
// already received a source is not itself moved later.
RepackPlan plan_consolidation(const std::vector<RolloutSnapshot>& candidates, double c_max, int b,
                              PlanTrace* trace = nullptr);

// Snapshot file: one "id version C_used C_prev N_reqs" per line, '#' comments.
std::vector<RolloutSnapshot> read_snapshots(std::istream& in);

struct RepackConfig {
  bool enabled = true;
  double c_max = 0.99;
  Seconds period = 5.0;
  Seconds transfer_overhead = 0.69;

  void validate() const;
};

struct ExecutedPair {
  ReplicaId source = 0;
  ReplicaId dest = 0;
  std::vector<TrajectoryId> moved;
};

struct ExecuteResult {
  std::vector<ExecutedPair> executed;
  std::vector<std::pair<ReplicaId, ReplicaId>> dropped;
};

// Moves every trajectory of each source to its destination. Pairs are
// re-validated against live replica state first and dropped when they no
// longer fit. Destinations pause for the transfer overhead and have their
// C_prev reset to the post-transfer reading. `replicas` is indexed by id.
ExecuteResult execute(const RepackPlan& plan, std::vector<Replica>& replicas,
                      TrajectoryTable& table, double c_max, Seconds now,
                      Seconds transfer_overhead);

}  // namespace rollsim

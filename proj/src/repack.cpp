#include "rollsim/repack.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <sstream>
#include <stdexcept>

namespace rollsim {

namespace {

std::string fmt(const char* format, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, a);
  return buf;
}

std::string describe(const RolloutSnapshot& s) {
  std::ostringstream os;
  os << "r" << s.replica_id << "(C=" << fmt("%.4f", s.c_used) << ",N=" << s.n_reqs << ")";
  return os.str();
}

Load load_of(const RolloutSnapshot& d, const RepackPlan& plan) {
  Load l{d.c_used, d.n_reqs};
  auto it = plan.assigned.find(d.replica_id);
  if (it != plan.assigned.end()) {
    l.c += it->second.c;
    l.n += it->second.n;
  }
  return l;
}

}  // namespace

RolloutSnapshot snapshot_of(const Replica& r) {
  return RolloutSnapshot{r.id(), r.weight_version(), r.c_used(), r.c_prev(), r.n_reqs()};
}

std::map<Version, std::vector<RolloutSnapshot>> collect_and_group(
    const std::vector<const Replica*>& replicas) {
  std::map<Version, std::vector<RolloutSnapshot>> out;
  for (const Replica* r : replicas) {
    if (r->failed()) continue;
    out[r->weight_version()].push_back(snapshot_of(*r));
  }
  return out;
}

std::map<Version, std::vector<RolloutSnapshot>> collect_and_group(
    const std::vector<RolloutSnapshot>& snapshots) {
  std::map<Version, std::vector<RolloutSnapshot>> out;
  for (const auto& s : snapshots) out[s.weight_version].push_back(s);
  return out;
}

std::vector<RolloutSnapshot> select_candidates(const std::vector<RolloutSnapshot>& group,
                                               double c_max, int b, PlanTrace* trace) {
  std::vector<RolloutSnapshot> s;
  for (const auto& r : group) {
    const double bound = std::min(c_max, r.c_prev);
    const bool ok = r.c_used < bound && r.n_reqs < b;
    if (trace) {
      std::ostringstream os;
      os << "candidate " << describe(r) << " C_prev=" << fmt("%.4f", r.c_prev) << ": "
         << (ok ? "yes" : "no");
      if (!ok) {
        if (!(r.c_used < bound)) {
          os << " (C_used >= min(C_max,C_prev)=" << fmt("%.4f", bound);
          if (r.c_used == bound) os << ", equality";
          os << ")";
        }
        if (r.n_reqs >= b) os << " (N_reqs >= B=" << b << ")";
      }
      trace->lines.push_back(os.str());
    }
    if (ok) s.push_back(r);
  }
  std::stable_sort(s.begin(), s.end(), [](const RolloutSnapshot& a, const RolloutSnapshot& c) {
    if (a.c_used != c.c_used) return a.c_used < c.c_used;
    return a.replica_id < c.replica_id;
  });
  if (trace) {
    std::ostringstream os;
    os << "sorted S = [";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << describe(s[i]);
    os << "]";
    trace->lines.push_back(os.str());
  }
  return s;
}

bool can_fit(const RolloutSnapshot& dest, const RolloutSnapshot& source, const RepackPlan& plan,
             double c_max, int b) {
  const Load l = load_of(dest, plan);
  return l.c + source.c_used <= c_max && l.n + source.n_reqs <= b;
}

RepackPlan plan_consolidation(const std::vector<RolloutSnapshot>& candidates, double c_max, int b,
                              PlanTrace* trace) {
  RepackPlan plan;
  for (const auto& s : candidates) {
    if (plan.emptied.count(s.replica_id)) {
      if (trace) trace->lines.push_back("source " + describe(s) + ": skip (emptied)");
      continue;
    }
    if (plan.assigned.count(s.replica_id)) {
      if (trace) trace->lines.push_back("source " + describe(s) + ": skip (destination)");
      continue;
    }
    std::ostringstream os;
    os << "source " << describe(s) << ": D_s = {";
    const RolloutSnapshot* best = nullptr;
    double best_load = 0.0;
    bool first = true;
    for (const auto& d : candidates) {
      if (plan.emptied.count(d.replica_id) || d.replica_id == s.replica_id) continue;
      if (trace) ++trace->can_fit_evaluations;
      if (!can_fit(d, s, plan, c_max, b)) continue;
      const double load = load_of(d, plan).c;
      if (trace) {
        os << (first ? "" : ", ") << "r" << d.replica_id << ":" << fmt("%.4f", load);
        first = false;
      }
      if (!best || load > best_load ||
          (load == best_load && d.replica_id < best->replica_id)) {
        best = &d;
        best_load = load;
      }
    }
    os << "}";
    if (best) {
      os << " -> r" << best->replica_id;
      plan.pairs.emplace_back(s.replica_id, best->replica_id);
      plan.emptied.insert(s.replica_id);
      Load& a = plan.assigned[best->replica_id];
      a.c += s.c_used;
      a.n += s.n_reqs;
    } else {
      os << " -> none";
    }
    if (trace) trace->lines.push_back(os.str());
  }
  return plan;
}

std::vector<RolloutSnapshot> read_snapshots(std::istream& in) {
  std::vector<RolloutSnapshot> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r,") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    RolloutSnapshot s;
    std::string extra;
    if (!(ss >> s.replica_id >> s.weight_version >> s.c_used >> s.c_prev >> s.n_reqs) ||
        (ss >> extra) || s.c_used < 0.0 || s.c_used > 1.0 || s.n_reqs < 0) {
      throw std::runtime_error("line " + std::to_string(lineno) +
                               ": expected 'id version C_used C_prev N_reqs'");
    }
    out.push_back(s);
  }
  return out;
}

void RepackConfig::validate() const {
  if (!(c_max > 0.0 && c_max <= 1.0)) throw std::invalid_argument("c_max must be in (0, 1]");
  if (!(period > 0.0)) throw std::invalid_argument("repack period must be > 0");
  if (!(transfer_overhead >= 0.0)) throw std::invalid_argument("transfer_overhead must be >= 0");
}

ExecuteResult execute(const RepackPlan& plan, std::vector<Replica>& replicas,
                      TrajectoryTable& table, double c_max, Seconds now,
                      Seconds transfer_overhead) {
  ExecuteResult result;
  for (const auto& [sid, did] : plan.pairs) {
    Replica& src = replicas.at(sid);
    Replica& dst = replicas.at(did);
    const int b = dst.spec().decode.roofline_batch;
    const bool valid = !src.failed() && !dst.failed() && !src.fetching() && !dst.fetching() &&
                       src.weight_version() == dst.weight_version() && src.n_reqs() > 0 &&
                       dst.c_used() + src.c_used() <= c_max && dst.n_reqs() + src.n_reqs() <= b;
    if (!valid) {
      result.dropped.emplace_back(sid, did);
      continue;
    }
    ExecutedPair done{sid, did, src.release_all(table)};
    src.set_c_prev(0.0);
    dst.abort_step();
    for (TrajectoryId id : done.moved) dst.admit(table, id);
    dst.set_paused_until(std::max(dst.paused_until(), now + transfer_overhead));
    dst.set_c_prev(dst.c_used());
    result.executed.push_back(std::move(done));
  }
  return result;
}

}  // namespace rollsim

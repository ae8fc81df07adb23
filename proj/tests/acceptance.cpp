// End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//
// Exit status is 0 when every criterion passes, or when the only failures
// are timing checks this host cannot satisfy (fewer cores than relay
// nodes). Those still print FAIL with the measured numbers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "repack_oracle.hpp"
#include "rollsim/config.hpp"
#include "rollsim/live_relay.hpp"
#include "rollsim/policies.hpp"
#include "rollsim/relay_model.hpp"
#include "rollsim/repack.hpp"
#include "rollsim/sim_relay.hpp"
#include "rollsim/summary.hpp"

using namespace rollsim;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances
constexpr int kRepackInstances = 10'000;
constexpr int kRepackMaxSet = 12;
constexpr int kRepackOracleMaxSet = 8;
constexpr int kModelParamSets = 100;
constexpr std::int64_t kModelMaxK = 4096;
constexpr double kDecompositionRelTol = 1e-12;
constexpr double kChainFlatness = 1.05;
constexpr double kTransportRelTol = 1e-12;
constexpr int kLiveNodes = 8;
constexpr std::size_t kLivePayload = 256u << 20;
constexpr double kLiveHopFactor = 2.0;
constexpr int kLiveKillSamples = 10;
constexpr double kLiveRebuildLimit = 1.0;
constexpr double kKvGainPoints = 0.08;
constexpr double kGenGain = 1.15;
constexpr double kLatencyChange = 0.05;
constexpr std::int64_t kStalenessP95 = 3;
constexpr std::int64_t kStalenessMax = 5;
constexpr double kTlOverSync = 1.2;
constexpr double kFaultRecoveryTol = 0.05;
constexpr Seconds kFaultTime = 1200.0;
constexpr Seconds kFaultSettle = 600.0;  // recovery window excluded from the comparison
constexpr double kMarkGapFactor = 1.5;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Outcome {
  bool pass = false;
  bool host_limited = false;  // failed only on a check this host cannot meet
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

ScenarioConfig default_scenario() {
  return load_config(fs::path(ROLLSIM_SOURCE_DIR) / "configs" / "default_skewed.json");
}

Summary steady(const Orchestrator& run) {
  return summarize(run.metrics(), {run.config().metrics.steady_start, run.config().horizon});
}

// ------------------------------------------------------------------ 1

Outcome repack_fidelity() {
  using namespace rollsim::oracle;
  Outcome out;
  std::ostringstream d;
  bool ok = true;

  // The two hand-traced instances, read from the files the CLI test uses.
  auto plan_of = [](const std::string& name, int b) {
    std::ifstream in(fs::path(ROLLSIM_SOURCE_DIR) / "tests" / "data" / name);
    auto groups = collect_and_group(read_snapshots(in));
    auto s = select_candidates(groups.begin()->second, 0.99, b);
    return plan_consolidation(s, 0.99, b);
  };
  const auto three = plan_of("repack_three.txt", 256);
  const auto two = plan_of("repack_two.txt", 256);
  const bool traces = three.pairs == std::vector<std::pair<ReplicaId, ReplicaId>>{{0, 2}, {1, 2}} &&
                      three.emptied == std::set<ReplicaId>{0, 1} && two.empty();
  ok = ok && traces;
  d << "hand traces " << (traces ? "match" : "DIFFER");

  RngStream rng(2024, "acceptance.repack");
  int invalid = 0, over_optimum = 0, over_bound = 0, oracle_runs = 0;
  std::map<int, int> gaps;
  const auto t0 = std::chrono::steady_clock::now();
  for (int trial = 0; trial < kRepackInstances; ++trial) {
    const int m = 1 + static_cast<int>(rng.uniform() * kRepackMaxSet);
    const int b = 20 + static_cast<int>(rng.uniform() * 80);
    auto items = random_items(rng, m);
    PlanTrace trace;
    const auto plan = plan_consolidation(to_snaps(items), 0.99, b, &trace);
    invalid += !plan_is_valid(plan, items, 99, b);
    over_bound += trace.can_fit_evaluations > 2 * m * m;
    if (m <= kRepackOracleMaxSet) {
      const int best = brute_force_optimum(items, 99, b);
      const int greedy = static_cast<int>(plan.emptied.size());
      over_optimum += greedy > best;
      ++gaps[best - greedy];
      ++oracle_runs;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ok = ok && invalid == 0 && over_optimum == 0 && over_bound == 0 && secs < 60.0;
  d << "; " << kRepackInstances << " sets: " << invalid << " invalid, " << over_bound
    << " over 2|S|^2 can_fit; vs optimum on " << oracle_runs << ": " << over_optimum << " above, gap {";
  bool first = true;
  for (const auto& [g, n] : gaps) {
    d << (first ? "" : ", ") << g << ":" << n;
    first = false;
  }
  d << "}; " << fmt("%.1f s", secs);
  out.pass = ok;
  out.detail = d.str();
  return out;
}

// ------------------------------------------------------------------ 2

Outcome broadcast_model() {
  Outcome out;
  RngStream rng(77, "acceptance.model");
  auto log_uniform = [&](double lo, double hi) { return lo * std::pow(hi / lo, rng.uniform()); };
  int not_optimal = 0;
  double worst_rel = 0.0;
  for (int i = 0; i < kModelParamSets; ++i) {
    BroadcastParams params{2 + static_cast<int>(rng.uniform() * 255), log_uniform(1e6, 1e11),
                           log_uniform(1e-11, 1e-8), log_uniform(1e-7, 1e-2)};
    const auto k_star = optimal_chunks(params, kModelMaxK);
    const double t_star = chain_latency(params, k_star);
    for (std::int64_t k = 1; k <= kModelMaxK; ++k) {
      if (t_star > chain_latency(params, k)) {
        ++not_optimal;
        break;
      }
    }
    if (params.p > 2) {
      const double k_c = continuous_optimal_chunks(params);
      const double direct = chain_latency_continuous(params, k_c);
      worst_rel = std::max(worst_rel, std::abs(latency_decomposition(params).total() - direct) / direct);
    }
  }
  const BroadcastParams two{2, 1.6e9, 1e-9, 5e-6};
  const BroadcastParams big{128, 1.6e9, 1e-9, 5e-6};
  const double ratio = latency_decomposition(big).total() / latency_decomposition(two).total();
  out.pass = not_optimal == 0 && worst_rel <= kDecompositionRelTol && ratio <= kChainFlatness;
  out.detail = std::to_string(not_optimal) + " of " + std::to_string(kModelParamSets) +
               " sets beaten by some k<=4096; decomposition rel err " + fmt("%.2e", worst_rel) +
               "; T*(128)/T*(2) = " + fmt("%.4f", ratio) + " (T*(128) = " +
               fmt("%.4f s)", latency_decomposition(big).total());
  return out;
}

// ------------------------------------------------------------------ 3

Outcome transport_equivalence() {
  Outcome out;
  double worst = 0.0;
  int missing = 0;
  for (int p = 2; p <= 16; ++p) {
    for (std::int64_t k = 1; k <= 16; ++k) {
      SimRelayConfig c;
      c.model_bytes = 1e9;
      c.t_byte = 1e-9;
      c.t_start = 1e-3;
      c.chunks = k;
      c.heartbeats = false;
      std::vector<NodeId> order;
      for (int i = 0; i < p; ++i) order.push_back(static_cast<NodeId>(i));
      Engine engine;
      SimRelayTier tier(engine, c, order);
      tier.publish(1);
      engine.run_until(100.0);
      const auto done = tier.completion_time(static_cast<NodeId>(p - 1), 1);
      if (!done) {
        ++missing;
        continue;
      }
      const double expected = chain_latency({p, c.model_bytes, c.t_byte, c.t_start}, k);
      worst = std::max(worst, std::abs((*done - *tier.broadcast_start(1)) - expected) / expected);
    }
  }
  out.pass = missing == 0 && worst <= kTransportRelTol;
  out.detail = "225 (p,k) pairs, " + std::to_string(missing) + " incomplete, max rel diff " + fmt("%.2e", worst);
  return out;
}

// ------------------------------------------------------------------ 4

Outcome live_relay() {
  using namespace rollsim::live;
  Outcome out;
  std::ostringstream d;

  BenchOptions hop;
  hop.nodes = 2;
  hop.chunks = 1;
  hop.payload_bytes = kLivePayload;
  const auto single = run_bench(hop);

  BenchOptions full;
  full.nodes = kLiveNodes;
  full.payload_bytes = kLivePayload;
  const auto chain = run_bench(full);

  const bool digests = single.digests_agree && chain.completed && chain.digests_agree;
  const double ratio = chain.broadcast_s / single.broadcast_s;
  const bool timing = chain.completed && ratio <= kLiveHopFactor;
  d << "8-node digests " << (digests ? "agree" : "DIFFER") << "; broadcast " << fmt("%.3f s", chain.broadcast_s)
    << " vs single hop " << fmt("%.3f s", single.broadcast_s) << " = " << fmt("%.2fx", ratio);

  // Non-master kills spread over positions and chunk boundaries.
  int kill_ok = 0;
  double worst_rebuild = 0.0;
  for (int i = 0; i < kLiveKillSamples; ++i) {
    BenchOptions kill = full;
    kill.kill_node = 1 + i % (kLiveNodes - 1);
    kill.kill_at_chunk = static_cast<std::uint32_t>(
        1 + (static_cast<std::int64_t>(chain.chunks) - 1) * i / (kLiveKillSamples - 1));
    kill.kill_at_chunk = std::min(kill.kill_at_chunk, chain.chunks);
    const auto r = run_bench(kill);
    const bool good = r.completed && r.digests_agree && r.rebuild_s && *r.rebuild_s < kLiveRebuildLimit;
    kill_ok += good;
    if (r.rebuild_s) worst_rebuild = std::max(worst_rebuild, *r.rebuild_s);
    if (!good) {
      d << "; kill pos " << *kill.kill_node << " chunk " << kill.kill_at_chunk << " failed";
    }
  }
  d << "; kills " << kill_ok << "/" << kLiveKillSamples << " ok, worst rebuild " << fmt("%.4f s", worst_rebuild);

  const bool rest = digests && kill_ok == kLiveKillSamples;
  out.pass = rest && timing;
  const unsigned cores = std::thread::hardware_concurrency();
  if (!timing && rest && cores < static_cast<unsigned>(kLiveNodes)) {
    out.host_limited = true;
    d << "; timing needs concurrent links, host has " << cores << " core(s)";
  }
  out.detail = d.str();
  return out;
}

// ------------------------------------------------------------------ 5, 6, 7

struct PolicyRuns {
  std::map<PolicyKind, std::vector<Summary>> summaries;
  std::vector<Summary> repack_off;
  // Trajectory-level, repack on.
  std::size_t multi_segment = 0;
  std::vector<std::int64_t> staleness;
  double reprefill = 0.0;
  std::size_t partial_segments = 0, partial_records = 0;
};

PolicyRuns run_policies() {
  PolicyRuns runs;
  const auto base = default_scenario();
  for (auto seed : kSeeds) {
    for (auto kind : {PolicyKind::Synchronous, PolicyKind::OneStep, PolicyKind::Stream,
                      PolicyKind::PartialRollout, PolicyKind::TrajectoryLevel}) {
      auto c = base;
      c.seed = seed;
      c.policy.kind = kind;
      c.policy.repack_enabled = kind == PolicyKind::TrajectoryLevel;
      Orchestrator run(c);
      run.run();
      runs.summaries[kind].push_back(steady(run));
      if (kind == PolicyKind::TrajectoryLevel) {
        for (const auto& t : run.trajectories().rows()) runs.multi_segment += t.version_segments.size() > 1;
        for (const auto& r : run.buffer().records()) runs.staleness.push_back(r.staleness);
      }
      if (kind == PolicyKind::PartialRollout) {
        runs.reprefill += run.reprefill_total();
        for (const auto& r : run.buffer().records()) {
          runs.partial_segments += r.segment_count;
          ++runs.partial_records;
        }
      }
    }
    auto off = base;
    off.seed = seed;
    off.policy.repack_enabled = false;
    Orchestrator run(off);
    run.run();
    runs.repack_off.push_back(steady(run));
  }
  return runs;
}

template <typename F>
double mean_of(const std::vector<Summary>& v, F field) {
  double s = 0.0;
  for (const auto& x : v) s += field(x);
  return s / static_cast<double>(v.size());
}

Outcome repack_benefit(const PolicyRuns& runs) {
  const auto& on = runs.summaries.at(PolicyKind::TrajectoryLevel);
  const auto& off = runs.repack_off;
  const double kv_on = mean_of(on, [](const Summary& s) { return s.kv_utilization; });
  const double kv_off = mean_of(off, [](const Summary& s) { return s.kv_utilization; });
  const double gen_on = mean_of(on, [](const Summary& s) { return s.gen_throughput; });
  const double gen_off = mean_of(off, [](const Summary& s) { return s.gen_throughput; });
  const double lat_on = mean_of(on, [](const Summary& s) { return s.latency_mean; });
  const double lat_off = mean_of(off, [](const Summary& s) { return s.latency_mean; });
  const double lat_change = std::abs(lat_on - lat_off) / lat_off;
  Outcome out;
  out.pass = kv_on - kv_off >= kKvGainPoints && gen_on >= kGenGain * gen_off && lat_change <= kLatencyChange;
  out.detail = "KV " + fmt("%.3f", kv_off) + " -> " + fmt("%.3f", kv_on) + "; gen " + fmt("%.0f", gen_off) +
               " -> " + fmt("%.0f tok/s", gen_on) + " (" + fmt("%+.1f%%", 100.0 * (gen_on / gen_off - 1.0)) +
               "); latency " + fmt("%.2f", lat_off) + " -> " + fmt("%.2f s", lat_on) + " (" +
               fmt("%.1f%%", 100.0 * lat_change) + ")";
  return out;
}

Outcome staleness(const PolicyRuns& runs) {
  auto s = runs.staleness;
  std::sort(s.begin(), s.end());
  Outcome out;
  if (s.empty()) {
    out.detail = "no committed trajectories";
    return out;
  }
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(s.size())));
  const auto p95 = s[std::max<std::size_t>(rank, 1) - 1];
  const auto max = s.back();
  out.pass = runs.multi_segment == 0 && p95 <= kStalenessP95 && max <= kStalenessMax;
  out.detail = std::to_string(s.size()) + " trajectories, " + std::to_string(runs.multi_segment) +
               " with >1 version segment; P95 " + std::to_string(p95) + ", max " + std::to_string(max);
  return out;
}

Outcome policy_ordering(const PolicyRuns& runs) {
  auto thr = [&](PolicyKind k) {
    return mean_of(runs.summaries.at(k), [](const Summary& s) { return s.throughput; });
  };
  const double sync = thr(PolicyKind::Synchronous), one = thr(PolicyKind::OneStep),
               stream = thr(PolicyKind::Stream), partial = thr(PolicyKind::PartialRollout),
               tl = thr(PolicyKind::TrajectoryLevel);
  const double seg_mean = runs.partial_records
                              ? static_cast<double>(runs.partial_segments) / static_cast<double>(runs.partial_records)
                              : 0.0;
  Outcome out;
  out.pass = tl >= kTlOverSync * sync && tl >= stream && stream >= one && one >= sync && runs.reprefill > 0.0 &&
             seg_mean > 1.0;
  out.detail = "tok/s sync " + fmt("%.0f", sync) + ", one-step " + fmt("%.0f", one) + ", stream " +
               fmt("%.0f", stream) + ", partial " + fmt("%.0f", partial) + ", trajectory-level " +
               fmt("%.0f", tl) + " (" + fmt("%.2fx", tl / sync) + " sync); partial re-prefill " +
               fmt("%.1f s", runs.reprefill) + ", mean segments " + fmt("%.3f", seg_mean);
  return out;
}

// ------------------------------------------------------------------ 8

Outcome fault_recovery() {
  auto base = default_scenario();
  auto faulty = base;
  faulty.faults = {{kFaultTime, FaultTarget::Machine, 3, FaultKind::Evict}};
  Orchestrator clean(base), hit(faulty);
  clean.run();
  hit.run();

  const SummaryWindow dip{kFaultTime, kFaultTime + 60.0};
  const SummaryWindow late{kFaultTime + kFaultSettle, base.horizon};
  const double dip_clean = summarize(clean.metrics(), dip).gen_throughput;
  const double dip_hit = summarize(hit.metrics(), dip).gen_throughput;
  const double late_clean = summarize(clean.metrics(), late).gen_throughput;
  const double late_hit = summarize(hit.metrics(), late).gen_throughput;
  const double rel = std::abs(late_hit - late_clean) / late_clean;

  const auto c = hit.conservation();

  // Trainer cadence: the widest gap across the fault against the pre-fault median.
  const auto& marks = hit.metrics().iteration_marks();
  std::vector<double> before;
  double across = 0.0;
  std::size_t after = 0;
  for (std::size_t i = 1; i < marks.size(); ++i) {
    const double gap = marks[i].t - marks[i - 1].t;
    if (marks[i].t <= kFaultTime) before.push_back(gap);
    if (marks[i].t > kFaultTime) {
      ++after;
      if (marks[i - 1].t <= kFaultTime + kFaultSettle) across = std::max(across, gap);
    }
  }
  double median = 0.0;
  if (!before.empty()) {
    std::sort(before.begin(), before.end());
    median = before[before.size() / 2];
  }
  const bool cadence = after > 0 && median > 0.0 && across <= kMarkGapFactor * median;

  Outcome out;
  out.pass = dip_hit < dip_clean && rel <= kFaultRecoveryTol && c.exact() && cadence;
  out.detail = "gen " + fmt("%.0f", dip_clean) + " -> " + fmt("%.0f tok/s", dip_hit) + " in the minute after the eviction; " +
               "late window " + fmt("%.0f", late_hit) + " vs " + fmt("%.0f", late_clean) + " (" +
               fmt("%.2f%%", 100.0 * rel) + "); tokens decoded " + std::to_string(c.decoded) + " = committed " +
               std::to_string(c.committed) + " + partial " + std::to_string(c.partial) + (c.exact() ? "" : " MISMATCH") +
               "; " + std::to_string(after) + " iterations after the fault, widest gap " + fmt("%.1f s", across) +
               " vs median " + fmt("%.1f s", median);
  return out;
}

// ------------------------------------------------------------------ 9

Outcome determinism() {
  auto c = default_scenario();
  c.horizon = 1500.0;
  c.faults = {{600.0, FaultTarget::Machine, 2, FaultKind::Evict}, {900.0, FaultTarget::Relay, 0, FaultKind::Crash}};
  const auto root = fs::temp_directory_path() / "rollsim_acceptance_det";
  fs::remove_all(root);
  for (const char* sub : {"a", "b"}) {
    Orchestrator run(c);
    run.run();
    write_outputs(run, root / sub);
  }
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  int files = 0, differ = 0;
  for (const auto& e : fs::directory_iterator(root / "a")) {
    ++files;
    differ += slurp(e.path()) != slurp(root / "b" / e.path().filename());
  }
  fs::remove_all(root);
  Outcome out;
  out.pass = files > 0 && differ == 0;
  out.detail = std::to_string(files) + " output files, " + std::to_string(differ) + " differ";
  return out;
}

}  // namespace

int main() {
  std::map<int, Outcome> results;
  auto timed = [&](int id, const std::function<Outcome()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.detail += fmt(" [%.1f s]", s);
    std::printf("CRITERION %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    results[id] = o;
  };

  timed(1, repack_fidelity);
  timed(2, broadcast_model);
  timed(3, transport_equivalence);
  timed(4, live_relay);
  PolicyRuns runs;
  bool have_runs = false;
  auto with_runs = [&](Outcome (*f)(const PolicyRuns&)) {
    return [&, f] {
      if (!have_runs) {
        runs = run_policies();
        have_runs = true;
      }
      return f(runs);
    };
  };
  timed(5, with_runs(repack_benefit));
  timed(6, with_runs(staleness));
  timed(7, with_runs(policy_ordering));
  timed(8, fault_recovery);
  timed(9, determinism);

  int failed = 0, host_limited = 0;
  for (const auto& [id, o] : results) {
    if (!o.pass) (o.host_limited ? host_limited : failed)++;
  }
  std::printf("acceptance: %zu criteria, %d failed, %d failed on host limits only\n", results.size(),
              failed + host_limited, host_limited);
  return failed == 0 ? 0 : 1;
}

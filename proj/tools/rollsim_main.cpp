// rollsim command line: simulate, broadcast-model, relay-bench, repack-trace.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rollsim/config.hpp"
#include "rollsim/live_relay.hpp"
#include "rollsim/policies.hpp"
#include "rollsim/relay_model.hpp"
#include "rollsim/repack.hpp"
#include "rollsim/summary.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitExhausted = 3;

constexpr const char* kSeedEnv = "ROLLSIM_SEED";

int cmd_simulate(const std::string& path, const std::string& out_dir, const std::string& policy,
                 std::optional<std::uint64_t> seed) {
  using namespace rollsim;
  ScenarioConfig config;
  try {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    config = parse_config(ss.str(), std::filesystem::path(path).parent_path());
    // The environment only replaces the built-in default, never an explicit seed.
    const bool explicit_seed = nlohmann::json::parse(ss.str()).contains("seed");
    if (const char* env = std::getenv(kSeedEnv); env && !explicit_seed) {
      char* end = nullptr;
      const auto v = std::strtoull(env, &end, 10);
      if (end == env || *end != '\0') throw ConfigError(kSeedEnv, "expected an unsigned integer");
      config.seed = v;
    }
    if (seed) config.seed = *seed;
    if (!policy.empty()) {
      auto k = parse_policy_kind(policy);
      if (!k) throw ConfigError("--policy", "unknown policy \"" + policy + "\"");
      config.policy.kind = *k;
      if (*k != PolicyKind::TrajectoryLevel) config.policy.repack_enabled = false;
    }
    config.validate();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    Orchestrator run(config);
    run.run();
    write_outputs(run, out_dir);
    const Summary s = summarize(run.metrics(), {config.metrics.steady_start, config.horizon});
    std::cout << to_json(s) << "\n";
  } catch (const RecoveryExhausted& e) {
    std::cerr << "recovery exhausted: " << e.what() << "\n";
    return kExitExhausted;
  }
  return kExitOk;
}

int cmd_broadcast_model(int p, double m, double t_byte, double t_start, std::int64_t k, bool sweep) {
  using namespace rollsim;
  auto row = [&](int nodes) {
    BroadcastParams params{nodes, m, t_byte, t_start};
    params.validate();
    const std::int64_t kk = k > 0 ? k : optimal_chunks(params);
    const auto terms = latency_decomposition(params);
    std::cout << std::setw(5) << nodes << std::setw(8) << kk << std::setw(16) << chain_latency(params, kk)
              << std::setw(16) << terms.total() << std::setw(14) << terms.bandwidth << std::setw(14)
              << terms.latency << std::setw(14) << terms.pipeline << std::setw(10)
              << terms.total() / terms.bandwidth << "\n";
  };
  try {
    std::cout << std::setprecision(6) << std::setw(5) << "p" << std::setw(8) << "k" << std::setw(16)
              << "T(p,k)" << std::setw(16) << "T*(p)" << std::setw(14) << "bandwidth" << std::setw(14)
              << "latency" << std::setw(14) << "pipeline" << std::setw(10) << "T*/MTb" << "\n";
    if (sweep) {
      for (int n = 2; n <= p; ++n) row(n);
    } else {
      row(p);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid parameters: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

int cmd_relay_bench(const rollsim::live::BenchOptions& opts) {
  using namespace rollsim::live;
  BenchResult r;
  try {
    r = run_bench(opts);
  } catch (const std::exception& e) {
    std::cerr << "relay-bench failed: " << e.what() << "\n";
    return kExitRuntime;
  }
  std::cout << "nodes " << opts.nodes << "  payload " << opts.payload_bytes << " bytes  chunks "
            << r.chunks << "\n";
  std::cout << "source digest " << std::hex << r.source_digest << std::dec << "\n";
  for (const auto& n : r.nodes) {
    std::cout << "node " << n.id << (n.survived ? "  alive " : "  killed");
    if (n.completion_s) {
      std::cout << "  complete " << std::fixed << std::setprecision(4) << *n.completion_s << " s";
    } else {
      std::cout << "  incomplete";
    }
    std::cout << "  digest " << std::hex << n.digest << std::dec << "\n";
  }
  std::cout << std::fixed << std::setprecision(4) << "broadcast " << r.broadcast_s << " s  completed "
            << (r.completed ? "yes" : "no") << "  digests " << (r.digests_agree ? "agree" : "DIFFER")
            << "  epoch " << r.final_epoch << "\n";
  if (r.detect_s) std::cout << "detection " << *r.detect_s << " s\n";
  if (r.rebuild_s) std::cout << "rebuild " << std::setprecision(6) << *r.rebuild_s << " s\n";
  return r.completed && r.digests_agree ? kExitOk : kExitRuntime;
}

int cmd_repack_trace(const std::string& path, double c_max, int b) {
  using namespace rollsim;
  std::ifstream in(path);
  if (!in) {
    std::cerr << "cannot open " << path << "\n";
    return kExitConfig;
  }
  std::vector<RolloutSnapshot> snaps;
  try {
    snaps = read_snapshots(in);
  } catch (const std::exception& e) {
    std::cerr << path << ": " << e.what() << "\n";
    return kExitConfig;
  }
  for (const auto& [version, group] : collect_and_group(snaps)) {
    std::cout << "version " << version << ": " << group.size() << " replicas\n";
    PlanTrace trace;
    auto candidates = select_candidates(group, c_max, b, &trace);
    const RepackPlan plan = plan_consolidation(candidates, c_max, b, &trace);
    for (const auto& line : trace.lines) std::cout << "  " << line << "\n";
    std::cout << "  plan [";
    for (std::size_t i = 0; i < plan.pairs.size(); ++i) {
      std::cout << (i ? ", " : "") << "(" << plan.pairs[i].first << "," << plan.pairs[i].second << ")";
    }
    std::cout << "]  released " << plan.emptied.size() << "  can_fit evaluations "
              << trace.can_fit_evaluations << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rollsim: asynchronous RL rollout simulator and relay tools"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", policy;
  std::optional<std::uint64_t> seed;
  auto* sim = app.add_subcommand("simulate", "Run a scenario and write metric files");
  sim->add_option("config", config_path, "Scenario JSON file")->required();
  sim->add_option("-o,--out", out_dir, "Output directory");
  sim->add_option("--policy", policy, "Override policy.kind");
  sim->add_option("--seed", seed, "Override the seed");

  int p = 2;
  double m = 1e9, t_byte = 1e-9, t_start = 1e-3;
  std::int64_t k = 0;
  bool sweep = false;
  auto* bm = app.add_subcommand("broadcast-model", "Evaluate the chain broadcast latency model");
  bm->add_option("-p,--nodes", p, "Chain length including the master");
  bm->add_option("-M,--model-bytes", m, "Payload bytes");
  bm->add_option("--t-byte", t_byte, "Seconds per byte");
  bm->add_option("--t-start", t_start, "Per-message startup seconds");
  bm->add_option("-k,--chunks", k, "Chunk count (default: optimal)");
  bm->add_flag("--sweep", sweep, "Print every chain length from 2 to p");

  rollsim::live::BenchOptions bench;
  int kill_node = -1;
  auto* rb = app.add_subcommand("relay-bench", "Broadcast over live loopback relay nodes");
  rb->add_option("-n,--nodes", bench.nodes, "Relay nodes");
  rb->add_option("--payload-bytes", bench.payload_bytes, "Payload size");
  rb->add_option("--t-start", bench.t_start, "Startup estimate used to choose k");
  rb->add_option("--t-byte", bench.t_byte, "Per-byte estimate used to choose k");
  rb->add_option("-k,--chunks", bench.chunks, "Chunk count (default: optimal)");
  rb->add_option("--kill-node", kill_node, "Chain position to kill");
  rb->add_option("--kill-at-chunk", bench.kill_at_chunk, "Kill after this many chunks");
  rb->add_option("--timeout", bench.timeout_s, "Give up after this many seconds");
  rb->add_option("--seed", bench.seed, "Payload seed");

  std::string snap_path;
  double c_max = 0.99;
  int roofline = 64;
  auto* rt = app.add_subcommand("repack-trace", "Trace the consolidation planner on a snapshot file");
  rt->add_option("snapshots", snap_path, "Lines of 'id version C_used C_prev N_reqs'")->required();
  rt->add_option("--c-max", c_max, "Full-capacity threshold");
  rt->add_option("-B,--roofline-batch", roofline, "Roofline batch size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (*sim) return cmd_simulate(config_path, out_dir, policy, seed);
  if (*bm) return cmd_broadcast_model(p, m, t_byte, t_start, k, sweep);
  if (*rb) {
    if (kill_node >= 0) bench.kill_node = kill_node;
    return cmd_relay_bench(bench);
  }
  if (*rt) return cmd_repack_trace(snap_path, c_max, roofline);
  return kExitConfig;
}

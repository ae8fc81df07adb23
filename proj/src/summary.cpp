#include "rollsim/summary.hpp"

#include <algorithm>
#include <cmath>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace rollsim {

namespace {

// Parses "replica.<id>.<field>"; returns false for any other name.
bool replica_field(std::string_view name, int* id, std::string_view* field) {
  constexpr std::string_view prefix = "replica.";
  if (name.substr(0, prefix.size()) != prefix) return false;
  name.remove_prefix(prefix.size());
  const auto dot = name.find('.');
  if (dot == std::string_view::npos || dot == 0) return false;
  int value = 0;
  for (char c : name.substr(0, dot)) {
    if (c < '0' || c > '9') return false;
    value = value * 10 + (c - '0');
  }
  *id = value;
  *field = name.substr(dot + 1);
  return true;
}

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

}  // namespace

Summary summarize(const MetricsLog& log, SummaryWindow window) {
  Summary s;
  s.window_start = window.start;
  s.window_end = window.end;
  const auto inside = [&](Seconds t) { return t >= window.start && t <= window.end; };

  std::int64_t trained = 0;
  for (const auto& m : log.iteration_marks()) {
    ++s.iterations_total;
    if (m.t > window.start && m.t <= window.end) {
      ++s.iterations;
      trained += m.tokens;
    }
  }
  const double span = window.end - window.start;
  if (span > 0.0) s.throughput = static_cast<double>(trained) / span;

  // Cumulative decode counter: last value at or before each window edge.
  double gen_lo = 0.0, gen_hi = 0.0;
  Seconds t_lo = 0.0, t_hi = 0.0;
  bool have_lo = false, have_hi = false;

  double kv_sum = 0.0;
  std::size_t kv_n = 0;
  int max_replica = -1;
  std::vector<std::int64_t> staleness;
  double latency_sum = 0.0, segments_sum = 0.0;
  std::int64_t segments_n = 0;

  for (const auto& x : log.samples()) {
    int id = 0;
    std::string_view field;
    if (replica_field(x.name, &id, &field)) {
      max_replica = std::max(max_replica, id);
      if (field == "kv" && inside(x.t)) {
        kv_sum += x.value;
        ++kv_n;
      }
      continue;
    }
    if (x.name == "gen.tokens_total") {
      if (x.t <= window.start) {
        gen_lo = x.value;
        t_lo = x.t;
        have_lo = true;
      }
      if (x.t <= window.end) {
        gen_hi = x.value;
        t_hi = x.t;
        have_hi = true;
      }
    } else if (x.name == "traj.staleness" && inside(x.t)) {
      staleness.push_back(static_cast<std::int64_t>(x.value));
    } else if (x.name == "traj.latency" && inside(x.t)) {
      latency_sum += x.value;
      ++s.completed;
    } else if (x.name == "traj.segments" && inside(x.t)) {
      segments_sum += x.value;
      ++segments_n;
    } else if (x.name == "repack.pairs") {
      ++s.repack_events;
      s.repack_pairs += static_cast<std::int64_t>(x.value);
    } else if (x.name == "repack.moved") {
      s.repack_moved += static_cast<std::int64_t>(x.value);
    } else if (x.name == "partial.reprefill_s") {
      s.reprefill_s = x.value;
    } else if (starts_with(x.name, "fault.")) {
      ++s.faults;
    } else if (x.name == "recovery.version_fallback") {
      ++s.version_fallbacks;
    } else if (x.name == "trainer.publish_rejected") {
      ++s.publish_rejected;
    }
  }

  if (have_lo && have_hi && t_hi > t_lo) s.gen_throughput = (gen_hi - gen_lo) / (t_hi - t_lo);
  if (kv_n > 0) s.kv_utilization = kv_sum / static_cast<double>(kv_n);
  s.replicas = max_replica + 1;
  if (s.replicas > 0) {
    double b = 0.0;
    for (int r = 0; r < s.replicas; ++r) {
      b += bubble_fraction(log, static_cast<std::uint32_t>(r), {window.start, window.end});
    }
    s.bubble_fraction = b / s.replicas;
  }
  if (!staleness.empty()) {
    double sum = 0.0;
    for (auto v : staleness) {
      ++s.staleness_histogram[v];
      sum += static_cast<double>(v);
    }
    s.staleness_mean = sum / static_cast<double>(staleness.size());
    std::sort(staleness.begin(), staleness.end());
    // nearest-rank percentile
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(staleness.size())));
    s.staleness_p95 = staleness[std::max<std::size_t>(rank, 1) - 1];
    s.staleness_max = staleness.back();
  }
  if (s.completed > 0) s.latency_mean = latency_sum / static_cast<double>(s.completed);
  if (segments_n > 0) s.segments_mean = segments_sum / static_cast<double>(segments_n);
  return s;
}

std::string to_json(const Summary& s, int indent) {
  nlohmann::ordered_json j;
  j["window_start_s"] = s.window_start;
  j["window_end_s"] = s.window_end;
  j["iterations"] = s.iterations;
  j["iterations_total"] = s.iterations_total;
  j["throughput_tokens_per_s"] = s.throughput;
  j["gen_throughput_tokens_per_s"] = s.gen_throughput;
  j["kv_utilization_mean"] = s.kv_utilization;
  j["bubble_fraction_mean"] = s.bubble_fraction;
  nlohmann::ordered_json hist = nlohmann::ordered_json::object();
  for (const auto& [k, v] : s.staleness_histogram) hist[std::to_string(k)] = v;
  j["staleness_histogram"] = hist;
  j["staleness_mean"] = s.staleness_mean;
  j["staleness_p95"] = s.staleness_p95;
  j["staleness_max"] = s.staleness_max;
  j["completed"] = s.completed;
  j["latency_mean_s"] = s.latency_mean;
  j["segments_mean"] = s.segments_mean;
  j["repack_events"] = s.repack_events;
  j["repack_pairs"] = s.repack_pairs;
  j["repack_moved"] = s.repack_moved;
  j["reprefill_s"] = s.reprefill_s;
  j["faults"] = s.faults;
  j["version_fallbacks"] = s.version_fallbacks;
  j["publish_rejected"] = s.publish_rejected;
  j["replicas"] = s.replicas;
  return j.dump(indent);
}

}  // namespace rollsim

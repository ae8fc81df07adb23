#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "rollsim/simcore.hpp"

namespace rollsim {

struct SummaryWindow {
  Seconds start = 300.0;
  Seconds end = 3600.0;
};

// Aggregates computed from a metrics log alone, so a log written to disk and
// read back summarizes to the same values.
struct Summary {
  Seconds window_start = 0.0;
  Seconds window_end = 0.0;
  std::size_t iterations = 0;          // trainer iterations inside the window
  std::size_t iterations_total = 0;
  double throughput = 0.0;             // trained tokens per second inside the window
  double gen_throughput = 0.0;         // decoded tokens per second inside the window
  double kv_utilization = 0.0;         // mean sampled c_used over replicas
  double bubble_fraction = 0.0;        // mean over replicas
  std::map<std::int64_t, std::int64_t> staleness_histogram;
  double staleness_mean = 0.0;
  std::int64_t staleness_p95 = 0;
  std::int64_t staleness_max = 0;
  std::int64_t completed = 0;
  double latency_mean = 0.0;
  double segments_mean = 0.0;
  std::int64_t repack_events = 0;
  std::int64_t repack_pairs = 0;
  std::int64_t repack_moved = 0;
  double reprefill_s = 0.0;
  std::int64_t faults = 0;
  std::int64_t version_fallbacks = 0;
  std::int64_t publish_rejected = 0;
  int replicas = 0;
};

Summary summarize(const MetricsLog& log, SummaryWindow window);

std::string to_json(const Summary& s, int indent = 2);

}  // namespace rollsim

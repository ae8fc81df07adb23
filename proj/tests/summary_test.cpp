#include <gtest/gtest.h>

#include <sstream>

#include <json.hpp>

#include "rollsim/summary.hpp"

using namespace rollsim;

namespace {

// Two replicas over [10, 30]. Replica 0 decodes throughout; replica 1 is
// idle for the first half.
MetricsLog hand_log() {
  MetricsLog log;
  log.record(0.0, replica_state_metric(0), static_cast<double>(ActivityCode::Decoding));
  log.record(0.0, replica_state_metric(1), static_cast<double>(ActivityCode::Idle));
  log.record(20.0, replica_state_metric(1), static_cast<double>(ActivityCode::Decoding));
  log.record(5.0, "gen.tokens_total", 100.0);
  log.record(10.0, "gen.tokens_total", 400.0);
  log.record(30.0, "gen.tokens_total", 2400.0);
  log.record(40.0, "gen.tokens_total", 9999.0);
  log.record(15.0, "replica.0.kv", 0.5);
  log.record(15.0, "replica.1.kv", 0.1);
  log.record(25.0, "replica.0.kv", 0.9);
  log.record(25.0, "replica.1.kv", 0.5);
  log.record(35.0, "replica.0.kv", 1.0);  // outside
  // Staleness 0 x 18, 1 x 1, 3 x 1: p95 by nearest rank is the 19th value.
  for (int i = 0; i < 18; ++i) log.record(12.0, "traj.staleness", 0.0);
  log.record(13.0, "traj.staleness", 1.0);
  log.record(14.0, "traj.staleness", 3.0);
  log.record(5.0, "traj.staleness", 7.0);  // before the window
  log.record(12.0, "traj.latency", 2.0);
  log.record(14.0, "traj.latency", 4.0);
  log.record(12.0, "traj.segments", 1.0);
  log.record(14.0, "traj.segments", 2.0);
  log.record(16.0, "repack.pairs", 2.0);
  log.record(16.0, "repack.moved", 5.0);
  log.record(18.0, "fault.replica", 1.0);
  log.record(19.0, "recovery.version_fallback", 1.0);
  log.mark_iteration(8.0, 1000);
  log.mark_iteration(20.0, 3000);
  log.mark_iteration(30.0, 1000);
  log.mark_iteration(31.0, 500);
  return log;
}

}  // namespace

TEST(Summary, HandBuiltLog) {
  const auto s = summarize(hand_log(), {10.0, 30.0});
  EXPECT_EQ(s.iterations_total, 4u);
  EXPECT_EQ(s.iterations, 2u);
  EXPECT_DOUBLE_EQ(s.throughput, 4000.0 / 20.0);
  EXPECT_DOUBLE_EQ(s.gen_throughput, (2400.0 - 400.0) / 20.0);
  EXPECT_DOUBLE_EQ(s.kv_utilization, (0.5 + 0.1 + 0.9 + 0.5) / 4.0);
  EXPECT_DOUBLE_EQ(s.bubble_fraction, (0.0 + 0.5) / 2.0);
  EXPECT_EQ(s.replicas, 2);
  EXPECT_EQ(s.staleness_histogram.at(0), 18);
  EXPECT_EQ(s.staleness_histogram.at(1), 1);
  EXPECT_EQ(s.staleness_histogram.at(3), 1);
  EXPECT_EQ(s.staleness_histogram.count(7), 0u);
  EXPECT_DOUBLE_EQ(s.staleness_mean, 4.0 / 20.0);
  EXPECT_EQ(s.staleness_p95, 1);
  EXPECT_EQ(s.staleness_max, 3);
  EXPECT_EQ(s.completed, 2);
  EXPECT_DOUBLE_EQ(s.latency_mean, 3.0);
  EXPECT_DOUBLE_EQ(s.segments_mean, 1.5);
  EXPECT_EQ(s.repack_events, 1);
  EXPECT_EQ(s.repack_pairs, 2);
  EXPECT_EQ(s.repack_moved, 5);
  EXPECT_EQ(s.faults, 1);
  EXPECT_EQ(s.version_fallbacks, 1);
}

TEST(Summary, EmptyLog) {
  const auto s = summarize(MetricsLog{}, {0.0, 10.0});
  EXPECT_EQ(s.iterations, 0u);
  EXPECT_EQ(s.replicas, 0);
  EXPECT_DOUBLE_EQ(s.throughput, 0.0);
  EXPECT_TRUE(s.staleness_histogram.empty());
}

TEST(Summary, SameAfterJsonlRoundTrip) {
  const auto log = hand_log();
  std::stringstream ss;
  log.write_jsonl(ss);
  const auto back = MetricsLog::read_jsonl(ss);
  EXPECT_EQ(to_json(summarize(log, {10.0, 30.0})), to_json(summarize(back, {10.0, 30.0})));
}

TEST(Summary, JsonFields) {
  const auto j = nlohmann::json::parse(to_json(summarize(hand_log(), {10.0, 30.0})));
  EXPECT_DOUBLE_EQ(j.at("throughput_tokens_per_s").get<double>(), 200.0);
  EXPECT_EQ(j.at("staleness_histogram").at("0").get<int>(), 18);
  EXPECT_EQ(j.at("replicas").get<int>(), 2);
}

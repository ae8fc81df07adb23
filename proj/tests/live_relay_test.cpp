#include <gtest/gtest.h>

#include <chrono>
#include <memory>
#include <thread>
#include <vector>

#include "rollsim/live_relay.hpp"

using namespace rollsim;
using namespace rollsim::live;
using namespace std::chrono_literals;

namespace {

BenchOptions small(int nodes, std::size_t bytes, std::int64_t chunks) {
  BenchOptions o;
  o.nodes = nodes;
  o.payload_bytes = bytes;
  o.chunks = chunks;
  o.timeout_s = 30.0;
  return o;
}

Bytes payload_of(std::size_t n) {
  Bytes b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = static_cast<std::uint8_t>((i * 2654435761u) >> 13);
  return b;
}

}  // namespace

TEST(Blob, ChunksCoverPayload) {
  const Bytes p = payload_of(1000);
  auto blob = Blob::make(3, p, 7);
  ASSERT_EQ(blob->chunks.size(), 7u);
  EXPECT_EQ(blob->chunks[0]->size(), 143u);  // ceil(1000 / 7)
  EXPECT_EQ(blob->chunks[6]->size(), 1000u - 6 * 143);
  EXPECT_EQ(blob->size_bytes(), 1000u);
  EXPECT_EQ(blob->digest(), fnv1a64(p.data(), p.size()));
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(blob->sums[i], fnv1a64(blob->chunks[i]->data(), blob->chunks[i]->size()));
  }
}

TEST(LiveRelay, BroadcastDigestsAgree) {
  auto r = run_bench(small(4, 1 << 20, 8));
  ASSERT_TRUE(r.completed);
  EXPECT_TRUE(r.digests_agree);
  EXPECT_EQ(r.chunks, 8u);
  for (const auto& n : r.nodes) {
    EXPECT_TRUE(n.survived);
    EXPECT_EQ(n.digest, r.source_digest);
    EXPECT_TRUE(n.completion_s.has_value());
  }
  EXPECT_EQ(r.final_epoch, 1u);
}

TEST(LiveRelay, SingleChunkTwoNodes) {
  auto r = run_bench(small(2, 4096, 1));
  ASSERT_TRUE(r.completed);
  EXPECT_TRUE(r.digests_agree);
}

TEST(LiveRelay, KilledRelayIsBypassed) {
  auto o = small(5, 1 << 20, 16);
  o.kill_node = 2;
  o.kill_at_chunk = 3;
  auto r = run_bench(o);
  ASSERT_TRUE(r.completed);
  EXPECT_TRUE(r.digests_agree);
  EXPECT_FALSE(r.nodes[2].survived);
  ASSERT_TRUE(r.detect_s.has_value());
  ASSERT_TRUE(r.rebuild_s.has_value());
  EXPECT_LT(*r.detect_s + *r.rebuild_s, 1.5);
  EXPECT_GE(r.final_epoch, 2u);
}

TEST(LiveRelay, KilledMasterHandsOver) {
  auto o = small(4, 1 << 20, 16);
  o.kill_node = 0;
  o.kill_at_chunk = 1;  // the master dies as soon as it holds the blob
  auto r = run_bench(o);
  ASSERT_TRUE(r.completed);
  EXPECT_TRUE(r.digests_agree);
  EXPECT_FALSE(r.nodes[0].survived);
}

TEST(LiveRelay, CorruptChunkRemovesReceiver) {
  Coordinator coordinator;
  std::vector<std::unique_ptr<RelayNode>> nodes;
  std::vector<std::pair<NodeId, std::uint16_t>> order;
  for (NodeId i = 0; i < 4; ++i) {
    NodeOptions opts;
    if (i == 1) opts.corrupt_chunk = 2;  // node 1 damages chunk 2 on its way to node 2
    nodes.push_back(std::make_unique<RelayNode>(i, coordinator.port(), opts));
    order.emplace_back(i, nodes.back()->port());
  }
  ASSERT_TRUE(coordinator.wait_for_nodes(4, 10.0));
  coordinator.install_chain(order);
  std::this_thread::sleep_for(200ms);
  auto blob = Blob::make(1, payload_of(64 * 1024), 8);
  nodes[0]->publish(blob);
  ASSERT_TRUE(coordinator.wait_complete(1, 20.0));
  EXPECT_TRUE(nodes[2]->killed());
  EXPECT_EQ(nodes[2]->stats().checksum_failures, 1u);
  EXPECT_EQ(coordinator.topology().order(), (std::vector<NodeId>{0, 1, 3}));
  auto digests = coordinator.collect_digests(1, 10.0);
  for (NodeId n : {0u, 1u, 3u}) EXPECT_EQ(digests[n], blob->digest()) << n;
  coordinator.shutdown_nodes();
}

TEST(LiveRelay, SecondVersionReplacesFirst) {
  Coordinator coordinator;
  std::vector<std::unique_ptr<RelayNode>> nodes;
  std::vector<std::pair<NodeId, std::uint16_t>> order;
  for (NodeId i = 0; i < 3; ++i) {
    nodes.push_back(std::make_unique<RelayNode>(i, coordinator.port()));
    order.emplace_back(i, nodes.back()->port());
  }
  ASSERT_TRUE(coordinator.wait_for_nodes(3, 10.0));
  coordinator.install_chain(order);
  std::this_thread::sleep_for(200ms);
  for (std::uint64_t v = 1; v <= 3; ++v) {
    nodes[0]->publish(Blob::make(v, payload_of(32 * 1024 + v), 4));
    ASSERT_TRUE(coordinator.wait_complete(v, 20.0));
  }
  for (const auto& n : nodes) EXPECT_EQ(n->newest_complete(), 3);
  coordinator.shutdown_nodes();
}

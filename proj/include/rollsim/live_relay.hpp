#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "rollsim/chain.hpp"
#include "rollsim/wire.hpp"

namespace rollsim::live {

using Clock = std::chrono::steady_clock;
using Bytes = std::vector<std::uint8_t>;
using ChunkPtr = std::shared_ptr<const Bytes>;

inline constexpr std::uint32_t kCoordinatorId = 0xFFFFFFFFu;

std::uint64_t now_micros();

// A versioned payload cut into chunks, with per-chunk FNV-1a checksums.
struct Blob {
  std::uint64_t version = 0;
  std::vector<ChunkPtr> chunks;
  std::vector<std::uint64_t> sums;

  static std::shared_ptr<const Blob> make(std::uint64_t version, const Bytes& payload,
                                          std::uint32_t chunk_count);
  std::uint64_t digest() const;  // FNV-1a over the whole payload
  std::size_t size_bytes() const;
};

struct NodeOptions {
  double hb_interval = 0.1;
  int retention = 2;
  // Crash on receiving this many chunks of `kill_version` (0 = never), before
  // forwarding or reporting the last of them.
  std::uint64_t kill_version = 0;
  std::uint32_t kill_after_chunks = 0;
  // Flip one payload byte when sending this chunk index (test hook).
  std::optional<std::uint32_t> corrupt_chunk;
};

struct NodeStats {
  std::uint64_t stale_drops = 0;
  std::uint64_t checksum_failures = 0;
  std::uint64_t duplicates = 0;
};

// One relay worker. Frames arriving on any connection are queued to the
// node's single message loop, which owns the version state; a sender
// thread streams chunks to the successor and a heartbeat thread reports
// liveness to the coordinator.
class RelayNode {
 public:
  RelayNode(NodeId id, std::uint16_t coordinator_port, NodeOptions options = {});
  ~RelayNode();
  RelayNode(const RelayNode&) = delete;
  RelayNode& operator=(const RelayNode&) = delete;

  NodeId id() const { return id_; }
  std::uint16_t port() const { return port_; }

  // Trainer-side publication: the node stores the blob as complete.
  void publish(std::shared_ptr<const Blob> blob);
  // Simulates a crash: sockets are torn down, heartbeats stop.
  void kill();
  bool killed() const { return killed_.load(); }
  std::uint64_t killed_at_micros() const { return killed_at_.load(); }

  // Newest version whose every chunk is present; -1 when none.
  std::int64_t newest_complete() const { return newest_complete_.load(); }
  std::uint64_t epoch() const;
  NodeStats stats() const;

 private:
  struct VersionBuf {
    std::uint32_t count = 0;
    std::vector<ChunkPtr> chunks;
    std::vector<std::uint64_t> sums;
    std::uint32_t have = 0;
    bool complete() const { return have == count; }
  };
  struct Inbound {
    enum class Kind { Chunk, Control, Publish, Corrupt } kind = Kind::Chunk;
    wire::ChunkHeader header;
    ChunkPtr payload;
    std::uint64_t sum = 0;
    wire::ControlFrame control;
    int fd = -1;
    std::shared_ptr<const Blob> blob;
  };

  void accept_loop();
  void reader_loop(int fd);
  void message_loop();
  void sender_loop();
  void heartbeat_loop();

  void handle_chunk(Inbound& m);
  void handle_control(Inbound& m);
  void store_version_complete(std::uint64_t version);
  void prune_locked();
  void post(Inbound m);
  void send_to_coordinator(const Bytes& frame);
  void crash();
  // Connects to the successor and reads its resume point.
  int handshake(std::uint16_t port, std::uint64_t epoch, wire::RerequestBody& resume);
  void register_fd(int fd);
  void close_fd(int fd);

  NodeId id_;
  NodeOptions options_;
  std::uint16_t port_ = 0;
  int listen_fd_ = -1;
  int coord_fd_ = -1;
  std::mutex coord_write_mu_;

  mutable std::mutex mu_;  // version map, epoch, successor target
  std::condition_variable sender_cv_;
  std::map<std::uint64_t, VersionBuf> versions_;
  std::uint64_t epoch_ = 0;
  std::uint16_t succ_port_ = 0;
  std::uint64_t succ_generation_ = 0;
  NodeStats stats_;
  std::set<std::uint64_t> published_;  // versions received from the trainer
  bool corrupted_ = false;
  std::atomic<std::int64_t> newest_complete_{-1};

  std::mutex inbox_mu_;
  std::condition_variable inbox_cv_;
  std::deque<Inbound> inbox_;

  std::mutex fds_mu_;
  std::set<int> open_fds_;

  std::atomic<bool> killed_{false};
  std::atomic<std::uint64_t> killed_at_{0};
  std::atomic<bool> stopping_{false};
  std::vector<std::thread> readers_;
  std::thread acceptor_, loop_, sender_, heartbeat_;
};

struct CoordinatorOptions {
  double hb_timeout = 0.5;
  double check_period = 0.01;
};

struct NodeCompletion {
  std::uint64_t micros = 0;
  std::uint64_t digest = 0;
};

// Rollout-manager side of the live service: tracks heartbeats, owns the
// chain topology and pushes successor assignments on every rebuild.
class Coordinator {
 public:
  explicit Coordinator(CoordinatorOptions options = {});
  ~Coordinator();
  Coordinator(const Coordinator&) = delete;
  Coordinator& operator=(const Coordinator&) = delete;

  std::uint16_t port() const { return port_; }

  // Registers the chain (node id -> listening port) and assigns successors.
  void install_chain(const std::vector<std::pair<NodeId, std::uint16_t>>& order);
  // Blocks until every node has connected its heartbeat channel.
  bool wait_for_nodes(std::size_t n, double timeout_s);

  ChainTopology topology() const;
  std::optional<std::uint64_t> detected_micros() const;
  std::optional<std::uint64_t> rebuilt_micros() const;
  std::set<NodeId> failed() const;

  // Waits until every node of the current chain reported `version`.
  bool wait_complete(std::uint64_t version, double timeout_s);
  std::map<NodeId, NodeCompletion> completions(std::uint64_t version) const;
  // Asks every chain node for its digest of `version`.
  std::map<NodeId, std::uint64_t> collect_digests(std::uint64_t version, double timeout_s);

  void set_on_master_changed(std::function<void(NodeId)> fn);
  void shutdown_nodes();

 private:
  void accept_loop();
  void reader_loop(int fd);
  void monitor_loop();
  void rebuild_locked(const std::set<NodeId>& failed);
  void send_control(NodeId n, const wire::ControlFrame& f);

  CoordinatorOptions options_;
  std::uint16_t port_ = 0;
  int listen_fd_ = -1;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  ChainTopology topology_;
  std::map<NodeId, std::uint16_t> ports_;
  std::map<NodeId, int> control_fds_;
  std::map<NodeId, Clock::time_point> last_seen_;
  std::set<NodeId> failed_;
  std::map<std::uint64_t, std::map<NodeId, NodeCompletion>> completions_;
  std::map<std::uint64_t, std::map<NodeId, std::uint64_t>> digests_;
  std::optional<std::uint64_t> detected_micros_;
  std::optional<std::uint64_t> rebuilt_micros_;
  std::function<void(NodeId)> on_master_changed_;
  std::set<int> fds_;

  std::atomic<bool> stopping_{false};
  std::vector<std::thread> readers_;
  std::thread acceptor_, monitor_;
};

struct BenchOptions {
  int nodes = 8;
  std::size_t payload_bytes = 256u << 20;
  double t_start = 5e-5;          // estimate used to pick k
  double t_byte = 1.0 / 1.0e9;    // estimate used to pick k
  std::int64_t chunks = 0;        // 0 = optimal_chunks
  std::optional<int> kill_node;   // chain position
  std::uint32_t kill_at_chunk = 1;
  double hb_interval = 0.1;
  double hb_timeout = 0.5;
  double timeout_s = 120.0;
  std::uint64_t seed = 1;
};

struct NodeReport {
  NodeId id = 0;
  bool survived = true;
  std::optional<double> completion_s;  // since publication
  std::uint64_t digest = 0;
};

struct BenchResult {
  std::uint32_t chunks = 0;
  std::uint64_t source_digest = 0;
  std::vector<NodeReport> nodes;
  double broadcast_s = 0.0;  // slowest surviving node
  bool completed = false;
  bool digests_agree = false;
  std::optional<double> detect_s;   // kill -> detection
  std::optional<double> rebuild_s;  // detection -> new epoch installed
  std::uint64_t final_epoch = 0;
};

// Spawns `nodes` relay actors on loopback, broadcasts a pseudo-random
// payload and reports per-node completion and digests.
BenchResult run_bench(const BenchOptions& options);

}  // namespace rollsim::live

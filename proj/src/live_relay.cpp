#include "rollsim/live_relay.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/uio.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <random>
#include <stdexcept>

#include "rollsim/relay_model.hpp"

namespace rollsim::live {

namespace {

using namespace std::chrono_literals;

int listen_loopback(std::uint16_t* port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw std::runtime_error("socket: " + std::string(std::strerror(errno)));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 64) != 0) {
    ::close(fd);
    throw std::runtime_error("bind/listen: " + std::string(std::strerror(errno)));
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  *port = ntohs(addr.sin_port);
  return fd;
}

void tune(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

int connect_loopback(std::uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return -1;
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    return -1;
  }
  tune(fd);
  return fd;
}

bool read_full(int fd, void* buf, std::size_t n) {
  auto* p = static_cast<std::uint8_t*>(buf);
  while (n > 0) {
    ssize_t r = ::recv(fd, p, n, 0);
    if (r == 0) return false;
    if (r < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += r;
    n -= static_cast<std::size_t>(r);
  }
  return true;
}

bool write_iov(int fd, iovec* iov, int count) {
  while (count > 0) {
    msghdr msg{};
    msg.msg_iov = iov;
    msg.msg_iovlen = static_cast<std::size_t>(count);
    ssize_t w = ::sendmsg(fd, &msg, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    auto left = static_cast<std::size_t>(w);
    while (count > 0 && left >= iov->iov_len) {
      left -= iov->iov_len;
      ++iov;
      --count;
    }
    if (count > 0) {
      iov->iov_base = static_cast<std::uint8_t*>(iov->iov_base) + left;
      iov->iov_len -= left;
    }
  }
  return true;
}

bool write_full(int fd, const void* data, std::size_t n) {
  iovec iov{const_cast<void*>(data), n};
  return write_iov(fd, &iov, 1);
}

bool write_frame(int fd, const wire::ControlFrame& f) {
  const auto bytes = wire::encode_control(f);
  return write_full(fd, bytes.data(), bytes.size());
}

struct RawFrame {
  wire::FrameKind kind = wire::FrameKind::Control;
  wire::ChunkHeader chunk;
  std::shared_ptr<Bytes> payload;
  std::uint64_t sum = 0;
  wire::HeartbeatFrame heartbeat;
  wire::ControlFrame control;
};

// False on EOF, socket error or an unrecognized frame.
bool read_frame(int fd, RawFrame& out) {
  std::uint8_t head[wire::kChunkHeaderSize];
  if (!read_full(fd, head, 4)) return false;
  auto kind = wire::classify(head);
  if (!kind) return false;
  out.kind = *kind;
  switch (*kind) {
    case wire::FrameKind::Chunk: {
      if (!read_full(fd, head + 4, wire::kChunkHeaderSize - 4)) return false;
      out.chunk = wire::decode_chunk_header(head);
      out.payload = std::make_shared<Bytes>(out.chunk.payload_len);
      if (!read_full(fd, out.payload->data(), out.payload->size())) return false;
      std::uint8_t sum[wire::kChecksumSize];
      if (!read_full(fd, sum, sizeof sum)) return false;
      out.sum = wire::get_u64(sum);
      return true;
    }
    case wire::FrameKind::Heartbeat: {
      if (!read_full(fd, head + 4, wire::kHeartbeatSize - 4)) return false;
      out.heartbeat = wire::decode_heartbeat(head);
      return true;
    }
    case wire::FrameKind::Control: {
      if (!read_full(fd, head + 4, wire::kControlHeaderSize - 4)) return false;
      out.control.epoch = wire::get_u64(head + 4);
      out.control.op = static_cast<wire::ControlOp>(head[12]);
      std::size_t body = 0;
      try {
        body = wire::control_body_size(out.control.op);
      } catch (const std::invalid_argument&) {
        return false;
      }
      out.control.body.assign(body, 0);
      return body == 0 || read_full(fd, out.control.body.data(), body);
    }
  }
  return false;
}

std::uint64_t digest_of(const std::vector<ChunkPtr>& chunks) {
  std::uint64_t h = kFnvOffset;
  for (const auto& c : chunks) h = fnv1a64(c->data(), c->size(), h);
  return h;
}

}  // namespace

std::uint64_t now_micros() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::microseconds>(Clock::now().time_since_epoch())
          .count());
}

std::shared_ptr<const Blob> Blob::make(std::uint64_t version, const Bytes& payload,
                                       std::uint32_t chunk_count) {
  if (chunk_count == 0) throw std::invalid_argument("chunk_count must be positive");
  auto blob = std::make_shared<Blob>();
  blob->version = version;
  const std::size_t size = (payload.size() + chunk_count - 1) / chunk_count;
  for (std::uint32_t i = 0; i < chunk_count; ++i) {
    const std::size_t lo = std::min(payload.size(), std::size_t{i} * size);
    const std::size_t hi = std::min(payload.size(), lo + size);
    auto chunk = std::make_shared<Bytes>(payload.begin() + static_cast<std::ptrdiff_t>(lo),
                                         payload.begin() + static_cast<std::ptrdiff_t>(hi));
    blob->sums.push_back(fnv1a64(chunk->data(), chunk->size()));
    blob->chunks.push_back(std::move(chunk));
  }
  return blob;
}

std::uint64_t Blob::digest() const { return digest_of(chunks); }

std::size_t Blob::size_bytes() const {
  std::size_t n = 0;
  for (const auto& c : chunks) n += c->size();
  return n;
}

// ---------------------------------------------------------------- RelayNode

RelayNode::RelayNode(NodeId id, std::uint16_t coordinator_port, NodeOptions options)
    : id_(id), options_(options) {
  if (options_.retention < 1) throw std::invalid_argument("retention must be at least 1");
  listen_fd_ = listen_loopback(&port_);
  coord_fd_ = connect_loopback(coordinator_port);
  if (coord_fd_ < 0) {
    ::close(listen_fd_);
    throw std::runtime_error("relay node cannot reach the coordinator");
  }
  register_fd(coord_fd_);
  send_to_coordinator(wire::encode_control(wire::make_hello(0, id_)));
  acceptor_ = std::thread([this] { accept_loop(); });
  loop_ = std::thread([this] { message_loop(); });
  sender_ = std::thread([this] { sender_loop(); });
  heartbeat_ = std::thread([this] { heartbeat_loop(); });
}

RelayNode::~RelayNode() {
  stopping_ = true;
  crash();
  acceptor_.join();
  std::vector<std::thread> readers;
  {
    std::lock_guard lk(fds_mu_);
    readers.swap(readers_);
  }
  for (auto& t : readers) t.join();
  loop_.join();
  sender_.join();
  heartbeat_.join();
  std::lock_guard lk(fds_mu_);
  for (int fd : open_fds_) ::close(fd);
  open_fds_.clear();
  ::close(listen_fd_);
}

void RelayNode::register_fd(int fd) {
  std::lock_guard lk(fds_mu_);
  open_fds_.insert(fd);
}

void RelayNode::close_fd(int fd) {
  std::lock_guard lk(fds_mu_);
  if (open_fds_.erase(fd)) ::close(fd);
}

void RelayNode::crash() {
  if (!killed_.exchange(true)) killed_at_ = now_micros();
  {
    std::lock_guard lk(fds_mu_);
    ::shutdown(listen_fd_, SHUT_RDWR);
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  { std::lock_guard lk(mu_); }
  sender_cv_.notify_all();
  { std::lock_guard lk(inbox_mu_); }
  inbox_cv_.notify_all();
}

void RelayNode::kill() { crash(); }

std::uint64_t RelayNode::epoch() const {
  std::lock_guard lk(mu_);
  return epoch_;
}

NodeStats RelayNode::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

void RelayNode::publish(std::shared_ptr<const Blob> blob) {
  Inbound m;
  m.kind = Inbound::Kind::Publish;
  m.blob = std::move(blob);
  post(std::move(m));
}

void RelayNode::post(Inbound m) {
  {
    std::lock_guard lk(inbox_mu_);
    inbox_.push_back(std::move(m));
  }
  inbox_cv_.notify_one();
}

void RelayNode::send_to_coordinator(const Bytes& frame) {
  std::lock_guard lk(coord_write_mu_);
  write_full(coord_fd_, frame.data(), frame.size());
}

void RelayNode::accept_loop() {
  while (!stopping_ && !killed_) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;
    }
    tune(fd);
    std::lock_guard lk(fds_mu_);
    if (killed_) {
      ::close(fd);
      return;
    }
    open_fds_.insert(fd);
    readers_.emplace_back([this, fd] { reader_loop(fd); });
  }
}

void RelayNode::reader_loop(int fd) {
  RawFrame f;
  while (!killed_ && read_frame(fd, f)) {
    Inbound m;
    m.fd = fd;
    if (f.kind == wire::FrameKind::Chunk) {
      if (fnv1a64(f.payload->data(), f.payload->size()) != f.sum) {
        m.kind = Inbound::Kind::Corrupt;
        m.header = f.chunk;
        post(std::move(m));
        break;
      }
      m.kind = Inbound::Kind::Chunk;
      m.header = f.chunk;
      m.payload = std::move(f.payload);
      m.sum = f.sum;
      post(std::move(m));
    } else if (f.kind == wire::FrameKind::Control) {
      m.kind = Inbound::Kind::Control;
      m.control = std::move(f.control);
      post(std::move(m));
    }
  }
  close_fd(fd);
}

void RelayNode::message_loop() {
  while (true) {
    Inbound m;
    {
      std::unique_lock lk(inbox_mu_);
      inbox_cv_.wait(lk, [&] { return stopping_ || killed_ || !inbox_.empty(); });
      if (stopping_ || killed_) return;
      m = std::move(inbox_.front());
      inbox_.pop_front();
    }
    switch (m.kind) {
      case Inbound::Kind::Chunk: handle_chunk(m); break;
      case Inbound::Kind::Control: handle_control(m); break;
      case Inbound::Kind::Corrupt: {
        // A chunk that fails its checksum takes this node out of the chain.
        {
          std::lock_guard lk(mu_);
          ++stats_.checksum_failures;
        }
        crash();
        return;
      }
      case Inbound::Kind::Publish: {
        const auto& blob = *m.blob;
        bool newly = false;
        {
          std::lock_guard lk(mu_);
          auto& vb = versions_[blob.version];
          newly = !(vb.count > 0 && vb.complete());
          vb.count = static_cast<std::uint32_t>(blob.chunks.size());
          vb.chunks = blob.chunks;
          vb.sums = blob.sums;
          vb.have = vb.count;
          published_.insert(blob.version);
        }
        if (newly) store_version_complete(blob.version);
        sender_cv_.notify_all();
        break;
      }
    }
  }
}

void RelayNode::handle_chunk(Inbound& m) {
  const auto& h = m.header;
  bool completed = false;
  bool die = false;
  {
    std::lock_guard lk(mu_);
    if (h.epoch < epoch_) {
      ++stats_.stale_drops;
      return;
    }
    // A newer epoch on a chunk means the coordinator already rebuilt and
    // the predecessor heard first; adopt it before applying the chunk.
    epoch_ = h.epoch;
    if (newest_complete_ >= 0 && h.version <= static_cast<std::uint64_t>(newest_complete_.load()) &&
        !versions_.count(h.version)) {
      ++stats_.duplicates;
      return;
    }
    auto& vb = versions_[h.version];
    if (vb.count == 0) {
      vb.count = h.count;
      vb.chunks.assign(h.count, nullptr);
      vb.sums.assign(h.count, 0);
    }
    if (h.count != vb.count || h.index >= vb.count) return;
    if (vb.chunks[h.index]) {
      ++stats_.duplicates;
      return;
    }
    vb.chunks[h.index] = std::move(m.payload);
    vb.sums[h.index] = m.sum;
    ++vb.have;
    if (options_.kill_version == h.version && options_.kill_after_chunks > 0 &&
        vb.have == options_.kill_after_chunks) {
      die = true;
    } else {
      completed = vb.complete();
    }
  }
  if (die) {
    crash();
    return;
  }
  if (completed) store_version_complete(h.version);
  sender_cv_.notify_all();
}

void RelayNode::store_version_complete(std::uint64_t version) {
  {
    std::lock_guard lk(mu_);
    if (static_cast<std::int64_t>(version) > newest_complete_) {
      newest_complete_ = static_cast<std::int64_t>(version);
    }
    prune_locked();
  }
  wire::CompleteBody body{id_, version, 0, now_micros()};
  send_to_coordinator(wire::encode_control(wire::make_complete(epoch(), body)));
}

void RelayNode::prune_locked() {
  const std::int64_t newest = newest_complete_;
  int kept = 0;
  for (auto it = versions_.rbegin(); it != versions_.rend();) {
    const bool complete = it->second.complete();
    const bool superseded = !complete && static_cast<std::int64_t>(it->first) < newest;
    bool drop = superseded;
    if (complete) drop = ++kept > options_.retention;
    if (drop) {
      it = std::make_reverse_iterator(versions_.erase(std::next(it).base()));
    } else {
      ++it;
    }
  }
}

void RelayNode::handle_control(Inbound& m) {
  const auto& f = m.control;
  try {
    switch (f.op) {
      case wire::ControlOp::Hello: {
        if (wire::parse_hello(f) == kCoordinatorId) return;
        wire::RerequestBody resume;
        std::uint64_t epoch = 0;
        {
          std::lock_guard lk(mu_);
          if (f.epoch > epoch_) epoch_ = f.epoch;
          epoch = epoch_;
          if (!versions_.empty()) {
            const auto& [v, vb] = *versions_.rbegin();
            resume.version = v;
            resume.lowest_missing = vb.count;
            for (std::uint32_t i = 0; i < vb.count; ++i) {
              if (!vb.chunks[i]) {
                resume.lowest_missing = i;
                break;
              }
            }
          }
        }
        write_frame(m.fd, wire::make_rerequest(epoch, resume));
        return;
      }
      case wire::ControlOp::SetSuccessor: {
        const auto body = wire::parse_set_successor(f);
        {
          std::lock_guard lk(mu_);
          if (f.epoch < epoch_) {
            ++stats_.stale_drops;
            return;
          }
          epoch_ = f.epoch;
          succ_port_ = body.port;
          ++succ_generation_;
        }
        sender_cv_.notify_all();
        return;
      }
      case wire::ControlOp::NewEpoch:
      case wire::ControlOp::Elect: {
        std::lock_guard lk(mu_);
        if (f.epoch > epoch_) epoch_ = f.epoch;
        return;
      }
      case wire::ControlOp::Digest: {
        const auto version = wire::parse_digest_request(f);
        std::vector<ChunkPtr> chunks;
        {
          std::lock_guard lk(mu_);
          auto it = versions_.find(version);
          if (it == versions_.end() || !it->second.complete()) return;
          chunks = it->second.chunks;
        }
        wire::CompleteBody body{id_, version, digest_of(chunks), 0};
        send_to_coordinator(wire::encode_control(wire::make_complete(epoch(), body)));
        return;
      }
      case wire::ControlOp::Shutdown: {
        stopping_ = true;
        sender_cv_.notify_all();
        inbox_cv_.notify_all();
        return;
      }
      case wire::ControlOp::Rerequest:
      case wire::ControlOp::Complete: return;
    }
  } catch (const std::runtime_error&) {
    // Malformed control frame: ignored.
  }
}

int RelayNode::handshake(std::uint16_t port, std::uint64_t epoch, wire::RerequestBody& resume) {
  int fd = connect_loopback(port);
  if (fd < 0) return -1;
  register_fd(fd);
  timeval tv{2, 0};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  RawFrame reply;
  if (!write_frame(fd, wire::make_hello(epoch, id_)) || !read_frame(fd, reply) ||
      reply.kind != wire::FrameKind::Control || reply.control.op != wire::ControlOp::Rerequest) {
    close_fd(fd);
    return -1;
  }
  resume = wire::parse_rerequest(reply.control);
  return fd;
}

void RelayNode::sender_loop() {
  int fd = -1;
  std::uint16_t connected_port = 0;
  std::uint64_t seen_generation = ~0ULL;
  std::uint64_t cur_version = 0;
  std::uint32_t cur_index = 0;
  auto retry_at = Clock::now();
  auto drop = [&] {
    if (fd >= 0) close_fd(fd);
    fd = -1;
    connected_port = 0;
  };

  while (!stopping_ && !killed_) {
    std::uint16_t target = 0;
    std::uint64_t epoch = 0;
    std::uint64_t generation = 0;
    {
      std::lock_guard lk(mu_);
      target = succ_port_;
      epoch = epoch_;
      generation = succ_generation_;
    }
    if (generation != seen_generation) {
      // New epoch: chunks sent under the old one may have been dropped as
      // stale, so reconnect and resume from the successor's lowest gap.
      seen_generation = generation;
      drop();
      retry_at = Clock::now();
    }
    if (fd < 0) {
      if (target == 0 || Clock::now() < retry_at) {
        std::unique_lock lk(mu_);
        sender_cv_.wait_for(lk, 20ms);
        continue;
      }
      wire::RerequestBody resume;
      fd = handshake(target, epoch, resume);
      if (fd < 0) {
        retry_at = Clock::now() + 50ms;
        continue;
      }
      connected_port = target;
      cur_version = resume.version;
      cur_index = resume.lowest_missing;
      continue;
    }

    wire::ChunkHeader h;
    ChunkPtr payload;
    std::uint64_t sum = 0;
    bool found = false;
    bool from_trainer = false;
    {
      std::unique_lock lk(mu_);
      if (succ_generation_ != seen_generation) continue;
      auto it = versions_.lower_bound(cur_version);
      while (it != versions_.end()) {
        if (it->first > cur_version) {
          cur_version = it->first;
          cur_index = 0;
        }
        const auto& vb = it->second;
        if (cur_index < vb.count) {
          if (vb.chunks[cur_index]) {
            payload = vb.chunks[cur_index];
            sum = vb.sums[cur_index];
            h = wire::ChunkHeader{epoch_, cur_version, cur_index, vb.count,
                                  static_cast<std::uint32_t>(payload->size())};
            from_trainer = published_.count(cur_version) > 0;
            found = true;
          }
          break;
        }
        ++it;
      }
      if (!found) {
        sender_cv_.wait_for(lk, 100ms);
        continue;
      }
    }

    if (options_.corrupt_chunk && *options_.corrupt_chunk == h.index && !corrupted_ &&
        !payload->empty()) {
      auto bad = std::make_shared<Bytes>(*payload);
      (*bad)[0] ^= 0xFF;
      payload = std::move(bad);
      corrupted_ = true;
    }
    auto header = wire::encode_chunk_header(h);
    std::uint8_t trailer[wire::kChecksumSize];
    wire::put_u64(trailer, sum);
    iovec iov[3] = {{header.data(), header.size()},
                    {const_cast<std::uint8_t*>(payload->data()), payload->size()},
                    {trailer, sizeof trailer}};
    if (!write_iov(fd, iov, 3)) {
      drop();
      retry_at = Clock::now() + 50ms;
      continue;
    }
    ++cur_index;
    if (from_trainer && options_.kill_version == h.version && options_.kill_after_chunks > 0 &&
        cur_index == options_.kill_after_chunks) {
      crash();
    }
  }
  drop();
}

void RelayNode::heartbeat_loop() {
  const auto interval = std::chrono::duration<double>(options_.hb_interval);
  while (!stopping_ && !killed_) {
    const auto frame = wire::encode_heartbeat({epoch(), id_, now_micros()});
    {
      std::lock_guard lk(coord_write_mu_);
      write_full(coord_fd_, frame.data(), frame.size());
    }
    std::unique_lock lk(mu_);
    sender_cv_.wait_for(lk, interval, [&] { return stopping_ || killed_; });
  }
}

// -------------------------------------------------------------- Coordinator

Coordinator::Coordinator(CoordinatorOptions options) : options_(options) {
  if (!(options_.hb_timeout > 0.0) || !(options_.check_period > 0.0)) {
    throw std::invalid_argument("coordinator timeouts must be positive");
  }
  listen_fd_ = listen_loopback(&port_);
  acceptor_ = std::thread([this] { accept_loop(); });
  monitor_ = std::thread([this] { monitor_loop(); });
}

Coordinator::~Coordinator() {
  stopping_ = true;
  {
    std::lock_guard lk(mu_);
    ::shutdown(listen_fd_, SHUT_RDWR);
    for (int fd : fds_) ::shutdown(fd, SHUT_RDWR);
    for (auto& [n, fd] : control_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  cv_.notify_all();
  acceptor_.join();
  monitor_.join();
  std::vector<std::thread> readers;
  {
    std::lock_guard lk(mu_);
    readers.swap(readers_);
  }
  for (auto& t : readers) t.join();
  for (int fd : fds_) ::close(fd);
  for (auto& [n, fd] : control_fds_) ::close(fd);
  ::close(listen_fd_);
}

void Coordinator::accept_loop() {
  while (!stopping_) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;
    }
    tune(fd);
    std::lock_guard lk(mu_);
    if (stopping_) {
      ::close(fd);
      return;
    }
    fds_.insert(fd);
    readers_.emplace_back([this, fd] { reader_loop(fd); });
  }
}

void Coordinator::reader_loop(int fd) {
  RawFrame f;
  std::optional<NodeId> node;
  while (!stopping_ && read_frame(fd, f)) {
    std::lock_guard lk(mu_);
    if (f.kind == wire::FrameKind::Heartbeat) {
      if (!failed_.count(f.heartbeat.node_id)) last_seen_[f.heartbeat.node_id] = Clock::now();
      continue;
    }
    if (f.kind != wire::FrameKind::Control) continue;
    try {
      if (f.control.op == wire::ControlOp::Hello) {
        node = wire::parse_hello(f.control);
        last_seen_[*node] = Clock::now();
      } else if (f.control.op == wire::ControlOp::Complete) {
        const auto body = wire::parse_complete(f.control);
        if (body.micros != 0) {
          completions_[body.version][body.node] = NodeCompletion{body.micros, body.digest};
        } else {
          digests_[body.version][body.node] = body.digest;
        }
      }
    } catch (const std::runtime_error&) {
      continue;
    }
    cv_.notify_all();
  }
}

bool Coordinator::wait_for_nodes(std::size_t n, double timeout_s) {
  std::unique_lock lk(mu_);
  return cv_.wait_for(lk, std::chrono::duration<double>(timeout_s),
                      [&] { return last_seen_.size() >= n; });
}

void Coordinator::install_chain(const std::vector<std::pair<NodeId, std::uint16_t>>& order) {
  std::vector<NodeId> ids;
  for (const auto& [n, port] : order) ids.push_back(n);
  std::lock_guard lk(mu_);
  topology_ = ChainTopology(ids, topology_.epoch() + 1);
  const auto now = Clock::now();
  for (const auto& [n, port] : order) {
    ports_[n] = port;
    last_seen_[n] = now;
    if (!control_fds_.count(n)) {
      int fd = connect_loopback(port);
      if (fd < 0) throw std::runtime_error("coordinator cannot reach node " + std::to_string(n));
      write_frame(fd, wire::make_hello(topology_.epoch(), kCoordinatorId));
      control_fds_[n] = fd;
    }
  }
  for (NodeId n : topology_.order()) {
    const auto succ = topology_.successor(n);
    const std::uint16_t port = succ ? ports_[*succ] : 0;
    send_control(n, wire::make_set_successor(topology_.epoch(), {succ.value_or(0), port}));
  }
}

void Coordinator::send_control(NodeId n, const wire::ControlFrame& f) {
  auto it = control_fds_.find(n);
  if (it != control_fds_.end()) write_frame(it->second, f);
}

void Coordinator::rebuild_locked(const std::set<NodeId>& failed) {
  const NodeId old_master = topology_.master();
  failed_.insert(failed.begin(), failed.end());
  topology_ = topology_.rebuild(failed);
  for (NodeId n : topology_.order()) {
    const auto succ = topology_.successor(n);
    const std::uint16_t port = succ ? ports_[*succ] : 0;
    send_control(n, wire::make_set_successor(topology_.epoch(), {succ.value_or(0), port}));
  }
  if (topology_.master() != old_master) {
    send_control(topology_.master(), wire::make_simple(topology_.epoch(), wire::ControlOp::Elect));
  }
  rebuilt_micros_ = now_micros();
}

void Coordinator::monitor_loop() {
  const auto period = std::chrono::duration<double>(options_.check_period);
  const auto timeout = std::chrono::duration<double>(options_.hb_timeout);
  while (!stopping_) {
    std::optional<NodeId> new_master;
    std::function<void(NodeId)> callback;
    {
      std::unique_lock lk(mu_);
      cv_.wait_for(lk, period, [&] { return stopping_.load(); });
      if (stopping_) return;
      if (topology_.empty()) continue;
      const auto now = Clock::now();
      std::set<NodeId> expired;
      for (NodeId n : topology_.order()) {
        auto it = last_seen_.find(n);
        if (it != last_seen_.end() && now - it->second >= timeout) expired.insert(n);
      }
      if (expired.empty()) continue;
      if (!detected_micros_) detected_micros_ = now_micros();
      if (expired.size() == topology_.size()) {
        failed_.insert(expired.begin(), expired.end());
        topology_ = ChainTopology({}, topology_.epoch() + 1);
        cv_.notify_all();
        continue;
      }
      const NodeId old_master = topology_.master();
      rebuild_locked(expired);
      if (topology_.master() != old_master) {
        new_master = topology_.master();
        callback = on_master_changed_;
      }
      cv_.notify_all();
    }
    if (new_master && callback) callback(*new_master);
  }
}

ChainTopology Coordinator::topology() const {
  std::lock_guard lk(mu_);
  return topology_;
}

std::optional<std::uint64_t> Coordinator::detected_micros() const {
  std::lock_guard lk(mu_);
  return detected_micros_;
}

std::optional<std::uint64_t> Coordinator::rebuilt_micros() const {
  std::lock_guard lk(mu_);
  return rebuilt_micros_;
}

std::set<NodeId> Coordinator::failed() const {
  std::lock_guard lk(mu_);
  return failed_;
}

bool Coordinator::wait_complete(std::uint64_t version, double timeout_s) {
  std::unique_lock lk(mu_);
  return cv_.wait_for(lk, std::chrono::duration<double>(timeout_s), [&] {
    if (topology_.empty()) return true;
    auto it = completions_.find(version);
    if (it == completions_.end()) return false;
    for (NodeId n : topology_.order()) {
      if (!it->second.count(n)) return false;
    }
    return true;
  });
}

std::map<NodeId, NodeCompletion> Coordinator::completions(std::uint64_t version) const {
  std::lock_guard lk(mu_);
  auto it = completions_.find(version);
  return it == completions_.end() ? std::map<NodeId, NodeCompletion>{} : it->second;
}

std::map<NodeId, std::uint64_t> Coordinator::collect_digests(std::uint64_t version,
                                                             double timeout_s) {
  std::unique_lock lk(mu_);
  digests_.erase(version);
  const auto members = topology_.order();
  for (NodeId n : members) send_control(n, wire::make_digest_request(topology_.epoch(), version));
  cv_.wait_for(lk, std::chrono::duration<double>(timeout_s), [&] {
    const auto& got = digests_[version];
    return std::all_of(members.begin(), members.end(), [&](NodeId n) { return got.count(n); });
  });
  return digests_[version];
}

void Coordinator::set_on_master_changed(std::function<void(NodeId)> fn) {
  std::lock_guard lk(mu_);
  on_master_changed_ = std::move(fn);
}

void Coordinator::shutdown_nodes() {
  std::lock_guard lk(mu_);
  for (auto& [n, fd] : control_fds_) {
    write_frame(fd, wire::make_simple(topology_.epoch(), wire::ControlOp::Shutdown));
  }
}

// -------------------------------------------------------------------- bench

BenchResult run_bench(const BenchOptions& options) {
  if (options.nodes < 2) throw std::invalid_argument("relay bench needs at least 2 nodes");
  if (options.kill_node && (*options.kill_node < 0 || *options.kill_node >= options.nodes)) {
    throw std::invalid_argument("kill node is outside the chain");
  }
  BenchResult result;

  std::shared_ptr<const Blob> blob;
  {
    Bytes payload(options.payload_bytes);
    std::mt19937_64 rng(options.seed);
    std::size_t i = 0;
    for (; i + 8 <= payload.size(); i += 8) wire::put_u64(payload.data() + i, rng());
    for (std::uint64_t tail = rng(); i < payload.size(); ++i, tail >>= 8) {
      payload[i] = static_cast<std::uint8_t>(tail);
    }
    std::int64_t k = options.chunks;
    if (k <= 0) {
      BroadcastParams params{options.nodes, static_cast<double>(options.payload_bytes),
                             options.t_byte, options.t_start};
      k = optimal_chunks(params, kDefaultChunkCap);
    }
    k = std::clamp<std::int64_t>(k, 1, kDefaultChunkCap);
    blob = Blob::make(1, payload, static_cast<std::uint32_t>(k));
  }
  result.chunks = static_cast<std::uint32_t>(blob->chunks.size());
  result.source_digest = blob->digest();

  CoordinatorOptions copts;
  copts.hb_timeout = options.hb_timeout;
  Coordinator coordinator(copts);
  std::vector<std::unique_ptr<RelayNode>> nodes;
  std::vector<std::pair<NodeId, std::uint16_t>> order;
  for (int i = 0; i < options.nodes; ++i) {
    NodeOptions nopts;
    nopts.hb_interval = options.hb_interval;
    if (options.kill_node && *options.kill_node == i) {
      nopts.kill_version = blob->version;
      nopts.kill_after_chunks = options.kill_at_chunk;
    }
    nodes.push_back(std::make_unique<RelayNode>(static_cast<NodeId>(i), coordinator.port(), nopts));
    order.emplace_back(static_cast<NodeId>(i), nodes.back()->port());
  }
  if (!coordinator.wait_for_nodes(nodes.size(), 10.0)) {
    throw std::runtime_error("relay nodes did not register with the coordinator");
  }
  coordinator.set_on_master_changed([&](NodeId n) { nodes[n]->publish(blob); });
  coordinator.install_chain(order);
  // Let every sender finish its successor handshake before the clock starts.
  auto deadline = Clock::now() + 5s;
  while (Clock::now() < deadline) {
    bool ready = true;
    for (const auto& n : nodes) ready = ready && n->epoch() >= 1;
    if (ready) break;
    std::this_thread::sleep_for(5ms);
  }
  std::this_thread::sleep_for(50ms);

  const std::uint64_t t0 = now_micros();
  nodes.front()->publish(blob);
  result.completed = coordinator.wait_complete(blob->version, options.timeout_s);

  const auto topo = coordinator.topology();
  result.final_epoch = topo.epoch();
  const auto done = coordinator.completions(blob->version);
  const auto digests = coordinator.collect_digests(blob->version, 30.0);
  result.digests_agree = !topo.empty();
  for (const auto& node : nodes) {
    NodeReport r;
    r.id = node->id();
    r.survived = topo.contains(r.id);
    if (auto it = done.find(r.id); it != done.end() && it->second.micros >= t0) {
      r.completion_s = static_cast<double>(it->second.micros - t0) * 1e-6;
    }
    if (auto it = digests.find(r.id); it != digests.end()) r.digest = it->second;
    if (r.survived) {
      if (r.completion_s) result.broadcast_s = std::max(result.broadcast_s, *r.completion_s);
      result.digests_agree = result.digests_agree && digests.count(r.id) &&
                             r.digest == result.source_digest;
    }
    result.nodes.push_back(r);
  }
  if (options.kill_node) {
    const auto killed = nodes[static_cast<std::size_t>(*options.kill_node)]->killed_at_micros();
    const auto detected = coordinator.detected_micros();
    const auto rebuilt = coordinator.rebuilt_micros();
    if (killed && detected && *detected >= killed) {
      result.detect_s = static_cast<double>(*detected - killed) * 1e-6;
    }
    if (detected && rebuilt && *rebuilt >= *detected) {
      result.rebuild_s = static_cast<double>(*rebuilt - *detected) * 1e-6;
    }
  }
  coordinator.set_on_master_changed({});
  coordinator.shutdown_nodes();
  nodes.clear();
  return result;
}

}  // namespace rollsim::live

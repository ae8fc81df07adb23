#include "rollsim/wire.hpp"

#include <cstring>
#include <stdexcept>

namespace rollsim {

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t len, std::uint64_t h) {
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= kFnvPrime;
  }
  return h;
}

namespace wire {

void put_u16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v);
  p[1] = static_cast<std::uint8_t>(v >> 8);
}

void put_u32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

void put_u64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::size_t control_body_size(ControlOp op) {
  switch (op) {
    case ControlOp::SetSuccessor: return 4 + 2;
    case ControlOp::Rerequest: return 8 + 4;
    case ControlOp::Complete: return 4 + 8 + 8 + 8;
    case ControlOp::Hello: return 4;
    case ControlOp::Digest: return 8;
    case ControlOp::NewEpoch:
    case ControlOp::Elect:
    case ControlOp::Shutdown: return 0;
  }
  throw std::invalid_argument("unknown control op");
}

std::array<std::uint8_t, kChunkHeaderSize> encode_chunk_header(const ChunkHeader& h) {
  std::array<std::uint8_t, kChunkHeaderSize> out{};
  std::memcpy(out.data(), kChunkMagic.data(), 4);
  put_u64(out.data() + 4, h.epoch);
  put_u64(out.data() + 12, h.version);
  put_u32(out.data() + 20, h.index);
  put_u32(out.data() + 24, h.count);
  put_u32(out.data() + 28, h.payload_len);
  return out;
}

ChunkHeader decode_chunk_header(const std::uint8_t* p) {
  if (std::memcmp(p, kChunkMagic.data(), 4) != 0) throw std::runtime_error("bad chunk magic");
  ChunkHeader h;
  h.epoch = get_u64(p + 4);
  h.version = get_u64(p + 12);
  h.index = get_u32(p + 20);
  h.count = get_u32(p + 24);
  h.payload_len = get_u32(p + 28);
  return h;
}

std::vector<std::uint8_t> encode_chunk(const ChunkHeader& h, const std::uint8_t* payload) {
  std::vector<std::uint8_t> out(kChunkHeaderSize + h.payload_len + kChecksumSize);
  const auto header = encode_chunk_header(h);
  std::memcpy(out.data(), header.data(), header.size());
  if (h.payload_len) std::memcpy(out.data() + kChunkHeaderSize, payload, h.payload_len);
  put_u64(out.data() + kChunkHeaderSize + h.payload_len, fnv1a64(payload, h.payload_len));
  return out;
}

std::array<std::uint8_t, kHeartbeatSize> encode_heartbeat(const HeartbeatFrame& f) {
  std::array<std::uint8_t, kHeartbeatSize> out{};
  std::memcpy(out.data(), kHeartbeatMagic.data(), 4);
  put_u64(out.data() + 4, f.epoch);
  put_u32(out.data() + 12, f.node_id);
  put_u64(out.data() + 16, f.send_time_micros);
  return out;
}

HeartbeatFrame decode_heartbeat(const std::uint8_t* p) {
  if (std::memcmp(p, kHeartbeatMagic.data(), 4) != 0) {
    throw std::runtime_error("bad heartbeat magic");
  }
  return HeartbeatFrame{get_u64(p + 4), get_u32(p + 12), get_u64(p + 16)};
}

std::vector<std::uint8_t> encode_control(const ControlFrame& f) {
  if (f.body.size() != control_body_size(f.op)) {
    throw std::invalid_argument("control body has the wrong length for its op");
  }
  std::vector<std::uint8_t> out(kControlHeaderSize + f.body.size());
  std::memcpy(out.data(), kControlMagic.data(), 4);
  put_u64(out.data() + 4, f.epoch);
  out[12] = static_cast<std::uint8_t>(f.op);
  if (!f.body.empty()) std::memcpy(out.data() + kControlHeaderSize, f.body.data(), f.body.size());
  return out;
}

std::optional<FrameKind> classify(const std::uint8_t* magic) {
  if (std::memcmp(magic, kChunkMagic.data(), 4) == 0) return FrameKind::Chunk;
  if (std::memcmp(magic, kHeartbeatMagic.data(), 4) == 0) return FrameKind::Heartbeat;
  if (std::memcmp(magic, kControlMagic.data(), 4) == 0) return FrameKind::Control;
  return std::nullopt;
}

ControlFrame make_set_successor(std::uint64_t epoch, SetSuccessorBody b) {
  ControlFrame f{epoch, ControlOp::SetSuccessor, std::vector<std::uint8_t>(6)};
  put_u32(f.body.data(), b.node);
  put_u16(f.body.data() + 4, b.port);
  return f;
}

ControlFrame make_rerequest(std::uint64_t epoch, RerequestBody b) {
  ControlFrame f{epoch, ControlOp::Rerequest, std::vector<std::uint8_t>(12)};
  put_u64(f.body.data(), b.version);
  put_u32(f.body.data() + 8, b.lowest_missing);
  return f;
}

ControlFrame make_complete(std::uint64_t epoch, CompleteBody b) {
  ControlFrame f{epoch, ControlOp::Complete, std::vector<std::uint8_t>(28)};
  put_u32(f.body.data(), b.node);
  put_u64(f.body.data() + 4, b.version);
  put_u64(f.body.data() + 12, b.digest);
  put_u64(f.body.data() + 20, b.micros);
  return f;
}

ControlFrame make_hello(std::uint64_t epoch, std::uint32_t node) {
  ControlFrame f{epoch, ControlOp::Hello, std::vector<std::uint8_t>(4)};
  put_u32(f.body.data(), node);
  return f;
}

ControlFrame make_digest_request(std::uint64_t epoch, std::uint64_t version) {
  ControlFrame f{epoch, ControlOp::Digest, std::vector<std::uint8_t>(8)};
  put_u64(f.body.data(), version);
  return f;
}

ControlFrame make_simple(std::uint64_t epoch, ControlOp op) {
  return ControlFrame{epoch, op, {}};
}

namespace {
void expect(const ControlFrame& f, ControlOp op) {
  if (f.op != op || f.body.size() != control_body_size(op)) {
    throw std::runtime_error("malformed control frame");
  }
}
}  // namespace

SetSuccessorBody parse_set_successor(const ControlFrame& f) {
  expect(f, ControlOp::SetSuccessor);
  return SetSuccessorBody{get_u32(f.body.data()), get_u16(f.body.data() + 4)};
}

RerequestBody parse_rerequest(const ControlFrame& f) {
  expect(f, ControlOp::Rerequest);
  return RerequestBody{get_u64(f.body.data()), get_u32(f.body.data() + 8)};
}

CompleteBody parse_complete(const ControlFrame& f) {
  expect(f, ControlOp::Complete);
  return CompleteBody{get_u32(f.body.data()), get_u64(f.body.data() + 4),
                      get_u64(f.body.data() + 12), get_u64(f.body.data() + 20)};
}

std::uint32_t parse_hello(const ControlFrame& f) {
  expect(f, ControlOp::Hello);
  return get_u32(f.body.data());
}

std::uint64_t parse_digest_request(const ControlFrame& f) {
  expect(f, ControlOp::Digest);
  return get_u64(f.body.data());
}

}  // namespace wire
}  // namespace rollsim

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

namespace rollsim {

// 64-bit FNV-1a.
inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t len, std::uint64_t h = kFnvOffset);

namespace wire {

inline constexpr std::array<char, 4> kChunkMagic{'R', 'L', 'Y', 'C'};
inline constexpr std::array<char, 4> kHeartbeatMagic{'R', 'L', 'Y', 'H'};
inline constexpr std::array<char, 4> kControlMagic{'R', 'L', 'Y', 'X'};

// magic | epoch u64 | version u64 | index u32 | count u32 | payload_len u32
inline constexpr std::size_t kChunkHeaderSize = 4 + 8 + 8 + 4 + 4 + 4;
inline constexpr std::size_t kChecksumSize = 8;
// magic | epoch u64 | node_id u32 | send_time_micros u64
inline constexpr std::size_t kHeartbeatSize = 4 + 8 + 4 + 8;
// magic | epoch u64 | op u8, then an op-specific body
inline constexpr std::size_t kControlHeaderSize = 4 + 8 + 1;

enum class ControlOp : std::uint8_t {
  SetSuccessor = 1,  // body: node u32, port u16 (port 0 = no successor)
  NewEpoch = 2,      // body: empty; adopt the frame's epoch
  Rerequest = 3,     // body: version u64, lowest_missing u32
  Elect = 4,         // body: empty; receiver becomes master
  Complete = 5,      // body: node u32, version u64, digest u64, micros u64
  Shutdown = 6,      // body: empty
  Hello = 7,         // body: node u32 (identifies a connection's sender)
  Digest = 8,        // body: version u64; answered with Complete carrying the digest
};

// Fixed body length per op.
std::size_t control_body_size(ControlOp op);

struct ChunkHeader {
  std::uint64_t epoch = 0;
  std::uint64_t version = 0;
  std::uint32_t index = 0;
  std::uint32_t count = 0;
  std::uint32_t payload_len = 0;
};

struct HeartbeatFrame {
  std::uint64_t epoch = 0;
  std::uint32_t node_id = 0;
  std::uint64_t send_time_micros = 0;
};

struct ControlFrame {
  std::uint64_t epoch = 0;
  ControlOp op = ControlOp::NewEpoch;
  std::vector<std::uint8_t> body;
};

// Little-endian field helpers.
void put_u16(std::uint8_t* p, std::uint16_t v);
void put_u32(std::uint8_t* p, std::uint32_t v);
void put_u64(std::uint8_t* p, std::uint64_t v);
std::uint16_t get_u16(const std::uint8_t* p);
std::uint32_t get_u32(const std::uint8_t* p);
std::uint64_t get_u64(const std::uint8_t* p);

std::array<std::uint8_t, kChunkHeaderSize> encode_chunk_header(const ChunkHeader& h);
ChunkHeader decode_chunk_header(const std::uint8_t* p);  // p includes the magic
// Whole frame: header | payload | checksum.
std::vector<std::uint8_t> encode_chunk(const ChunkHeader& h, const std::uint8_t* payload);

std::array<std::uint8_t, kHeartbeatSize> encode_heartbeat(const HeartbeatFrame& f);
HeartbeatFrame decode_heartbeat(const std::uint8_t* p);

std::vector<std::uint8_t> encode_control(const ControlFrame& f);

enum class FrameKind { Chunk, Heartbeat, Control };

// Identifies a frame from its first four bytes.
std::optional<FrameKind> classify(const std::uint8_t* magic);

// Control bodies.
struct SetSuccessorBody {
  std::uint32_t node = 0;
  std::uint16_t port = 0;
};
struct RerequestBody {
  std::uint64_t version = 0;
  std::uint32_t lowest_missing = 0;
};
struct CompleteBody {
  std::uint32_t node = 0;
  std::uint64_t version = 0;
  std::uint64_t digest = 0;
  std::uint64_t micros = 0;
};

ControlFrame make_set_successor(std::uint64_t epoch, SetSuccessorBody b);
ControlFrame make_rerequest(std::uint64_t epoch, RerequestBody b);
ControlFrame make_complete(std::uint64_t epoch, CompleteBody b);
ControlFrame make_hello(std::uint64_t epoch, std::uint32_t node);
ControlFrame make_digest_request(std::uint64_t epoch, std::uint64_t version);
ControlFrame make_simple(std::uint64_t epoch, ControlOp op);

SetSuccessorBody parse_set_successor(const ControlFrame& f);
RerequestBody parse_rerequest(const ControlFrame& f);
CompleteBody parse_complete(const ControlFrame& f);
std::uint32_t parse_hello(const ControlFrame& f);
std::uint64_t parse_digest_request(const ControlFrame& f);

}  // namespace wire
}  // namespace rollsim

#pragma once

#include <cstdint>

namespace rollsim {

// Chain broadcast parameters: p nodes (master included), M bytes, per-byte
// time and per-message startup time.
struct BroadcastParams {
  int p = 2;
  double m_bytes = 0.0;
  double t_byte = 1e-9;
  double t_start = 0.0;

  void validate() const;
};

struct LatencyTerms {
  double bandwidth = 0.0;  // M * T_byte
  double latency = 0.0;    // (p - 2) * T_start
  double pipeline = 0.0;   // 2 * sqrt((p - 2) * M * T_byte * T_start)

  double total() const { return bandwidth + latency + pipeline; }
};

inline constexpr int kDefaultChunkCap = 1024;

// Time for one chunk to cross one hop: M/k * T_byte + T_start.
double chunk_time(const BroadcastParams& params, std::int64_t k);

// T(p, k) = (p + k - 2) * (M/k * T_byte + T_start).
double chain_latency(const BroadcastParams& params, std::int64_t k);

// The same expression for real-valued k > 0.
double chain_latency_continuous(const BroadcastParams& params, double k);

// Real-valued minimizer sqrt((p - 2) * M * T_byte / T_start).
double continuous_optimal_chunks(const BroadcastParams& params);

// Integer chunk count minimizing T(p, k) within [1, k_cap]. T is convex in
// k, so the best of floor and ceil of the continuous optimum is exact.
// T_start == 0 returns k_cap.
std::int64_t optimal_chunks(const BroadcastParams& params, std::int64_t k_cap = kDefaultChunkCap);

// T*(p) = M*T_byte + (p-2)*T_start + 2*sqrt((p-2)*M*T_byte*T_start).
LatencyTerms latency_decomposition(const BroadcastParams& params);

}  // namespace rollsim

#include "rollsim/relay_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rollsim {

void BroadcastParams::validate() const {
  if (p < 2) throw std::invalid_argument("p must be >= 2");
  if (!(m_bytes >= 0.0)) throw std::invalid_argument("M must be >= 0");
  if (!(t_byte > 0.0)) throw std::invalid_argument("T_byte must be > 0");
  if (!(t_start >= 0.0)) throw std::invalid_argument("T_start must be >= 0");
}

double chunk_time(const BroadcastParams& params, std::int64_t k) {
  return params.m_bytes / static_cast<double>(k) * params.t_byte + params.t_start;
}

double chain_latency(const BroadcastParams& params, std::int64_t k) {
  params.validate();
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  return static_cast<double>(params.p + k - 2) * chunk_time(params, k);
}

double chain_latency_continuous(const BroadcastParams& params, double k) {
  params.validate();
  if (!(k > 0.0)) throw std::invalid_argument("k must be > 0");
  return (params.p + k - 2.0) * (params.m_bytes / k * params.t_byte + params.t_start);
}

double continuous_optimal_chunks(const BroadcastParams& params) {
  params.validate();
  if (params.t_start == 0.0) return HUGE_VAL;
  return std::sqrt((params.p - 2) * params.m_bytes * params.t_byte / params.t_start);
}

std::int64_t optimal_chunks(const BroadcastParams& params, std::int64_t k_cap) {
  params.validate();
  if (k_cap < 1) throw std::invalid_argument("k_cap must be >= 1");
  if (params.t_start == 0.0) return k_cap;
  const double k_star = continuous_optimal_chunks(params);
  if (k_star >= static_cast<double>(k_cap)) return k_cap;
  const auto lo = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(k_star)), 1, k_cap);
  const auto hi = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil(k_star)), 1, k_cap);
  return chain_latency(params, hi) < chain_latency(params, lo) ? hi : lo;
}

LatencyTerms latency_decomposition(const BroadcastParams& params) {
  params.validate();
  const double q = params.p - 2.0;
  LatencyTerms terms;
  terms.bandwidth = params.m_bytes * params.t_byte;
  terms.latency = q * params.t_start;
  terms.pipeline = 2.0 * std::sqrt(q * params.m_bytes * params.t_byte * params.t_start);
  return terms;
}

}  // namespace rollsim

#include <gtest/gtest.h>

#include <cmath>

#include "rollsim/relay_model.hpp"
#include "rollsim/simcore.hpp"

using namespace rollsim;

namespace {

const BroadcastParams kGig{2, 1e9, 1e-9, 1e-3};

BroadcastParams with_p(BroadcastParams b, int p) {
  b.p = p;
  return b;
}

// T(p, k) written out independently.
double oracle_t(int p, double m, double tb, double ts, double k) {
  return (p + k - 2.0) * (m / k * tb + ts);
}

}  // namespace

TEST(ChainLatency, ClosedFormExamples) {
  EXPECT_NEAR(chain_latency(kGig, 1), 1.001, 1e-12);
  EXPECT_NEAR(chain_latency(with_p(kGig, 4), 2), 2.004, 1e-12);
  EXPECT_NEAR(chain_latency(with_p(kGig, 3), 32), 33.0 * (1.0 / 32.0 + 0.001), 1e-12);
  EXPECT_NEAR(chain_latency(with_p(kGig, 3), 32), 1.0643, 1e-4);
}

TEST(ChainLatency, RejectsBadArguments) {
  EXPECT_THROW(chain_latency(kGig, 0), std::invalid_argument);
  EXPECT_THROW(chain_latency(with_p(kGig, 1), 1), std::invalid_argument);
  BroadcastParams neg = kGig;
  neg.t_byte = 0.0;
  EXPECT_THROW(neg.validate(), std::invalid_argument);
}

TEST(OptimalChunks, Examples) {
  EXPECT_EQ(optimal_chunks(kGig), 1);
  EXPECT_EQ(optimal_chunks(with_p(kGig, 3)), 32);
  BroadcastParams free_start = with_p(kGig, 8);
  free_start.t_start = 0.0;
  EXPECT_EQ(optimal_chunks(free_start, 512), 512);
  EXPECT_EQ(optimal_chunks(with_p(kGig, 1000), 16), 16);  // clamp
}

TEST(OptimalChunks, BeatsNeighboursOnRandomGrid) {
  RngStream rng(3, "relay.grid");
  for (int i = 0; i < 100; ++i) {
    const int p = 2 + static_cast<int>(rng.uniform() * 200);
    const double m = std::pow(10.0, 6.0 + 4.0 * rng.uniform());
    const double tb = std::pow(10.0, -11.0 + 3.0 * rng.uniform());
    const double ts = std::pow(10.0, -6.0 + 3.0 * rng.uniform());
    const BroadcastParams params{p, m, tb, ts};
    const auto k = optimal_chunks(params, 1 << 20);
    const double t = chain_latency(params, k);
    EXPECT_NEAR(t, oracle_t(p, m, tb, ts, static_cast<double>(k)), 1e-9 * t);
    EXPECT_LE(t, oracle_t(p, m, tb, ts, static_cast<double>(k + 1)) * (1 + 1e-12));
    if (k > 1) {
      EXPECT_LE(t, oracle_t(p, m, tb, ts, static_cast<double>(k - 1)) * (1 + 1e-12));
    }
  }
}

TEST(OptimalChunks, MatchesExhaustiveSearch) {
  for (int p = 2; p <= 20; ++p) {
    const auto params = with_p(kGig, p);
    std::int64_t best = 1;
    for (std::int64_t k = 2; k <= 1024; ++k) {
      if (oracle_t(p, 1e9, 1e-9, 1e-3, k) < oracle_t(p, 1e9, 1e-9, 1e-3, best)) best = k;
    }
    EXPECT_EQ(optimal_chunks(params), best) << "p=" << p;
  }
}

TEST(Decomposition, TwoNodesIsBandwidthOnly) {
  const auto t = latency_decomposition(kGig);
  EXPECT_DOUBLE_EQ(t.bandwidth, 1.0);
  EXPECT_DOUBLE_EQ(t.latency, 0.0);
  EXPECT_DOUBLE_EQ(t.pipeline, 0.0);
}

TEST(Decomposition, WideChainPoint) {
  // M*T_byte = 1.6 s, T_start = 5 us, p = 128.
  const BroadcastParams params{128, 1.6e9, 1e-9, 5e-6};
  const auto t = latency_decomposition(params);
  EXPECT_NEAR(t.bandwidth, 1.6, 1e-12);
  EXPECT_NEAR(t.latency, 126 * 5e-6, 1e-12);
  EXPECT_NEAR(t.pipeline, 2.0 * std::sqrt(126 * 1.6 * 5e-6), 1e-12);
  EXPECT_NEAR(t.pipeline, 0.0635, 5e-5);
  EXPECT_NEAR(t.total() / t.bandwidth, 1.040, 5e-4);
}

TEST(Decomposition, SumsToContinuousOptimum) {
  RngStream rng(11, "relay.identity");
  for (int i = 0; i < 200; ++i) {
    const BroadcastParams params{3 + static_cast<int>(rng.uniform() * 500),
                                 std::pow(10.0, 6.0 + 5.0 * rng.uniform()), 1e-10 * (1 + rng.uniform()),
                                 1e-6 * (1 + 100 * rng.uniform())};
    const double k = std::sqrt((params.p - 2) * params.m_bytes * params.t_byte / params.t_start);
    const double direct = oracle_t(params.p, params.m_bytes, params.t_byte, params.t_start, k);
    EXPECT_NEAR(latency_decomposition(params).total() / direct, 1.0, 1e-12);
    EXPECT_NEAR(continuous_optimal_chunks(params), k, 1e-9 * k);
    EXPECT_NEAR(chain_latency_continuous(params, k), direct, 1e-12 * direct);
  }
}

TEST(Decomposition, ScalesGentlyWithChainLength) {
  const BroadcastParams base{2, 1.6e9, 1e-9, 5e-6};
  double prev = latency_decomposition(base).total();
  const double t2 = prev;
  for (int p = 3; p <= 128; ++p) {
    const double t = latency_decomposition(with_p(base, p)).total();
    EXPECT_GE(t, prev);
    prev = t;
  }
  EXPECT_LE(prev / t2, 1.05);
}

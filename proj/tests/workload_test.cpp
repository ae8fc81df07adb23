#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "rollsim/workload.hpp"

using namespace rollsim;

namespace {

// Standard normal quantile by bisection on erfc; independent of the library.
double z_of(double p) {
  double lo = -10.0, hi = 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double cdf = 0.5 * std::erfc(-mid / std::sqrt(2.0));
    (cdf < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double empirical_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  return v[static_cast<std::size_t>(p * static_cast<double>(v.size() - 1))];
}

}  // namespace

TEST(Length, ConstantAlwaysMedian) {
  auto d = LengthDistribution::constant(500.0);
  RngStream rng(1, "len");
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_length(d, rng), 500);
}

TEST(Length, TailRatioSigma) {
  // sigma = ln(10) / z_0.99 = 2.302585 / 2.326348
  auto d = LengthDistribution::lognormal_from_tail_ratio(1000.0, 10.0);
  EXPECT_NEAR(d.sigma, 0.98979, 1e-5);
  EXPECT_NEAR(std::log(10.0) / z_of(0.99), d.sigma, 1e-9);
}

TEST(Length, LognormalQuantilesMatchClosedForm) {
  auto d = LengthDistribution::lognormal(1000.0, 0.98979, 1'000'000'000);
  RngStream rng(2024, "len");
  std::vector<double> v;
  v.reserve(1'000'000);
  for (int i = 0; i < 1'000'000; ++i) v.push_back(static_cast<double>(sample_length(d, rng)));
  const double p50 = empirical_quantile(v, 0.50);
  const double p99 = empirical_quantile(v, 0.99);
  EXPECT_NEAR(p50 / 1000.0, 1.0, 0.05);
  EXPECT_NEAR(p99 / (1000.0 * std::exp(0.98979 * z_of(0.99))), 1.0, 0.05);
  EXPECT_NEAR(p99 / p50, 10.0, 0.5);
}

TEST(Length, TruncatedToMaxLen) {
  auto d = LengthDistribution::lognormal(1000.0, 0.98979, 16384);
  RngStream rng(5, "len");
  std::int64_t hi = 0;
  for (int i = 0; i < 200'000; ++i) {
    const auto n = sample_length(d, rng);
    ASSERT_GE(n, 1);
    ASSERT_LE(n, 16384);
    hi = std::max(hi, n);
  }
  EXPECT_EQ(hi, 16384);  // the cap binds at this sample size
}

TEST(Length, QuantileFunction) {
  auto d = LengthDistribution::lognormal(256.0, 0.5);
  EXPECT_DOUBLE_EQ(length_quantile(d, 0.5), 256.0);
  EXPECT_NEAR(length_quantile(d, 0.99), 256.0 * std::exp(0.5 * z_of(0.99)), 1e-6);
}

TEST(Length, EmpiricalTableFile) {
  const auto path = std::filesystem::temp_directory_path() / "rollsim_len_table.txt";
  {
    std::ofstream out(path);
    out << "# length mass\n100 0.5\n1000 0.25\n\n5000 0.25\n";
  }
  auto d = LengthDistribution::from_table_file(path, 4000);
  ASSERT_EQ(d.table.size(), 3u);
  EXPECT_DOUBLE_EQ(length_quantile(d, 0.4), 100.0);
  EXPECT_DOUBLE_EQ(length_quantile(d, 0.7), 1000.0);
  RngStream rng(3, "len");
  int short_count = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto n = sample_length(d, rng);
    ASSERT_TRUE(n == 100 || n == 1000 || n == 4000);
    short_count += n == 100;
  }
  EXPECT_NEAR(short_count / 10000.0, 0.5, 0.03);
  std::filesystem::remove(path);
}

TEST(Length, Validation) {
  auto bad = LengthDistribution::lognormal(0.5, 1.0);
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = LengthDistribution::lognormal(10.0, -1.0);
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(LengthDistribution::lognormal_from_tail_ratio(10.0, 0.5), std::invalid_argument);
}

TEST(EnvLatency, Constant) {
  EnvLatencyModel m;
  m.kind = EnvLatencyKind::Constant;
  m.median = 2.0;
  RngStream rng(1, "env");
  EXPECT_DOUBLE_EQ(sample_env_latency(m, rng), 2.0);
}

TEST(EnvLatency, LognormalMedian) {
  EnvLatencyModel m;
  m.kind = EnvLatencyKind::Lognormal;
  m.median = 2.0;
  m.sigma = 1.0;
  RngStream rng(11, "env");
  std::vector<double> v;
  v.reserve(1'000'000);
  for (int i = 0; i < 1'000'000; ++i) {
    const double x = sample_env_latency(m, rng);
    ASSERT_GT(x, 0.0);
    v.push_back(x);
  }
  EXPECT_NEAR(empirical_quantile(v, 0.5) / 2.0, 1.0, 0.03);
}

TEST(EnvLatency, NoneIsAnError) {
  EnvLatencyModel m;
  RngStream rng(1, "env");
  EXPECT_THROW(sample_env_latency(m, rng), std::invalid_argument);
  EXPECT_EQ(env_calls_for(m, 100000), 0);
}

TEST(EnvLatency, CallsEveryInterval) {
  EnvLatencyModel m;
  m.kind = EnvLatencyKind::Constant;
  m.calls_per_trajectory = 8;
  m.tokens_between_calls = 100;
  EXPECT_EQ(env_calls_for(m, 100), 0);   // boundary at the last token is not a call
  EXPECT_EQ(env_calls_for(m, 101), 1);
  EXPECT_EQ(env_calls_for(m, 350), 3);
  EXPECT_EQ(env_calls_for(m, 100000), 8);  // capped
}

TEST(PromptPool, SequentialIds) {
  PromptPool pool(512, false, 16, LengthDistribution::constant(64), RngStream(1, "p"));
  auto b = pool.next_prompts(32);
  ASSERT_EQ(b.prompts.size(), 32u);
  for (int i = 0; i < 32; ++i) {
    EXPECT_EQ(b.prompts[i].id, i);
    EXPECT_EQ(b.prompts[i].group_size, 16);
    EXPECT_EQ(b.prompts[i].prompt_tokens, 64);
  }
  EXPECT_FALSE(b.end_of_data);
}

TEST(PromptPool, CyclingWraps) {
  PromptPool pool(4, true, 16, LengthDistribution::constant(8), RngStream(1, "p"));
  auto b = pool.next_prompts(6);
  std::vector<PromptId> ids;
  for (const auto& p : b.prompts) ids.push_back(p.id);
  EXPECT_EQ(ids, (std::vector<PromptId>{0, 1, 2, 3, 0, 1}));
  EXPECT_FALSE(b.end_of_data);
}

TEST(PromptPool, ExhaustedSignalsEndOfData) {
  PromptPool pool(4, false, 2, LengthDistribution::constant(8), RngStream(1, "p"));
  auto b = pool.next_prompts(6);
  EXPECT_EQ(b.prompts.size(), 4u);
  EXPECT_TRUE(b.end_of_data);
  auto c = pool.next_prompts(1);
  EXPECT_TRUE(c.prompts.empty());
  EXPECT_TRUE(c.end_of_data);
}

TEST(PromptPool, NoRepeatWithinCycle) {
  PromptPool pool(100, true, 1, LengthDistribution::lognormal(100, 0.5, 2048), RngStream(3, "p"));
  auto b = pool.next_prompts(100);
  std::vector<PromptId> ids;
  for (const auto& p : b.prompts) ids.push_back(p.id);
  std::sort(ids.begin(), ids.end());
  EXPECT_EQ(std::adjacent_find(ids.begin(), ids.end()), ids.end());
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "rollsim/simcore.hpp"

namespace rollsim {

using PromptId = std::int64_t;

struct Prompt {
  PromptId id = 0;
  std::int64_t prompt_tokens = 1;
  int group_size = 16;
};

enum class LengthKind { Lognormal, Constant, EmpiricalTable };

struct LengthDistribution {
  LengthKind kind = LengthKind::Lognormal;
  double median = 1000.0;  // tokens
  double sigma = 0.0;
  std::int64_t max_len = 16384;
  // (length, probability mass) for EmpiricalTable; masses need not be normalized.
  std::vector<std::pair<std::int64_t, double>> table;

  static LengthDistribution constant(double value, std::int64_t max_len = 16384);
  static LengthDistribution lognormal(double median, double sigma, std::int64_t max_len = 16384);
  // Calibrates sigma so that q99 / q50 == tail_ratio before truncation.
  static LengthDistribution lognormal_from_tail_ratio(double median, double tail_ratio,
                                                      std::int64_t max_len = 16384);
  static LengthDistribution from_table_file(const std::filesystem::path& path,
                                            std::int64_t max_len = 16384);

  void validate() const;
};

// Standard normal quantile z_p.
double normal_quantile(double p);

// Closed-form quantile before truncation (lognormal: median * exp(sigma * z_p)).
double length_quantile(const LengthDistribution& dist, double p);

// Integer length in [1, max_len].
std::int64_t sample_length(const LengthDistribution& dist, RngStream& rng);

enum class EnvLatencyKind { None, Lognormal, Constant };

struct EnvLatencyModel {
  EnvLatencyKind kind = EnvLatencyKind::None;
  double median = 1.0;  // seconds
  double sigma = 0.0;
  int calls_per_trajectory = 0;
  std::int64_t tokens_between_calls = 1024;

  void validate() const;
};

// Throws std::invalid_argument for kind == None.
Seconds sample_env_latency(const EnvLatencyModel& model, RngStream& rng);

// Number of environment calls a trajectory of target_len tokens makes: one
// every tokens_between_calls generated tokens, strictly before completion.
int env_calls_for(const EnvLatencyModel& model, std::int64_t target_len);

struct PromptBatch {
  std::vector<Prompt> prompts;
  bool end_of_data = false;
};

// Prompt supply. Prompt token counts are fixed per id at construction, so a
// cycling pool replays identical prompts.
class PromptPool {
 public:
  PromptPool(std::int64_t size, bool cycle, int group_size, const LengthDistribution& prompt_len,
             RngStream rng);

  PromptBatch next_prompts(std::int64_t n);

  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  std::int64_t cursor() const { return cursor_; }
  bool exhausted() const { return !cycle_ && cursor_ >= size(); }

 private:
  std::vector<std::int64_t> tokens_;
  bool cycle_;
  int group_size_;
  std::int64_t cursor_ = 0;
};

}  // namespace rollsim

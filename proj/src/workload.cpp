#include "rollsim/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <boost/math/distributions/normal.hpp>

namespace rollsim {

LengthDistribution LengthDistribution::constant(double value, std::int64_t max_len) {
  LengthDistribution d;
  d.kind = LengthKind::Constant;
  d.median = value;
  d.sigma = 0.0;
  d.max_len = max_len;
  return d;
}

LengthDistribution LengthDistribution::lognormal(double median, double sigma,
                                                 std::int64_t max_len) {
  LengthDistribution d;
  d.kind = LengthKind::Lognormal;
  d.median = median;
  d.sigma = sigma;
  d.max_len = max_len;
  return d;
}

LengthDistribution LengthDistribution::lognormal_from_tail_ratio(double median, double tail_ratio,
                                                                 std::int64_t max_len) {
  if (!(tail_ratio >= 1.0)) throw std::invalid_argument("tail ratio must be >= 1");
  return lognormal(median, std::log(tail_ratio) / normal_quantile(0.99), max_len);
}

LengthDistribution LengthDistribution::from_table_file(const std::filesystem::path& path,
                                                       std::int64_t max_len) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open length table " + path.string());
  LengthDistribution d;
  d.kind = LengthKind::EmpiricalTable;
  d.max_len = max_len;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::int64_t len = 0;
    double mass = 0.0;
    if (!(ss >> len)) continue;  // blank
    if (!(ss >> mass) || len < 1 || mass < 0.0) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected '<length> <mass>'");
    }
    d.table.emplace_back(len, mass);
  }
  d.validate();
  return d;
}

void LengthDistribution::validate() const {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  switch (kind) {
    case LengthKind::Constant:
    case LengthKind::Lognormal:
      if (!(median >= 1.0)) throw std::invalid_argument("median must be >= 1");
      if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be >= 0");
      break;
    case LengthKind::EmpiricalTable: {
      double total = 0.0;
      for (const auto& [len, mass] : table) total += mass;
      if (table.empty() || !(total > 0.0)) {
        throw std::invalid_argument("empirical table needs positive total mass");
      }
      break;
    }
  }
}

double normal_quantile(double p) {
  static const boost::math::normal_distribution<double> standard;
  return boost::math::quantile(standard, p);
}

double length_quantile(const LengthDistribution& dist, double p) {
  switch (dist.kind) {
    case LengthKind::Constant: return dist.median;
    case LengthKind::Lognormal: return dist.median * std::exp(dist.sigma * normal_quantile(p));
    case LengthKind::EmpiricalTable: {
      double total = 0.0;
      for (const auto& e : dist.table) total += e.second;
      double acc = 0.0;
      for (const auto& [len, mass] : dist.table) {
        acc += mass;
        if (acc >= p * total) return static_cast<double>(len);
      }
      return static_cast<double>(dist.table.back().first);
    }
  }
  return dist.median;
}

std::int64_t sample_length(const LengthDistribution& dist, RngStream& rng) {
  double raw = 0.0;
  switch (dist.kind) {
    case LengthKind::Constant: raw = dist.median; break;
    case LengthKind::Lognormal: raw = dist.median * std::exp(dist.sigma * rng.normal()); break;
    case LengthKind::EmpiricalTable: raw = length_quantile(dist, rng.uniform()); break;
  }
  auto len = static_cast<std::int64_t>(std::llround(raw));
  return std::clamp<std::int64_t>(len, 1, dist.max_len);
}

void EnvLatencyModel::validate() const {
  if (calls_per_trajectory < 0) throw std::invalid_argument("calls_per_trajectory must be >= 0");
  if (kind != EnvLatencyKind::None) {
    if (!(median > 0.0)) throw std::invalid_argument("env latency median must be > 0");
    if (!(sigma >= 0.0)) throw std::invalid_argument("env latency sigma must be >= 0");
    if (tokens_between_calls < 1) throw std::invalid_argument("tokens_between_calls must be >= 1");
  }
}

Seconds sample_env_latency(const EnvLatencyModel& model, RngStream& rng) {
  switch (model.kind) {
    case EnvLatencyKind::None:
      throw std::invalid_argument("environment latency requested for kind=none");
    case EnvLatencyKind::Constant: return model.median;
    case EnvLatencyKind::Lognormal: return model.median * std::exp(model.sigma * rng.normal());
  }
  return model.median;
}

int env_calls_for(const EnvLatencyModel& model, std::int64_t target_len) {
  if (model.kind == EnvLatencyKind::None || model.calls_per_trajectory == 0) return 0;
  const std::int64_t boundaries = (target_len - 1) / model.tokens_between_calls;
  return static_cast<int>(std::min<std::int64_t>(boundaries, model.calls_per_trajectory));
}

// ---------------------------------------------------------------- PromptPool

PromptPool::PromptPool(std::int64_t size, bool cycle, int group_size,
                       const LengthDistribution& prompt_len, RngStream rng)
    : cycle_(cycle), group_size_(group_size) {
  if (size < 1) throw std::invalid_argument("prompt pool must hold at least one prompt");
  if (group_size < 1) throw std::invalid_argument("group_size must be >= 1");
  tokens_.reserve(static_cast<std::size_t>(size));
  for (std::int64_t i = 0; i < size; ++i) tokens_.push_back(sample_length(prompt_len, rng));
}

PromptBatch PromptPool::next_prompts(std::int64_t n) {
  PromptBatch batch;
  for (std::int64_t i = 0; i < n; ++i) {
    if (exhausted()) {
      batch.end_of_data = true;
      break;
    }
    const std::int64_t id = cursor_ % size();
    batch.prompts.push_back(Prompt{id, tokens_[static_cast<std::size_t>(id)], group_size_});
    ++cursor_;
  }
  if (exhausted()) batch.end_of_data = batch.end_of_data || batch.prompts.empty();
  return batch;
}

}  // namespace rollsim

#include "rollsim/trainer.hpp"

#include <stdexcept>

namespace rollsim {

std::size_t TrainerConfig::minibatch_size() const {
  return global_batch / static_cast<std::size_t>(minibatches_per_iter);
}

void TrainerConfig::validate() const {
  if (global_batch < 1) throw std::invalid_argument("global_batch must be >= 1");
  if (minibatches_per_iter < 1) throw std::invalid_argument("minibatches_per_iter must be >= 1");
  if (global_batch % static_cast<std::size_t>(minibatches_per_iter) != 0) {
    throw std::invalid_argument("global_batch must be divisible by minibatches_per_iter");
  }
  if (!(t_minibatch >= 0.0)) throw std::invalid_argument("t_minibatch must be >= 0");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
  if (!(recovery_latency >= 0.0)) throw std::invalid_argument("recovery_latency must be >= 0");
}

Trainer::Trainer(TrainerConfig config) : config_(config) { config_.validate(); }

Seconds Trainer::train_iteration(ExperienceBuffer& buffer) {
  if (failed_) throw std::logic_error("train_iteration on a failed trainer");
  if (in_iteration()) throw std::logic_error("iteration already in progress");
  if (buffer.available() < config_.global_batch) return -1.0;
  auto taken = buffer.sample(config_.global_batch);
  for (const auto& r : taken.records) {
    taken_.push_back(r.trajectory_id);
    tokens_ += r.total_tokens;
  }
  whole_batch_ = true;
  minibatch_running_ = true;
  return config_.t_minibatch * config_.minibatches_per_iter;
}

Seconds Trainer::begin_minibatch(ExperienceBuffer& buffer) {
  if (failed_) throw std::logic_error("begin_minibatch on a failed trainer");
  if (minibatch_running_) throw std::logic_error("mini-batch already running");
  const std::size_t n = config_.minibatch_size();
  if (buffer.available() < n) return -1.0;
  auto taken = buffer.sample(n);
  for (const auto& r : taken.records) {
    taken_.push_back(r.trajectory_id);
    tokens_ += r.total_tokens;
  }
  whole_batch_ = false;
  minibatch_running_ = true;
  return config_.t_minibatch;
}

bool Trainer::finish_minibatch(IterationDone* done) {
  if (!minibatch_running_) throw std::logic_error("no mini-batch running");
  minibatch_running_ = false;
  minibatches_done_ = whole_batch_ ? config_.minibatches_per_iter : minibatches_done_ + 1;
  if (minibatches_done_ < config_.minibatches_per_iter) return false;

  ++version_;
  IterationDone out;
  out.version = version_;
  out.tokens = tokens_;
  if (config_.checkpoint_every > 0 && version_ % config_.checkpoint_every == 0) {
    checkpoint();
    out.checkpointed = true;
  }
  minibatches_done_ = 0;
  taken_.clear();
  tokens_ = 0;
  if (done) *done = out;
  return true;
}

void Trainer::checkpoint() { last_checkpoint_ = version_; }

void Trainer::fail(ExperienceBuffer& buffer) {
  if (failed_) throw std::logic_error("trainer already failed");
  buffer.unconsume(taken_);
  taken_.clear();
  tokens_ = 0;
  minibatches_done_ = 0;
  minibatch_running_ = false;
  failed_ = true;
}

Version Trainer::restore() {
  if (!failed_) throw std::logic_error("restore on a healthy trainer");
  failed_ = false;
  version_ = last_checkpoint_;
  return version_;
}

}  // namespace rollsim

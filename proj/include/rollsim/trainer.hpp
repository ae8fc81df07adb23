#pragma once

#include <cstdint>
#include <vector>

#include "rollsim/datapool.hpp"
#include "rollsim/simcore.hpp"

namespace rollsim {

struct TrainerConfig {
  std::size_t global_batch = 8192;  // records per iteration
  int minibatches_per_iter = 16;
  Seconds t_minibatch = 10.0;
  int checkpoint_every = 0;  // iterations; 0 disables checkpoints
  Seconds recovery_latency = 60.0;

  std::size_t minibatch_size() const;
  void validate() const;
};

// Actor -> master relay link.
struct ActorLink {
  double model_bytes = 0.0;  // M
  Seconds t_byte = 0.0;      // seconds per byte
  Seconds t_start = 0.0;

  // Actor stall for one publication. Independent of the relay chain length.
  Seconds transfer_time() const { return model_bytes * t_byte + t_start; }
};

// Result of a finished iteration.
struct IterationDone {
  Version version = 0;  // version after the increment
  std::int64_t tokens = 0;
  bool checkpointed = false;
};

// Actor trainer. An iteration consumes global_batch records in
// minibatches_per_iter sequential steps. Weights of an iteration become
// visible only after its last mini-batch.
class Trainer {
 public:
  explicit Trainer(TrainerConfig config);

  const TrainerConfig& config() const { return config_; }
  Version current_version() const { return version_; }
  Version last_checkpoint_version() const { return last_checkpoint_; }

  bool in_iteration() const { return minibatches_done_ > 0 || !taken_.empty(); }
  bool minibatch_running() const { return minibatch_running_; }
  int minibatches_done() const { return minibatches_done_; }
  bool failed() const { return failed_; }

  // Whole-batch mode: takes global_batch records at once when available.
  // Returns the compute time of the iteration, or a negative value when the
  // buffer is short (nothing is consumed then).
  Seconds train_iteration(ExperienceBuffer& buffer);

  // Streaming mode: takes one mini-batch of records when available. Returns
  // t_minibatch, or a negative value when the buffer is short.
  Seconds begin_minibatch(ExperienceBuffer& buffer);
  // Marks the running mini-batch (or whole iteration) done. Returns true
  // when the iteration is complete; `done` then holds the new version.
  bool finish_minibatch(IterationDone* done);

  // Actor-side publication stall.
  static Seconds publish_stall(const ActorLink& link) { return link.transfer_time(); }

  void checkpoint();
  // Discards the in-flight iteration and returns its records to the buffer.
  void fail(ExperienceBuffer& buffer);
  // Version after recovery: the last checkpoint, or 0 without one.
  Version restore();

 private:
  TrainerConfig config_;
  Version version_ = 0;
  Version last_checkpoint_ = 0;
  int minibatches_done_ = 0;
  bool minibatch_running_ = false;
  bool whole_batch_ = false;
  bool failed_ = false;
  std::vector<TrajectoryId> taken_;
  std::int64_t tokens_ = 0;
};

}  // namespace rollsim

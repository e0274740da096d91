#pragma once

// Desk-scale training loop: SGD with momentum or decoupled-weight-decay Adam,
// optional cosine schedule, cross-entropy loss, deterministic given the seed.

#include <stdexcept>
#include <string>
#include <vector>

#include "shvit/dataset.hpp"
#include "shvit/model.hpp"

namespace shvit {

enum class OptimizerKind { sgd_momentum, adamw };

struct TrainConfig {
  int steps = 300;
  int batch_size = 16;
  double lr = 0.1;
  double weight_decay = 0.0;
  double momentum = 0.9;  // SGD only
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  bool cosine_schedule = true;
  int eval_every = 50;
  uint64_t seed = 0;

  void validate() const;
};

struct TrainStepRecord {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double eval_acc = -1.0;  // -1 when no eval ran this step
};

struct TrainResult {
  std::vector<TrainStepRecord> curve;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_eval_acc = 0.0;

  std::string curve_csv() const;
};

// Thrown when the loss stops being finite; step is 1-based.
struct DivergenceError : std::runtime_error {
  int step;
  explicit DivergenceError(int step_);
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

EvalResult evaluate(Model& model, const SyntheticDataset& data);

TrainResult train(Model& model, const SyntheticDataset& train_set, const SyntheticDataset& eval_set,
                  const TrainConfig& cfg);

}  // namespace shvit

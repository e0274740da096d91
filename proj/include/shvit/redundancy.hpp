#pragma once

// Head-redundancy instruments: pairwise cosine similarity of attention maps
// and delta-mask ablation sweeps against a chosen attention layer.

#include <string>
#include <vector>

#include "shvit/dataset.hpp"
#include "shvit/model.hpp"
#include "shvit/train.hpp"

namespace shvit {

struct HeadSimReport {
  std::string layer_id;
  int heads = 0;
  int samples = 0;
  double average = 0.0;                            // HeadSim over ordered pairs and batch
  std::vector<std::vector<double>> pair_matrix;    // Nh x Nh mean cosine, diagonal 1

  std::string to_text() const;
  std::string to_json_text() const;
};

struct AblationEntry {
  std::vector<int> mask;
  double accuracy = 0.0;
  double mean_loss = 0.0;
  double delta_acc = 0.0;  // accuracy - baseline accuracy
};

struct AblationReport {
  std::string layer_id;
  std::string sweep;  // "one-hot" or "leave-one-out"
  double baseline_accuracy = 0.0;
  double baseline_loss = 0.0;
  std::vector<AblationEntry> entries;
  double best_accuracy = 0.0;
  std::vector<int> best_mask;

  std::string to_text() const;
  std::string to_json_text() const;
};

// Average cosine similarity of flattened per-head post-softmax maps, over all
// ordered pairs j != k, then over samples. maps: [N, Nh, T, T], Nh >= 2.
// Throws std::invalid_argument on fewer than two heads or a zero-norm map.
HeadSimReport head_similarity(const Tensor& maps, const std::string& layer_id);

// Captures attention maps at layer_id over the eval set, then scores them.
HeadSimReport head_similarity(Model& model, const std::string& layer_id,
                              const SyntheticDataset& data);

// Evaluates the model with the mask installed at layer_id only; the previous
// mask is restored before returning, even on error.
EvalResult ablate_heads(Model& model, const std::string& layer_id, const std::vector<int>& mask,
                        const SyntheticDataset& data);

AblationReport best_single_head_sweep(Model& model, const std::string& layer_id,
                                      const SyntheticDataset& data);

AblationReport leave_one_out_sweep(Model& model, const std::string& layer_id,
                                   const SyntheticDataset& data);

}  // namespace shvit

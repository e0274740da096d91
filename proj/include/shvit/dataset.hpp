#pragma once

// Synthetic class-conditional image data: one colored blob per image whose
// color and position both identify the class, plus optional position jitter
// and Gaussian pixel noise.

#include <vector>

#include "shvit/rng.hpp"
#include "shvit/tensor.hpp"

namespace shvit {

struct DatasetParams {
  int count = 128;       // total images, must divide evenly across classes
  int resolution = 32;   // divisible by 16
  int classes = 4;
  double noise_sigma = 0.0;
  bool jitter = true;    // small per-image blob displacement
  uint64_t seed = 0;
};

struct SyntheticDataset {
  Tensor images;            // [N, 3, R, R]
  std::vector<int> labels;  // length N, balanced round-robin
  DatasetParams params;

  int size() const { return static_cast<int>(labels.size()); }
  Tensor batch_images(const std::vector<int>& indices) const;
  std::vector<int> batch_labels(const std::vector<int>& indices) const;
};

SyntheticDataset gen_dataset(const DatasetParams& params);

}  // namespace shvit

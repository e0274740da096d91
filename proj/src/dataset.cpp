#include "shvit/dataset.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace shvit {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Class identity is carried twice over: the blob's position on a ring around
// the image center and its color both follow the class angle. Either cue
// alone suffices, which keeps the noiseless dataset cleanly separable.
struct ClassGeometry {
  double cx, cy;      // blob center in pixels
  double r, g, b;     // blob color
};

ClassGeometry class_geometry(int cls, int classes, int res) {
  const double theta = 2.0 * kPi * cls / classes;
  ClassGeometry g;
  g.cx = 0.5 * res + 0.3 * res * std::cos(theta);
  g.cy = 0.5 * res + 0.3 * res * std::sin(theta);
  g.r = 0.5 + 0.5 * std::cos(theta);
  g.g = 0.5 + 0.5 * std::cos(theta - 2.0 * kPi / 3.0);
  g.b = 0.5 + 0.5 * std::cos(theta + 2.0 * kPi / 3.0);
  return g;
}

}  // namespace

SyntheticDataset gen_dataset(const DatasetParams& params) {
  if (params.classes < 2) {
    throw std::invalid_argument("gen_dataset: need at least 2 classes, got " +
                                std::to_string(params.classes));
  }
  if (params.resolution <= 0 || params.resolution % 16 != 0) {
    throw std::invalid_argument("gen_dataset: resolution must be a positive multiple of 16, got " +
                                std::to_string(params.resolution));
  }
  if (params.count < params.classes || params.count % params.classes != 0) {
    throw std::invalid_argument("gen_dataset: count " + std::to_string(params.count) +
                                " must be a positive multiple of " +
                                std::to_string(params.classes) + " classes");
  }
  if (params.noise_sigma < 0.0) {
    throw std::invalid_argument("gen_dataset: noise sigma must be non-negative");
  }

  const int N = params.count, R = params.resolution;
  const double blob_sigma = R / 8.0;
  const double jitter_range = R / 16.0;

  Rng rng(params.seed);
  SyntheticDataset ds;
  ds.params = params;
  ds.images = Tensor::zeros({N, 3, R, R});
  ds.labels.resize(static_cast<std::size_t>(N));

  float* img = ds.images.ptr();
  const std::size_t plane = static_cast<std::size_t>(R) * R;
  for (int n = 0; n < N; ++n) {
    const int cls = n % params.classes;
    ds.labels[static_cast<std::size_t>(n)] = cls;
    ClassGeometry g = class_geometry(cls, params.classes, R);
    if (params.jitter) {
      g.cx += rng.uniform(-jitter_range, jitter_range);
      g.cy += rng.uniform(-jitter_range, jitter_range);
    }
    float* base = img + static_cast<std::size_t>(n) * 3 * plane;
    for (int y = 0; y < R; ++y) {
      for (int x = 0; x < R; ++x) {
        const double dx = x - g.cx, dy = y - g.cy;
        const double fall =
            std::exp(-(dx * dx + dy * dy) / (2.0 * blob_sigma * blob_sigma));
        const std::size_t px = static_cast<std::size_t>(y) * R + x;
        base[px] = static_cast<float>(g.r * fall);
        base[plane + px] = static_cast<float>(g.g * fall);
        base[2 * plane + px] = static_cast<float>(g.b * fall);
      }
    }
    if (params.noise_sigma > 0.0) {
      for (std::size_t i = 0; i < 3 * plane; ++i) {
        base[i] += static_cast<float>(params.noise_sigma * rng.normal());
      }
    }
  }
  return ds;
}

Tensor SyntheticDataset::batch_images(const std::vector<int>& indices) const {
  if (indices.empty()) {
    throw std::invalid_argument("batch_images: empty index list");
  }
  const int R = params.resolution;
  const std::size_t stride = static_cast<std::size_t>(3) * R * R;
  Tensor out = Tensor::zeros({static_cast<int>(indices.size()), 3, R, R});
  const float* src = images.ptr();
  float* dst = out.ptr();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int n = indices[i];
    if (n < 0 || n >= size()) {
      throw std::out_of_range("batch_images: index " + std::to_string(n) + " out of range [0, " +
                              std::to_string(size()) + ")");
    }
    std::copy(src + n * stride, src + (n + 1) * stride, dst + i * stride);
  }
  return out;
}

std::vector<int> SyntheticDataset::batch_labels(const std::vector<int>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int n : indices) {
    if (n < 0 || n >= size()) {
      throw std::out_of_range("batch_labels: index " + std::to_string(n) + " out of range [0, " +
                              std::to_string(size()) + ")");
    }
    out.push_back(labels[static_cast<std::size_t>(n)]);
  }
  return out;
}

}  // namespace shvit

#pragma once

// Shared helpers for the test binaries: engine-tensor <-> oracle-array
// conversion and random input construction.

#include <algorithm>
#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "shvit/rng.hpp"
#include "shvit/tensor.hpp"

namespace testutil {

inline shvit::Tensor rand_tensor(const std::vector<int>& shape, shvit::Rng& rng, float lo = -1.0f,
                                 float hi = 1.0f) {
  std::vector<float> v(shvit::shape_numel(shape));
  for (auto& e : v) e = static_cast<float>(rng.uniform(lo, hi));
  return shvit::Tensor(shape, std::move(v));
}

inline oracle::Arr to_arr(const shvit::Tensor& t) {
  oracle::Arr a;
  a.shape = t.shape;
  a.v.assign(t.ptr(), t.ptr() + t.numel());
  return a;
}

inline std::vector<double> to_vec(const shvit::Tensor& t) {
  return std::vector<double>(t.ptr(), t.ptr() + t.numel());
}

inline double max_abs_diff(const shvit::Tensor& got, const oracle::Arr& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.numel(); ++i) {
    worst = std::max(worst, std::fabs(static_cast<double>(got.at(i)) - want.v[i]));
  }
  return worst;
}

inline double max_abs_diff(const shvit::Tensor& a, const shvit::Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::fabs(static_cast<double>(a.at(i)) - b.at(i)));
  }
  return worst;
}

inline bool bit_equal(const shvit::Tensor& a, const shvit::Tensor& b) {
  if (a.shape != b.shape) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace testutil

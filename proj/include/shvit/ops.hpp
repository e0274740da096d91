#pragma once

// Primitive numerical kernels, forward + recorded backward. All outputs are
// fresh copies (no aliasing); reductions use a fixed accumulation order so
// repeated runs are bit-identical.

#include <vector>

#include "shvit/tensor.hpp"

namespace shvit {

// Cross-correlation (NN convention, no kernel flip) over N,C,H,W.
// Output extents use floor arithmetic: H' = (H + 2*pad - kh) / stride + 1.
// groups == Cin gives the depthwise case. bias may be null.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias,
                  int stride, int pad, int groups = 1);

enum class MatMode { NN, TN, NT };

// 2-D [M,K]x[K,P], batched 3-D [B,M,K]x[B,K,P], or 3-D x 2-D with the right
// operand shared across the batch. TN treats `a` as transposed per batch
// (a: [B,K,M]), NT treats `b` as transposed (b: [B,P,K]). Accumulation over
// the contracted axis is sequential in k for every mode.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, MatMode mode = MatMode::NN);

// x: [N,K] row-major, w: [K,P], bias (length P) may be null.
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias);

// Max-subtracted softmax over the last axis.
template <typename S>
TensorT<S> softmax_lastdim(const TensorT<S>& x);

template <typename S>
TensorT<S> relu(const TensorT<S>& x);

// Same-shape elementwise sum (residual add).
template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S factor);

// [N,C,H,W] -> [N,C]
template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& x);

// Channel-axis partition/joins for 4-D (axis 1) tensors.
template <typename S>
std::vector<TensorT<S>> split_channels(const TensorT<S>& x, const std::vector<int>& sizes);

template <typename S>
TensorT<S> concat_channels(const std::vector<TensorT<S>>& parts);

// Last-axis slice/concat (token-major multi-head plumbing).
template <typename S>
TensorT<S> slice_lastdim(const TensorT<S>& x, int offset, int length);

template <typename S>
TensorT<S> concat_lastdim(const std::vector<TensorT<S>>& parts);

// Copying reshape; element count must be preserved.
template <typename S>
TensorT<S> reshape(const TensorT<S>& x, const std::vector<int>& new_shape);

// Swaps the last two axes (materialized).
template <typename S>
TensorT<S> transpose_last2(const TensorT<S>& x);

// Normalizes over the channel axis (axis 1) per remaining index. gamma/beta
// have length C.
template <typename S>
TensorT<S> layer_norm_channels(const TensorT<S>& x, const TensorT<S>& gamma,
                               const TensorT<S>& beta, S eps);

// Normalizes over the last axis per leading index.
template <typename S>
TensorT<S> layer_norm_lastdim(const TensorT<S>& x, const TensorT<S>& gamma,
                              const TensorT<S>& beta, S eps);

// Batch norm over (N, spatial) per channel for 2-D [N,C] or 4-D [N,C,H,W]
// input. In training mode uses batch statistics and updates running stats in
// place (momentum 0.1); in eval mode uses the provided running stats.
template <typename S>
TensorT<S> batch_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      TensorT<S>& running_mean, TensorT<S>& running_var, S eps, bool training);

// Mean softmax cross-entropy of logits [N,K] against integer labels.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels);

// Scalar sum of all elements.
template <typename S>
TensorT<S> sum_all(const TensorT<S>& x);

}  // namespace shvit

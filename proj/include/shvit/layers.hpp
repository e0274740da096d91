#pragma once

// Parameterized layers. Each layer owns its tensors and exposes
// visit_params(name_prefix, visitor) so the model can enumerate weights for
// counting, serialization, and optimizer updates without per-layer glue.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "shvit/ops.hpp"
#include "shvit/rng.hpp"
#include "shvit/tensor.hpp"

namespace shvit {

// visitor(name, tensor, trainable). Buffers (running stats) report
// trainable=false; they are serialized but skipped by param_count and the
// optimizer.
template <typename S>
using ParamVisitor = std::function<void(const std::string&, TensorT<S>&, bool)>;

// Kaiming-style uniform init, bound sqrt(6 / fan_in), requires_grad set.
template <typename S>
TensorT<S> init_uniform(const std::vector<int>& shape, int fan_in, Rng& rng);

template <typename S>
struct Conv2dLayer {
  TensorT<S> w;  // [Cout, Cin/groups, k, k]
  TensorT<S> b;  // undefined when bias-free
  int stride = 1;
  int pad = 0;
  int groups = 1;

  static Conv2dLayer make(int cin, int cout, int k, int stride, int pad, int groups, bool bias,
                          Rng& rng);
  TensorT<S> forward(const TensorT<S>& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

template <typename S>
struct BatchNormLayer {
  TensorT<S> gamma, beta;
  TensorT<S> running_mean, running_var;
  S eps = static_cast<S>(1e-5);

  static BatchNormLayer make(int channels);
  TensorT<S> forward(const TensorT<S>& x, bool training);
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

// Conv followed by BatchNorm. fold_bn() absorbs the BN statistics into the
// conv weights: w' = w * gamma/sqrt(var+eps), b' = (b - mean) * gamma/sqrt(var+eps) + beta.
template <typename S>
struct ConvBN {
  Conv2dLayer<S> conv;
  BatchNormLayer<S> bn;
  bool fused = false;

  static ConvBN make(int cin, int cout, int k, int stride, int pad, int groups, Rng& rng);
  TensorT<S> forward(const TensorT<S>& x, bool training);
  void fold_bn();
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

template <typename S>
struct LayerNormLayer {
  TensorT<S> gamma, beta;
  S eps = static_cast<S>(1e-5);

  static LayerNormLayer make(int channels);
  // Normalizes axis 1 of a 4-D map per spatial position.
  TensorT<S> forward_channels(const TensorT<S>& x) const;
  // Normalizes the last axis of a token-major tensor.
  TensorT<S> forward_lastdim(const TensorT<S>& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

// FFN: pointwise expand to 2C, ReLU, pointwise project back to C. Both convs
// carry BN. The residual add belongs to the caller.
template <typename S>
struct FfnLayer {
  ConvBN<S> expand;
  ConvBN<S> project;

  static FfnLayer make(int channels, Rng& rng);
  TensorT<S> forward(const TensorT<S>& x, bool training);
  void fold_bn();
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

// Single-head attention over the initial Cp of C channels. The remaining
// C - Cp channels bypass attention and are mixed only by the final projection,
// which spans all C channels. Queries and keys are compressed to d_qk; the
// value dim equals Cp so the attended slice keeps its width through concat.
template <typename S>
struct ShsaLayer {
  int dim = 0;   // C
  int pdim = 0;  // Cp
  int d_qk = 16;
  LayerNormLayer<S> pre_norm;  // over the Cp slice
  Conv2dLayer<S> wq, wk, wv;   // 1x1, bias-free
  Conv2dLayer<S> wo;           // 1x1 over all C channels, bias-free

  static ShsaLayer make(int dim, int pdim, int d_qk, Rng& rng);
  TensorT<S> forward(const TensorT<S>& x, TensorT<S>* attn_out = nullptr);
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

// Conventional token-major multi-head attention with a binary per-head mask
// applied to each head's output before the final projection. d_qk and d_v are
// per-head dims; attention width is heads * d_v.
template <typename S>
struct MhsaLayer {
  int dim = 0;
  int heads = 0;
  int d_qk = 0;
  int d_v = 0;
  LayerNormLayer<S> pre_norm;  // over all C channels, token-major
  TensorT<S> wq, wk, wv;       // [C, Nh*d_qk], [C, Nh*d_qk], [C, Nh*d_v]
  TensorT<S> wo;               // [Nh*d_v, C]
  std::vector<int> mask;       // delta, one per head, values in {0,1}

  static MhsaLayer make(int dim, int heads, int d_qk, int d_v, Rng& rng);
  TensorT<S> forward(const TensorT<S>& x, TensorT<S>* attn_out = nullptr);
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

// Post-softmax attention maps, shape [N, heads, T, T] (heads = 1 for SHSA).
template <typename S>
TensorT<S> attention_maps(const TensorT<S>& x, ShsaLayer<S>& layer);
template <typename S>
TensorT<S> attention_maps(const TensorT<S>& x, MhsaLayer<S>& layer);

// Comparative single-head designs. Bottleneck projects all C channels down to
// Cp, attends over the compressed map, and projects back to C; full-channel
// attends over all C channels (an ShsaLayer with pdim == dim).
template <typename S>
struct BottleneckAttnLayer {
  int dim = 0;
  int pdim = 0;
  Conv2dLayer<S> reduce;  // 1x1 C -> Cp
  ShsaLayer<S> inner;     // full attention over the Cp channels
  Conv2dLayer<S> expand;  // 1x1 Cp -> C

  static BottleneckAttnLayer make(int dim, int pdim, int d_qk, Rng& rng);
  TensorT<S> forward(const TensorT<S>& x);
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

template <typename S>
ShsaLayer<S> make_fullchannel_attn(int dim, int d_qk, Rng& rng);

using Conv2dF = Conv2dLayer<float>;
using ConvBNF = ConvBN<float>;
using ShsaF = ShsaLayer<float>;
using MhsaF = MhsaLayer<float>;

}  // namespace shvit

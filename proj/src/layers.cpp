#include "shvit/layers.hpp"

#include <cmath>
#include <cstring>

namespace shvit {

template <typename S>
TensorT<S> init_uniform(const std::vector<int>& shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<S> v(shape_numel(shape));
  for (auto& e : v) {
    e = static_cast<S>(rng.uniform(-bound, bound));
  }
  return TensorT<S>(shape, std::move(v), true);
}

// ---------------------------------------------------------------------------
// Conv2dLayer
// ---------------------------------------------------------------------------

template <typename S>
Conv2dLayer<S> Conv2dLayer<S>::make(int cin, int cout, int k, int stride, int pad, int groups,
                                    bool bias, Rng& rng) {
  if (cin <= 0 || cout <= 0 || k <= 0 || cin % groups != 0 || cout % groups != 0) {
    throw std::invalid_argument("Conv2dLayer: bad channel/kernel/group sizes");
  }
  Conv2dLayer layer;
  const int cig = cin / groups;
  layer.w = init_uniform<S>({cout, cig, k, k}, cig * k * k, rng);
  if (bias) {
    layer.b = TensorT<S>::zeros({cout}, true);
  }
  layer.stride = stride;
  layer.pad = pad;
  layer.groups = groups;
  return layer;
}

template <typename S>
TensorT<S> Conv2dLayer<S>::forward(const TensorT<S>& x) const {
  return conv2d(x, w, b.defined() ? &b : nullptr, stride, pad, groups);
}

template <typename S>
void Conv2dLayer<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  fn(prefix + ".w", w, true);
  if (b.defined()) {
    fn(prefix + ".b", b, true);
  }
}

// ---------------------------------------------------------------------------
// BatchNormLayer
// ---------------------------------------------------------------------------

template <typename S>
BatchNormLayer<S> BatchNormLayer<S>::make(int channels) {
  BatchNormLayer layer;
  layer.gamma = TensorT<S>::full({channels}, S(1), true);
  layer.beta = TensorT<S>::zeros({channels}, true);
  layer.running_mean = TensorT<S>::zeros({channels});
  layer.running_var = TensorT<S>::full({channels}, S(1));
  return layer;
}

template <typename S>
TensorT<S> BatchNormLayer<S>::forward(const TensorT<S>& x, bool training) {
  return batch_norm(x, gamma, beta, running_mean, running_var, eps, training);
}

template <typename S>
void BatchNormLayer<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  fn(prefix + ".gamma", gamma, true);
  fn(prefix + ".beta", beta, true);
  fn(prefix + ".running_mean", running_mean, false);
  fn(prefix + ".running_var", running_var, false);
}

// ---------------------------------------------------------------------------
// ConvBN
// ---------------------------------------------------------------------------

template <typename S>
ConvBN<S> ConvBN<S>::make(int cin, int cout, int k, int stride, int pad, int groups, Rng& rng) {
  ConvBN layer;
  layer.conv = Conv2dLayer<S>::make(cin, cout, k, stride, pad, groups, /*bias=*/false, rng);
  layer.bn = BatchNormLayer<S>::make(cout);
  return layer;
}

template <typename S>
TensorT<S> ConvBN<S>::forward(const TensorT<S>& x, bool training) {
  TensorT<S> y = conv.forward(x);
  if (!fused) {
    y = bn.forward(y, training);
  }
  return y;
}

template <typename S>
void ConvBN<S>::fold_bn() {
  if (fused) {
    throw std::logic_error("fold_bn: layer already fused");
  }
  const int cout = conv.w.extent(0);
  const std::size_t per_out = conv.w.numel() / cout;
  std::vector<S> folded_b(cout);
  for (int c = 0; c < cout; ++c) {
    const S var = bn.running_var.at(static_cast<std::size_t>(c));
    if (var + bn.eps <= S(0)) {
      throw std::runtime_error("fold_bn: non-positive variance");
    }
    const S g = bn.gamma.at(static_cast<std::size_t>(c)) / std::sqrt(var + bn.eps);
    S* wr = conv.w.ptr() + static_cast<std::size_t>(c) * per_out;
    for (std::size_t i = 0; i < per_out; ++i) {
      wr[i] *= g;
    }
    const S b0 = conv.b.defined() ? conv.b.at(static_cast<std::size_t>(c)) : S(0);
    folded_b[c] = (b0 - bn.running_mean.at(static_cast<std::size_t>(c))) * g +
                  bn.beta.at(static_cast<std::size_t>(c));
  }
  conv.b = TensorT<S>({cout}, std::move(folded_b), true);
  fused = true;
}

template <typename S>
void ConvBN<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  conv.visit_params(prefix + ".conv", fn);
  if (!fused) {
    bn.visit_params(prefix + ".bn", fn);
  }
}

// ---------------------------------------------------------------------------
// LayerNormLayer
// ---------------------------------------------------------------------------

template <typename S>
LayerNormLayer<S> LayerNormLayer<S>::make(int channels) {
  LayerNormLayer layer;
  layer.gamma = TensorT<S>::full({channels}, S(1), true);
  layer.beta = TensorT<S>::zeros({channels}, true);
  return layer;
}

template <typename S>
TensorT<S> LayerNormLayer<S>::forward_channels(const TensorT<S>& x) const {
  return layer_norm_channels(x, gamma, beta, eps);
}

template <typename S>
TensorT<S> LayerNormLayer<S>::forward_lastdim(const TensorT<S>& x) const {
  return layer_norm_lastdim(x, gamma, beta, eps);
}

template <typename S>
void LayerNormLayer<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  fn(prefix + ".gamma", gamma, true);
  fn(prefix + ".beta", beta, true);
}

// ---------------------------------------------------------------------------
// FfnLayer
// ---------------------------------------------------------------------------

template <typename S>
FfnLayer<S> FfnLayer<S>::make(int channels, Rng& rng) {
  FfnLayer layer;
  layer.expand = ConvBN<S>::make(channels, 2 * channels, 1, 1, 0, 1, rng);
  layer.project = ConvBN<S>::make(2 * channels, channels, 1, 1, 0, 1, rng);
  return layer;
}

template <typename S>
TensorT<S> FfnLayer<S>::forward(const TensorT<S>& x, bool training) {
  return project.forward(relu(expand.forward(x, training)), training);
}

template <typename S>
void FfnLayer<S>::fold_bn() {
  expand.fold_bn();
  project.fold_bn();
}

template <typename S>
void FfnLayer<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  expand.visit_params(prefix + ".expand", fn);
  project.visit_params(prefix + ".project", fn);
}

// ---------------------------------------------------------------------------
// ShsaLayer
// ---------------------------------------------------------------------------

template <typename S>
ShsaLayer<S> ShsaLayer<S>::make(int dim, int pdim, int d_qk, Rng& rng) {
  if (pdim < 1 || pdim > dim) {
    throw std::invalid_argument("ShsaLayer: need 1 <= Cp <= C, got Cp=" + std::to_string(pdim) +
                                " C=" + std::to_string(dim));
  }
  if (d_qk < 1) {
    throw std::invalid_argument("ShsaLayer: d_qk must be positive");
  }
  ShsaLayer layer;
  layer.dim = dim;
  layer.pdim = pdim;
  layer.d_qk = d_qk;
  layer.pre_norm = LayerNormLayer<S>::make(pdim);
  layer.wq = Conv2dLayer<S>::make(pdim, d_qk, 1, 1, 0, 1, /*bias=*/false, rng);
  layer.wk = Conv2dLayer<S>::make(pdim, d_qk, 1, 1, 0, 1, /*bias=*/false, rng);
  layer.wv = Conv2dLayer<S>::make(pdim, pdim, 1, 1, 0, 1, /*bias=*/false, rng);
  layer.wo = Conv2dLayer<S>::make(dim, dim, 1, 1, 0, 1, /*bias=*/false, rng);
  return layer;
}

template <typename S>
TensorT<S> ShsaLayer<S>::forward(const TensorT<S>& x, TensorT<S>* attn_out) {
  if (!x.defined() || x.dim() != 4 || x.extent(1) != dim) {
    throw std::invalid_argument("shsa_forward: expected [N, " + std::to_string(dim) +
                                ", H, W] input, got " + shape_str(x.shape));
  }
  const int N = x.extent(0), H = x.extent(2), W = x.extent(3);
  const int T = H * W;

  TensorT<S> xatt = x, xres;
  if (pdim < dim) {
    auto parts = split_channels(x, {pdim, dim - pdim});
    xatt = parts[0];
    xres = parts[1];
  }
  TensorT<S> xn = pre_norm.forward_channels(xatt);
  TensorT<S> q = reshape(wq.forward(xn), {N, d_qk, T});
  TensorT<S> k = reshape(wk.forward(xn), {N, d_qk, T});
  TensorT<S> v = reshape(wv.forward(xn), {N, pdim, T});

  TensorT<S> scores = scale(matmul(q, k, MatMode::TN),
                            static_cast<S>(1.0 / std::sqrt(static_cast<double>(d_qk))));
  TensorT<S> attn = softmax_lastdim(scores);  // [N, T, T], rows index queries
  if (attn_out) {
    *attn_out = attn.detached();
    attn_out->shape = {N, 1, T, T};
  }
  TensorT<S> mixed = reshape(matmul(v, attn, MatMode::NT), {N, pdim, H, W});

  TensorT<S> all = pdim < dim ? concat_channels<S>({mixed, xres}) : mixed;
  return wo.forward(all);
}

template <typename S>
void ShsaLayer<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  pre_norm.visit_params(prefix + ".ln", fn);
  wq.visit_params(prefix + ".wq", fn);
  wk.visit_params(prefix + ".wk", fn);
  wv.visit_params(prefix + ".wv", fn);
  wo.visit_params(prefix + ".wo", fn);
}

// ---------------------------------------------------------------------------
// MhsaLayer
// ---------------------------------------------------------------------------

template <typename S>
MhsaLayer<S> MhsaLayer<S>::make(int dim, int heads, int d_qk, int d_v, Rng& rng) {
  if (heads < 1 || d_qk < 1 || d_v < 1) {
    throw std::invalid_argument("MhsaLayer: heads and head dims must be positive");
  }
  MhsaLayer layer;
  layer.dim = dim;
  layer.heads = heads;
  layer.d_qk = d_qk;
  layer.d_v = d_v;
  layer.pre_norm = LayerNormLayer<S>::make(dim);
  layer.wq = init_uniform<S>({dim, heads * d_qk}, dim, rng);
  layer.wk = init_uniform<S>({dim, heads * d_qk}, dim, rng);
  layer.wv = init_uniform<S>({dim, heads * d_v}, dim, rng);
  layer.wo = init_uniform<S>({heads * d_v, dim}, heads * d_v, rng);
  layer.mask.assign(static_cast<std::size_t>(heads), 1);
  return layer;
}

template <typename S>
TensorT<S> MhsaLayer<S>::forward(const TensorT<S>& x, TensorT<S>* attn_out) {
  if (!x.defined() || x.dim() != 4 || x.extent(1) != dim) {
    throw std::invalid_argument("mhsa_forward: expected [N, " + std::to_string(dim) +
                                ", H, W] input, got " + shape_str(x.shape));
  }
  if (static_cast<int>(mask.size()) != heads) {
    throw std::invalid_argument("mhsa_forward: mask length != heads");
  }
  for (int m : mask) {
    if (m != 0 && m != 1) {
      throw std::invalid_argument("mhsa_forward: mask entries must be 0 or 1");
    }
  }
  const int N = x.extent(0), H = x.extent(2), W = x.extent(3);
  const int T = H * W;

  TensorT<S> tokens = pre_norm.forward_lastdim(transpose_last2(reshape(x, {N, dim, T})));
  TensorT<S> q = matmul(tokens, wq, MatMode::NN);  // [N, T, heads*d_qk]
  TensorT<S> k = matmul(tokens, wk, MatMode::NN);
  TensorT<S> v = matmul(tokens, wv, MatMode::NN);  // [N, T, heads*d_v]

  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d_qk)));
  std::vector<TensorT<S>> head_outs;
  std::vector<TensorT<S>> head_maps;
  for (int h = 0; h < heads; ++h) {
    TensorT<S> qh = slice_lastdim(q, h * d_qk, d_qk);
    TensorT<S> kh = slice_lastdim(k, h * d_qk, d_qk);
    TensorT<S> vh = slice_lastdim(v, h * d_v, d_v);
    TensorT<S> attn = softmax_lastdim(scale(matmul(qh, kh, MatMode::NT), inv_sqrt));
    if (attn_out) {
      head_maps.push_back(attn.detached());
    }
    TensorT<S> mixed = matmul(attn, vh, MatMode::NN);  // [N, T, d_v]
    // The mask multiply is applied for active heads too, so a masked and an
    // unmasked forward run the identical op sequence.
    head_outs.push_back(scale(mixed, static_cast<S>(mask[h])));
  }
  if (attn_out) {
    std::vector<S> stacked;
    stacked.reserve(static_cast<std::size_t>(N) * heads * T * T);
    // Interleave per-head maps [N,T,T] into [N, heads, T, T].
    for (int n = 0; n < N; ++n) {
      for (int h = 0; h < heads; ++h) {
        const S* src = head_maps[h].ptr() + static_cast<std::size_t>(n) * T * T;
        stacked.insert(stacked.end(), src, src + static_cast<std::size_t>(T) * T);
      }
    }
    *attn_out = TensorT<S>({N, heads, T, T}, std::move(stacked));
  }

  TensorT<S> cat = concat_lastdim(head_outs);          // [N, T, heads*d_v]
  TensorT<S> proj = matmul(cat, wo, MatMode::NN);      // [N, T, C]
  return reshape(transpose_last2(proj), {N, dim, H, W});
}

template <typename S>
void MhsaLayer<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  pre_norm.visit_params(prefix + ".ln", fn);
  fn(prefix + ".wq", wq, true);
  fn(prefix + ".wk", wk, true);
  fn(prefix + ".wv", wv, true);
  fn(prefix + ".wo", wo, true);
}

// ---------------------------------------------------------------------------
// Attention-map extraction
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> attention_maps(const TensorT<S>& x, ShsaLayer<S>& layer) {
  NoGradGuard ng;
  TensorT<S> maps;
  layer.forward(x, &maps);
  return maps;
}

template <typename S>
TensorT<S> attention_maps(const TensorT<S>& x, MhsaLayer<S>& layer) {
  NoGradGuard ng;
  TensorT<S> maps;
  layer.forward(x, &maps);
  return maps;
}

// ---------------------------------------------------------------------------
// Comparative single-head designs
// ---------------------------------------------------------------------------

template <typename S>
BottleneckAttnLayer<S> BottleneckAttnLayer<S>::make(int dim, int pdim, int d_qk, Rng& rng) {
  if (pdim < 1 || pdim > dim) {
    throw std::invalid_argument("BottleneckAttnLayer: need 1 <= Cp <= C");
  }
  BottleneckAttnLayer layer;
  layer.dim = dim;
  layer.pdim = pdim;
  layer.reduce = Conv2dLayer<S>::make(dim, pdim, 1, 1, 0, 1, /*bias=*/false, rng);
  layer.inner = ShsaLayer<S>::make(pdim, pdim, d_qk, rng);
  layer.expand = Conv2dLayer<S>::make(pdim, dim, 1, 1, 0, 1, /*bias=*/false, rng);
  return layer;
}

template <typename S>
TensorT<S> BottleneckAttnLayer<S>::forward(const TensorT<S>& x) {
  return expand.forward(inner.forward(reduce.forward(x)));
}

template <typename S>
void BottleneckAttnLayer<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  reduce.visit_params(prefix + ".reduce", fn);
  inner.visit_params(prefix + ".attn", fn);
  expand.visit_params(prefix + ".expand", fn);
}

template <typename S>
ShsaLayer<S> make_fullchannel_attn(int dim, int d_qk, Rng& rng) {
  return ShsaLayer<S>::make(dim, dim, d_qk, rng);
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

#define SHVIT_INSTANTIATE_LAYERS(S)                                              \
  template struct Conv2dLayer<S>;                                                \
  template struct BatchNormLayer<S>;                                             \
  template struct ConvBN<S>;                                                     \
  template struct LayerNormLayer<S>;                                             \
  template struct FfnLayer<S>;                                                   \
  template struct ShsaLayer<S>;                                                  \
  template struct MhsaLayer<S>;                                                  \
  template struct BottleneckAttnLayer<S>;                                        \
  template TensorT<S> attention_maps<S>(const TensorT<S>&, ShsaLayer<S>&);       \
  template TensorT<S> attention_maps<S>(const TensorT<S>&, MhsaLayer<S>&);       \
  template ShsaLayer<S> make_fullchannel_attn<S>(int, int, Rng&);                \
  template TensorT<S> init_uniform<S>(const std::vector<int>&, int, Rng&);

SHVIT_INSTANTIATE_LAYERS(float)
SHVIT_INSTANTIATE_LAYERS(double)

#undef SHVIT_INSTANTIATE_LAYERS

}  // namespace shvit

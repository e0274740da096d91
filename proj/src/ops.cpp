#include "shvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "shvit/profiler.hpp"

namespace shvit {

namespace {

using std::size_t;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

template <typename S, typename F>
void attach(TensorT<S>& out, std::vector<TensorT<S>> parents, F fn) {
  out.node = std::make_shared<NodeT<S>>();
  out.node->parents = std::move(parents);
  out.node->backprop = std::move(fn);
}

// An input participates in backprop only when it carries a grad buffer.
template <typename S>
S* grad_or_null(const TensorT<S>& t) {
  return t.grad ? t.grad->data() : nullptr;
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias, int stride,
                  int pad, int groups) {
  if (!x.defined() || !w.defined()) fail("conv2d: undefined input");
  if (x.dim() != 4 || w.dim() != 4) {
    fail("conv2d: expected 4-D activation and weight, got " + shape_str(x.shape) + " and " +
         shape_str(w.shape));
  }
  if (stride < 1 || pad < 0 || groups < 1) fail("conv2d: bad stride/pad/groups");
  const int N = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
  const int Cout = w.extent(0), Cw = w.extent(1), KH = w.extent(2), KW = w.extent(3);
  if (Cin % groups != 0 || Cout % groups != 0) {
    fail("conv2d: channels not divisible by groups");
  }
  const int cig = Cin / groups, cog = Cout / groups;
  if (Cw != cig) {
    fail("conv2d: weight shape " + shape_str(w.shape) + " does not match " +
         std::to_string(cig) + " input channels per group");
  }
  if (H + 2 * pad < KH || W + 2 * pad < KW) {
    fail("conv2d: kernel larger than padded input");
  }
  if (bias && static_cast<int>(bias->numel()) != Cout) fail("conv2d: bias length != Cout");
  const int Ho = (H + 2 * pad - KH) / stride + 1;
  const int Wo = (W + 2 * pad - KW) / stride + 1;

  OpTimer timer(OpKind::conv2d);
  bool tg = track_grad(x) || track_grad(w) || (bias && track_grad(*bias));
  TensorT<S> out({N, Cout, Ho, Wo}, std::vector<S>(shape_numel({N, Cout, Ho, Wo}), S(0)), tg);

  const S* xp = x.ptr();
  const S* wp = w.ptr();
  S* op = out.ptr();
  // Weight-stationary loops: for one (co, ci, kh, kw) the kernel value sweeps
  // the whole output plane, which vectorizes, while each output element still
  // accumulates its contributions in the same (ci, kh, kw) order every path.
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      for (int oc = 0; oc < cog; ++oc) {
        const int co = g * cog + oc;
        S* oplane = op + ((static_cast<size_t>(n) * Cout + co) * Ho) * Wo;
        for (int ic = 0; ic < cig; ++ic) {
          const int ci = g * cig + ic;
          const S* xplane = xp + ((static_cast<size_t>(n) * Cin + ci) * H) * W;
          const S* wrow = wp + ((static_cast<size_t>(co) * cig + ic) * KH) * KW;
          for (int kh = 0; kh < KH; ++kh) {
            for (int kw = 0; kw < KW; ++kw) {
              const S wv = wrow[kh * KW + kw];
              for (int ho = 0; ho < Ho; ++ho) {
                const int hi = ho * stride - pad + kh;
                if (hi < 0 || hi >= H) continue;
                // Valid output-column range for this kernel column.
                int lo = 0, hi_w = Wo - 1;
                while (lo * stride - pad + kw < 0) ++lo;
                while (hi_w >= 0 && hi_w * stride - pad + kw >= W) --hi_w;
                S* orow = oplane + static_cast<size_t>(ho) * Wo;
                const S* xrow = xplane + static_cast<size_t>(hi) * W;
                for (int wo = lo; wo <= hi_w; ++wo) {
                  orow[wo] += wv * xrow[wo * stride - pad + kw];
                }
              }
            }
          }
        }
        if (bias) {
          const S bv = bias->at(static_cast<size_t>(co));
          for (int i = 0; i < Ho * Wo; ++i) oplane[i] += bv;
        }
      }
    }
  }

  const std::uint64_t macs = static_cast<std::uint64_t>(N) * Cout * Ho * Wo * cig * KH * KW;
  const std::uint64_t mem = x.numel() + out.numel() + w.numel() + (bias ? bias->numel() : 0);
  timer.finish(macs, mem);
  check_finite(out, "conv2d");

  if (tg) {
    TensorT<S> b = bias ? *bias : TensorT<S>();
    std::vector<TensorT<S>> parents{x, w};
    if (bias) parents.push_back(b);
    attach(out, std::move(parents),
           [x, w, b, stride, pad, groups, N, Cin, H, W, Cout, cig, cog, KH, KW, Ho,
            Wo](const TensorT<S>& o) {
             const S* go = o.gptr();
             const S* xp = x.ptr();
             const S* wp = w.ptr();
             S* gx = grad_or_null(x);
             S* gw = grad_or_null(w);
             S* gb = b.defined() ? grad_or_null(b) : nullptr;
             for (int n = 0; n < N; ++n) {
               for (int g = 0; g < groups; ++g) {
                 for (int oc = 0; oc < cog; ++oc) {
                   const int co = g * cog + oc;
                   const S* gplane = go + ((static_cast<size_t>(n) * Cout + co) * Ho) * Wo;
                   if (gb) {
                     S acc = 0;
                     for (int i = 0; i < Ho * Wo; ++i) acc += gplane[i];
                     gb[co] += acc;
                   }
                   for (int ic = 0; ic < cig; ++ic) {
                     const int ci = g * cig + ic;
                     const S* xplane = xp + ((static_cast<size_t>(n) * Cin + ci) * H) * W;
                     S* gxplane = gx ? gx + ((static_cast<size_t>(n) * Cin + ci) * H) * W : nullptr;
                     const size_t woff = ((static_cast<size_t>(co) * cig + ic) * KH) * KW;
                     for (int kh = 0; kh < KH; ++kh) {
                       for (int kw = 0; kw < KW; ++kw) {
                         const S wv = wp[woff + kh * KW + kw];
                         S wacc = 0;
                         for (int ho = 0; ho < Ho; ++ho) {
                           const int hi = ho * stride - pad + kh;
                           if (hi < 0 || hi >= H) continue;
                           const S* grow = gplane + static_cast<size_t>(ho) * Wo;
                           const S* xrow = xplane + static_cast<size_t>(hi) * W;
                           S* gxrow = gxplane ? gxplane + static_cast<size_t>(hi) * W : nullptr;
                           for (int wo = 0; wo < Wo; ++wo) {
                             const int wi = wo * stride - pad + kw;
                             if (wi < 0 || wi >= W) continue;
                             const S g_ = grow[wo];
                             wacc += g_ * xrow[wi];
                             if (gxrow) gxrow[wi] += g_ * wv;
                           }
                         }
                         if (gw) gw[woff + kh * KW + kw] += wacc;
                       }
                     }
                   }
                 }
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

namespace {

struct MatDims {
  int B, M, K, P;
  size_t a_batch, b_batch;      // per-batch element offsets (0 when shared)
  size_t a_i, a_k, b_k, b_j;    // index strides
  bool batched_out;
};

template <typename S>
MatDims resolve_matmul(const TensorT<S>& a, const TensorT<S>& b, MatMode mode) {
  if (!a.defined() || !b.defined()) fail("matmul: undefined input");
  if (a.dim() < 2 || a.dim() > 3 || b.dim() < 2 || b.dim() > 3) {
    fail("matmul: operands must be 2-D or 3-D, got " + shape_str(a.shape) + " and " +
         shape_str(b.shape));
  }
  if (a.dim() == 2 && b.dim() == 3) fail("matmul: 2-D by 3-D is not supported");

  MatDims d{};
  const int ar = a.dim() == 3 ? a.extent(1) : a.extent(0);
  const int ac = a.dim() == 3 ? a.extent(2) : a.extent(1);
  const int br = b.dim() == 3 ? b.extent(1) : b.extent(0);
  const int bc = b.dim() == 3 ? b.extent(2) : b.extent(1);

  // Logical dims per mode; strides address the stored row-major layout.
  if (mode == MatMode::TN) {
    d.M = ac;
    d.K = ar;
    d.a_i = 1;
    d.a_k = static_cast<size_t>(ac);
  } else {
    d.M = ar;
    d.K = ac;
    d.a_i = static_cast<size_t>(ac);
    d.a_k = 1;
  }
  int bk;
  if (mode == MatMode::NT) {
    bk = bc;
    d.P = br;
    d.b_k = 1;
    d.b_j = static_cast<size_t>(bc);
  } else {
    bk = br;
    d.P = bc;
    d.b_k = static_cast<size_t>(bc);
    d.b_j = 1;
  }
  if (bk != d.K) {
    fail("matmul: contracted dims disagree: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  }
  d.B = a.dim() == 3 ? a.extent(0) : 1;
  if (b.dim() == 3) {
    if (a.dim() != 3 || b.extent(0) != d.B) fail("matmul: batch extents disagree");
    d.b_batch = static_cast<size_t>(br) * bc;
  } else {
    d.b_batch = 0;
  }
  d.a_batch = a.dim() == 3 ? static_cast<size_t>(ar) * ac : 0;
  d.batched_out = a.dim() == 3;
  return d;
}

}  // namespace

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, MatMode mode) {
  const MatDims d = resolve_matmul(a, b, mode);

  OpTimer timer(OpKind::matmul);
  std::vector<int> oshape =
      d.batched_out ? std::vector<int>{d.B, d.M, d.P} : std::vector<int>{d.M, d.P};
  bool tg = track_grad(a) || track_grad(b);
  TensorT<S> out(oshape, std::vector<S>(shape_numel(oshape), S(0)), tg);

  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.ptr();
  for (int bi = 0; bi < d.B; ++bi) {
    const S* pab = pa + bi * d.a_batch;
    const S* pbb = pb + bi * d.b_batch;
    S* pob = po + static_cast<size_t>(bi) * d.M * d.P;
    for (int i = 0; i < d.M; ++i) {
      for (int j = 0; j < d.P; ++j) {
        S acc = 0;
        for (int k = 0; k < d.K; ++k) {
          acc += pab[i * d.a_i + k * d.a_k] * pbb[k * d.b_k + j * d.b_j];
        }
        pob[static_cast<size_t>(i) * d.P + j] = acc;
      }
    }
  }

  const std::uint64_t macs =
      static_cast<std::uint64_t>(d.B) * d.M * d.P * d.K;
  timer.finish(macs, a.numel() + b.numel() + out.numel());
  check_finite(out, "matmul");

  if (tg) {
    attach(out, {a, b}, [a, b, d](const TensorT<S>& o) {
      const S* go = o.gptr();
      const S* pa = a.ptr();
      const S* pb = b.ptr();
      S* ga = grad_or_null(a);
      S* gb = grad_or_null(b);
      for (int bi = 0; bi < d.B; ++bi) {
        const S* pab = pa + bi * d.a_batch;
        const S* pbb = pb + bi * d.b_batch;
        S* gab = ga ? ga + bi * d.a_batch : nullptr;
        S* gbb = gb ? gb + bi * d.b_batch : nullptr;
        const S* gob = go + static_cast<size_t>(bi) * d.M * d.P;
        for (int i = 0; i < d.M; ++i) {
          for (int j = 0; j < d.P; ++j) {
            const S g_ = gob[static_cast<size_t>(i) * d.P + j];
            if (g_ == S(0)) continue;
            for (int k = 0; k < d.K; ++k) {
              if (gab) gab[i * d.a_i + k * d.a_k] += g_ * pbb[k * d.b_k + j * d.b_j];
              if (gbb) gbb[k * d.b_k + j * d.b_j] += g_ * pab[i * d.a_i + k * d.a_k];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias) {
  if (!x.defined() || !w.defined()) fail("linear: undefined input");
  if (x.dim() != 2 || w.dim() != 2) fail("linear: expected 2-D input and weight");
  const int N = x.extent(0), K = x.extent(1), P = w.extent(1);
  if (w.extent(0) != K) {
    fail("linear: weight shape " + shape_str(w.shape) + " does not match input " +
         shape_str(x.shape));
  }
  if (bias && static_cast<int>(bias->numel()) != P) fail("linear: bias length != output dim");

  OpTimer timer(OpKind::linear);
  bool tg = track_grad(x) || track_grad(w) || (bias && track_grad(*bias));
  TensorT<S> out({N, P}, std::vector<S>(static_cast<size_t>(N) * P, S(0)), tg);

  const S* xp = x.ptr();
  const S* wp = w.ptr();
  S* op = out.ptr();
  for (int n = 0; n < N; ++n) {
    for (int p = 0; p < P; ++p) {
      S acc = 0;
      for (int k = 0; k < K; ++k) {
        acc += xp[static_cast<size_t>(n) * K + k] * wp[static_cast<size_t>(k) * P + p];
      }
      if (bias) acc += bias->at(static_cast<size_t>(p));
      op[static_cast<size_t>(n) * P + p] = acc;
    }
  }

  timer.finish(static_cast<std::uint64_t>(N) * K * P,
               x.numel() + w.numel() + out.numel() + (bias ? bias->numel() : 0));
  check_finite(out, "linear");

  if (tg) {
    TensorT<S> b = bias ? *bias : TensorT<S>();
    std::vector<TensorT<S>> parents{x, w};
    if (bias) parents.push_back(b);
    attach(out, std::move(parents), [x, w, b, N, K, P](const TensorT<S>& o) {
      const S* go = o.gptr();
      const S* xp = x.ptr();
      const S* wp = w.ptr();
      S* gx = grad_or_null(x);
      S* gw = grad_or_null(w);
      S* gb = b.defined() ? grad_or_null(b) : nullptr;
      for (int n = 0; n < N; ++n) {
        for (int p = 0; p < P; ++p) {
          const S g_ = go[static_cast<size_t>(n) * P + p];
          if (gb) gb[p] += g_;
          for (int k = 0; k < K; ++k) {
            if (gx) gx[static_cast<size_t>(n) * K + k] += g_ * wp[static_cast<size_t>(k) * P + p];
            if (gw) gw[static_cast<size_t>(k) * P + p] += g_ * xp[static_cast<size_t>(n) * K + k];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise / reduction
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
  if (!x.defined() || x.dim() < 1) fail("softmax: undefined or 0-D input");
  const int L = x.extent(x.dim() - 1);
  const size_t rows = x.numel() / L;

  OpTimer timer(OpKind::softmax);
  bool tg = track_grad(x);
  TensorT<S> out(x.shape, std::vector<S>(x.numel(), S(0)), tg);
  const S* xp = x.ptr();
  S* op = out.ptr();
  for (size_t r = 0; r < rows; ++r) {
    const S* xi = xp + r * L;
    S* oi = op + r * L;
    S m = xi[0];
    for (int i = 1; i < L; ++i) m = std::max(m, xi[i]);
    S sum = 0;
    for (int i = 0; i < L; ++i) {
      oi[i] = std::exp(xi[i] - m);
      sum += oi[i];
    }
    const S inv = S(1) / sum;
    for (int i = 0; i < L; ++i) oi[i] *= inv;
  }
  timer.finish(0, 2 * x.numel());
  check_finite(out, "softmax");

  if (tg) {
    attach(out, {x}, [x, L, rows](const TensorT<S>& o) {
      const S* go = o.gptr();
      const S* op = o.ptr();
      S* gx = grad_or_null(x);
      if (!gx) return;
      for (size_t r = 0; r < rows; ++r) {
        const S* gi = go + r * L;
        const S* yi = op + r * L;
        S dot = 0;
        for (int i = 0; i < L; ++i) dot += gi[i] * yi[i];
        S* gxi = gx + r * L;
        for (int i = 0; i < L; ++i) gxi[i] += yi[i] * (gi[i] - dot);
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  if (!x.defined()) fail("relu: undefined input");
  OpTimer timer(OpKind::relu);
  bool tg = track_grad(x);
  TensorT<S> out(x.shape, std::vector<S>(x.numel(), S(0)), tg);
  const S* xp = x.ptr();
  S* op = out.ptr();
  for (size_t i = 0; i < x.numel(); ++i) op[i] = xp[i] > S(0) ? xp[i] : S(0);
  timer.finish(0, 2 * x.numel());

  if (tg) {
    attach(out, {x}, [x](const TensorT<S>& o) {
      S* gx = grad_or_null(x);
      if (!gx) return;
      const S* go = o.gptr();
      const S* xp = x.ptr();
      // Subgradient at exactly zero is zero.
      for (size_t i = 0; i < x.numel(); ++i) {
        if (xp[i] > S(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (!a.defined() || !b.defined()) fail("add: undefined input");
  if (!same_shape(a.shape, b.shape)) {
    fail("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  OpTimer timer(OpKind::add);
  bool tg = track_grad(a) || track_grad(b);
  TensorT<S> out(a.shape, std::vector<S>(a.numel(), S(0)), tg);
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.ptr();
  for (size_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  timer.finish(0, 3 * a.numel());
  check_finite(out, "add");

  if (tg) {
    attach(out, {a, b}, [a, b](const TensorT<S>& o) {
      const S* go = o.gptr();
      if (S* ga = grad_or_null(a)) {
        for (size_t i = 0; i < a.numel(); ++i) ga[i] += go[i];
      }
      if (S* gb = grad_or_null(b)) {
        for (size_t i = 0; i < b.numel(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S factor) {
  if (!x.defined()) fail("scale: undefined input");
  OpTimer timer(OpKind::scale);
  bool tg = track_grad(x);
  TensorT<S> out(x.shape, std::vector<S>(x.numel(), S(0)), tg);
  const S* xp = x.ptr();
  S* op = out.ptr();
  for (size_t i = 0; i < x.numel(); ++i) op[i] = xp[i] * factor;
  timer.finish(0, 2 * x.numel());
  check_finite(out, "scale");

  if (tg) {
    attach(out, {x}, [x, factor](const TensorT<S>& o) {
      if (S* gx = grad_or_null(x)) {
        const S* go = o.gptr();
        for (size_t i = 0; i < x.numel(); ++i) gx[i] += go[i] * factor;
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& x) {
  if (!x.defined() || x.dim() != 4) fail("global_avg_pool: expected 4-D input");
  const int N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);

  OpTimer timer(OpKind::global_avg_pool);
  bool tg = track_grad(x);
  TensorT<S> out({N, C}, std::vector<S>(static_cast<size_t>(N) * C, S(0)), tg);
  const S* xp = x.ptr();
  S* op = out.ptr();
  const S inv = S(1) / static_cast<S>(HW);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const S* plane = xp + (static_cast<size_t>(n) * C + c) * HW;
      S acc = 0;
      for (int i = 0; i < HW; ++i) acc += plane[i];
      op[static_cast<size_t>(n) * C + c] = acc * inv;
    }
  }
  timer.finish(0, x.numel() + out.numel());
  check_finite(out, "global_avg_pool");

  if (tg) {
    attach(out, {x}, [x, N, C, HW, inv](const TensorT<S>& o) {
      S* gx = grad_or_null(x);
      if (!gx) return;
      const S* go = o.gptr();
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const S g_ = go[static_cast<size_t>(n) * C + c] * inv;
          S* plane = gx + (static_cast<size_t>(n) * C + c) * HW;
          for (int i = 0; i < HW; ++i) plane[i] += g_;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data movement
// ---------------------------------------------------------------------------

template <typename S>
std::vector<TensorT<S>> split_channels(const TensorT<S>& x, const std::vector<int>& sizes) {
  if (!x.defined() || x.dim() != 4) fail("split_channels: expected 4-D input");
  int total = 0;
  for (int s : sizes) {
    if (s <= 0) fail("split_channels: non-positive part size");
    total += s;
  }
  if (total != x.extent(1)) {
    fail("split_channels: sizes sum " + std::to_string(total) + " != channels " +
         std::to_string(x.extent(1)));
  }
  const int N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);

  OpTimer timer(OpKind::split);
  bool tg = track_grad(x);
  std::vector<TensorT<S>> parts;
  int offset = 0;
  for (int s : sizes) {
    TensorT<S> part({N, s, x.extent(2), x.extent(3)},
                    std::vector<S>(static_cast<size_t>(N) * s * HW, S(0)), tg);
    S* pp = part.ptr();
    const S* xp = x.ptr();
    for (int n = 0; n < N; ++n) {
      const S* src = xp + (static_cast<size_t>(n) * C + offset) * HW;
      std::memcpy(pp + static_cast<size_t>(n) * s * HW, src, sizeof(S) * s * HW);
    }
    if (tg) {
      const int off = offset, sz = s;
      attach(part, {x}, [x, off, sz, N, C, HW](const TensorT<S>& o) {
        S* gx = grad_or_null(x);
        if (!gx) return;
        const S* go = o.gptr();
        for (int n = 0; n < N; ++n) {
          S* dst = gx + (static_cast<size_t>(n) * C + off) * HW;
          const S* src = go + static_cast<size_t>(n) * sz * HW;
          for (size_t i = 0; i < static_cast<size_t>(sz) * HW; ++i) dst[i] += src[i];
        }
      });
    }
    parts.push_back(std::move(part));
    offset += s;
  }
  timer.finish(0, 2 * x.numel());
  return parts;
}

template <typename S>
TensorT<S> concat_channels(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) fail("concat_channels: no parts");
  const int N = parts[0].extent(0), H = parts[0].extent(2), W = parts[0].extent(3);
  int C = 0;
  for (const auto& p : parts) {
    if (!p.defined() || p.dim() != 4) fail("concat_channels: expected 4-D parts");
    if (p.extent(0) != N || p.extent(2) != H || p.extent(3) != W) {
      fail("concat_channels: incompatible part shape " + shape_str(p.shape));
    }
    C += p.extent(1);
  }
  const int HW = H * W;

  OpTimer timer(OpKind::concat);
  bool tg = false;
  for (const auto& p : parts) tg = tg || track_grad(p);
  TensorT<S> out({N, C, H, W}, std::vector<S>(static_cast<size_t>(N) * C * HW, S(0)), tg);
  S* op = out.ptr();
  int offset = 0;
  for (const auto& p : parts) {
    const int s = p.extent(1);
    const S* pp = p.ptr();
    for (int n = 0; n < N; ++n) {
      std::memcpy(op + (static_cast<size_t>(n) * C + offset) * HW,
                  pp + static_cast<size_t>(n) * s * HW, sizeof(S) * s * HW);
    }
    offset += s;
  }
  timer.finish(0, 2 * out.numel());

  if (tg) {
    std::vector<int> sizes;
    for (const auto& p : parts) sizes.push_back(p.extent(1));
    attach(out, parts, [sizes, N, C, HW](const TensorT<S>& o) {
      const S* go = o.gptr();
      int off = 0;
      for (size_t pi = 0; pi < sizes.size(); ++pi) {
        const auto& p = o.node->parents[pi];
        const int s = sizes[pi];
        if (S* gp = grad_or_null(p)) {
          for (int n = 0; n < N; ++n) {
            const S* src = go + (static_cast<size_t>(n) * C + off) * HW;
            S* dst = gp + static_cast<size_t>(n) * s * HW;
            for (size_t i = 0; i < static_cast<size_t>(s) * HW; ++i) dst[i] += src[i];
          }
        }
        off += s;
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> slice_lastdim(const TensorT<S>& x, int offset, int length) {
  if (!x.defined() || x.dim() < 1) fail("slice_lastdim: undefined input");
  const int L = x.extent(x.dim() - 1);
  if (offset < 0 || length <= 0 || offset + length > L) {
    fail("slice_lastdim: range [" + std::to_string(offset) + ", " +
         std::to_string(offset + length) + ") outside extent " + std::to_string(L));
  }
  const size_t rows = x.numel() / L;

  OpTimer timer(OpKind::slice);
  bool tg = track_grad(x);
  std::vector<int> oshape = x.shape;
  oshape.back() = length;
  TensorT<S> out(oshape, std::vector<S>(rows * length, S(0)), tg);
  const S* xp = x.ptr();
  S* op = out.ptr();
  for (size_t r = 0; r < rows; ++r) {
    std::memcpy(op + r * length, xp + r * L + offset, sizeof(S) * length);
  }
  timer.finish(0, 2 * out.numel());

  if (tg) {
    attach(out, {x}, [x, offset, length, L, rows](const TensorT<S>& o) {
      S* gx = grad_or_null(x);
      if (!gx) return;
      const S* go = o.gptr();
      for (size_t r = 0; r < rows; ++r) {
        for (int i = 0; i < length; ++i) gx[r * L + offset + i] += go[r * length + i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> concat_lastdim(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) fail("concat_lastdim: no parts");
  const auto& head = parts[0];
  if (!head.defined() || head.dim() < 1) fail("concat_lastdim: undefined part");
  int L = 0;
  for (const auto& p : parts) {
    if (p.dim() != head.dim()) fail("concat_lastdim: rank mismatch");
    for (int i = 0; i + 1 < head.dim(); ++i) {
      if (p.extent(i) != head.extent(i)) {
        fail("concat_lastdim: incompatible part shape " + shape_str(p.shape));
      }
    }
    L += p.extent(p.dim() - 1);
  }
  const size_t rows = head.numel() / head.extent(head.dim() - 1);

  OpTimer timer(OpKind::concat);
  bool tg = false;
  for (const auto& p : parts) tg = tg || track_grad(p);
  std::vector<int> oshape = head.shape;
  oshape.back() = L;
  TensorT<S> out(oshape, std::vector<S>(rows * L, S(0)), tg);
  S* op = out.ptr();
  int off = 0;
  for (const auto& p : parts) {
    const int pl = p.extent(p.dim() - 1);
    const S* pp = p.ptr();
    for (size_t r = 0; r < rows; ++r) {
      std::memcpy(op + r * L + off, pp + r * pl, sizeof(S) * pl);
    }
    off += pl;
  }
  timer.finish(0, 2 * out.numel());

  if (tg) {
    std::vector<int> lens;
    for (const auto& p : parts) lens.push_back(p.extent(p.dim() - 1));
    attach(out, parts, [lens, L, rows](const TensorT<S>& o) {
      const S* go = o.gptr();
      int off = 0;
      for (size_t pi = 0; pi < lens.size(); ++pi) {
        const auto& p = o.node->parents[pi];
        const int pl = lens[pi];
        if (S* gp = grad_or_null(p)) {
          for (size_t r = 0; r < rows; ++r) {
            for (int i = 0; i < pl; ++i) gp[r * pl + i] += go[r * L + off + i];
          }
        }
        off += pl;
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, const std::vector<int>& new_shape) {
  if (!x.defined()) fail("reshape: undefined input");
  if (shape_numel(new_shape) != x.numel()) {
    fail("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(new_shape));
  }
  OpTimer timer(OpKind::reshape);
  bool tg = track_grad(x);
  TensorT<S> out(new_shape, std::vector<S>(x.ptr(), x.ptr() + x.numel()), tg);
  timer.finish(0, 2 * x.numel());

  if (tg) {
    attach(out, {x}, [x](const TensorT<S>& o) {
      if (S* gx = grad_or_null(x)) {
        const S* go = o.gptr();
        for (size_t i = 0; i < x.numel(); ++i) gx[i] += go[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> transpose_last2(const TensorT<S>& x) {
  if (!x.defined() || x.dim() < 2) fail("transpose_last2: need at least 2-D");
  const int A = x.extent(x.dim() - 2), B = x.extent(x.dim() - 1);
  const size_t mats = x.numel() / (static_cast<size_t>(A) * B);

  OpTimer timer(OpKind::transpose);
  bool tg = track_grad(x);
  std::vector<int> oshape = x.shape;
  std::swap(oshape[oshape.size() - 2], oshape[oshape.size() - 1]);
  TensorT<S> out(oshape, std::vector<S>(x.numel(), S(0)), tg);
  const S* xp = x.ptr();
  S* op = out.ptr();
  for (size_t m = 0; m < mats; ++m) {
    const S* xm = xp + m * A * B;
    S* om = op + m * A * B;
    for (int i = 0; i < A; ++i) {
      for (int j = 0; j < B; ++j) {
        om[static_cast<size_t>(j) * A + i] = xm[static_cast<size_t>(i) * B + j];
      }
    }
  }
  timer.finish(0, 2 * x.numel());

  if (tg) {
    attach(out, {x}, [x, A, B, mats](const TensorT<S>& o) {
      S* gx = grad_or_null(x);
      if (!gx) return;
      const S* go = o.gptr();
      for (size_t m = 0; m < mats; ++m) {
        const S* gm = go + m * A * B;
        S* xm = gx + m * A * B;
        for (int i = 0; i < A; ++i) {
          for (int j = 0; j < B; ++j) {
            xm[static_cast<size_t>(i) * B + j] += gm[static_cast<size_t>(j) * A + i];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace {

// Shared LayerNorm core over a strided axis: element (o, c, i) sits at
// (o*C + c)*inner + i. Channel-axis LN uses inner = H*W, last-axis LN uses
// inner = 1.
template <typename S>
TensorT<S> layer_norm_core(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                           S eps, size_t outer, int C, size_t inner) {
  if (static_cast<int>(gamma.numel()) != C || static_cast<int>(beta.numel()) != C) {
    fail("layer_norm: gamma/beta length != normalized extent " + std::to_string(C));
  }

  OpTimer timer(OpKind::layer_norm);
  bool tg = track_grad(x) || track_grad(gamma) || track_grad(beta);
  TensorT<S> out(x.shape, std::vector<S>(x.numel(), S(0)), tg);
  const S* xp = x.ptr();
  const S* gp = gamma.ptr();
  const S* bp = beta.ptr();
  S* op = out.ptr();
  const S invC = S(1) / static_cast<S>(C);
  for (size_t o = 0; o < outer; ++o) {
    for (size_t i = 0; i < inner; ++i) {
      const size_t base = o * C * inner + i;
      S mean = 0;
      for (int c = 0; c < C; ++c) mean += xp[base + c * inner];
      mean *= invC;
      S var = 0;
      for (int c = 0; c < C; ++c) {
        const S d = xp[base + c * inner] - mean;
        var += d * d;
      }
      var *= invC;
      const S inv_std = S(1) / std::sqrt(var + eps);
      for (int c = 0; c < C; ++c) {
        const size_t k = base + c * inner;
        op[k] = (xp[k] - mean) * inv_std * gp[c] + bp[c];
      }
    }
  }
  timer.finish(0, 2 * x.numel() + 2 * static_cast<std::uint64_t>(C));
  check_finite(out, "layer_norm");

  if (tg) {
    attach(out, {x, gamma, beta}, [x, gamma, beta, eps, outer, C, inner](const TensorT<S>& o) {
      const S* go = o.gptr();
      const S* xp = x.ptr();
      const S* gp = gamma.ptr();
      S* gx = grad_or_null(x);
      S* gg = grad_or_null(gamma);
      S* gb = grad_or_null(beta);
      const S invC = S(1) / static_cast<S>(C);
      for (size_t os = 0; os < outer; ++os) {
        for (size_t i = 0; i < inner; ++i) {
          const size_t base = os * C * inner + i;
          S mean = 0;
          for (int c = 0; c < C; ++c) mean += xp[base + c * inner];
          mean *= invC;
          S var = 0;
          for (int c = 0; c < C; ++c) {
            const S d = xp[base + c * inner] - mean;
            var += d * d;
          }
          var *= invC;
          const S inv_std = S(1) / std::sqrt(var + eps);
          // dx = inv_std * gamma * (dy - mean(dy*gamma)... computed via xhat):
          S mean_dyg = 0, mean_dyg_xhat = 0;
          for (int c = 0; c < C; ++c) {
            const size_t k = base + c * inner;
            const S xhat = (xp[k] - mean) * inv_std;
            const S dyg = go[k] * gp[c];
            mean_dyg += dyg;
            mean_dyg_xhat += dyg * xhat;
            if (gg) gg[c] += go[k] * xhat;
            if (gb) gb[c] += go[k];
          }
          mean_dyg *= invC;
          mean_dyg_xhat *= invC;
          if (gx) {
            for (int c = 0; c < C; ++c) {
              const size_t k = base + c * inner;
              const S xhat = (xp[k] - mean) * inv_std;
              gx[k] += inv_std * (go[k] * gp[c] - mean_dyg - xhat * mean_dyg_xhat);
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename S>
TensorT<S> layer_norm_channels(const TensorT<S>& x, const TensorT<S>& gamma,
                               const TensorT<S>& beta, S eps) {
  if (!x.defined() || x.dim() != 4) fail("layer_norm_channels: expected 4-D input");
  return layer_norm_core(x, gamma, beta, eps, static_cast<size_t>(x.extent(0)), x.extent(1),
                         static_cast<size_t>(x.extent(2)) * x.extent(3));
}

template <typename S>
TensorT<S> layer_norm_lastdim(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                              S eps) {
  if (!x.defined() || x.dim() < 1) fail("layer_norm_lastdim: undefined input");
  const int C = x.extent(x.dim() - 1);
  return layer_norm_core(x, gamma, beta, eps, x.numel() / C, C, 1);
}

template <typename S>
TensorT<S> batch_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      TensorT<S>& running_mean, TensorT<S>& running_var, S eps, bool training) {
  if (!x.defined() || (x.dim() != 2 && x.dim() != 4)) {
    fail("batch_norm: expected 2-D or 4-D input, got " + shape_str(x.shape));
  }
  const int N = x.extent(0), C = x.extent(1);
  const size_t sp = x.dim() == 4 ? static_cast<size_t>(x.extent(2)) * x.extent(3) : 1;
  if (static_cast<int>(gamma.numel()) != C || static_cast<int>(beta.numel()) != C ||
      static_cast<int>(running_mean.numel()) != C || static_cast<int>(running_var.numel()) != C) {
    fail("batch_norm: parameter length != channels");
  }

  OpTimer timer(OpKind::batch_norm);
  const size_t count = static_cast<size_t>(N) * sp;
  std::vector<S> mean(C), var(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      S m = 0;
      for (int n = 0; n < N; ++n) {
        const S* plane = x.ptr() + (static_cast<size_t>(n) * C + c) * sp;
        for (size_t i = 0; i < sp; ++i) m += plane[i];
      }
      m /= static_cast<S>(count);
      S v = 0;
      for (int n = 0; n < N; ++n) {
        const S* plane = x.ptr() + (static_cast<size_t>(n) * C + c) * sp;
        for (size_t i = 0; i < sp; ++i) {
          const S d = plane[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<S>(count);
      mean[c] = m;
      var[c] = v;
      // Running stats keep the unbiased variance, the usual convention.
      const S unbiased = count > 1 ? v * static_cast<S>(count) / static_cast<S>(count - 1) : v;
      running_mean.at(static_cast<size_t>(c)) =
          S(0.9) * running_mean.at(static_cast<size_t>(c)) + S(0.1) * m;
      running_var.at(static_cast<size_t>(c)) =
          S(0.9) * running_var.at(static_cast<size_t>(c)) + S(0.1) * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.at(static_cast<size_t>(c));
      var[c] = running_var.at(static_cast<size_t>(c));
      if (var[c] + eps <= S(0)) fail("batch_norm: non-positive variance");
    }
  }

  bool tg = track_grad(x) || track_grad(gamma) || track_grad(beta);
  TensorT<S> out(x.shape, std::vector<S>(x.numel(), S(0)), tg);
  {
    const S* xp = x.ptr();
    S* op = out.ptr();
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const S inv_std = S(1) / std::sqrt(var[c] + eps);
        const S g = gamma.at(static_cast<size_t>(c)) * inv_std;
        const S b = beta.at(static_cast<size_t>(c)) - mean[c] * g;
        const S* src = xp + (static_cast<size_t>(n) * C + c) * sp;
        S* dst = op + (static_cast<size_t>(n) * C + c) * sp;
        for (size_t i = 0; i < sp; ++i) dst[i] = src[i] * g + b;
      }
    }
  }
  timer.finish(0, 2 * x.numel() + 4 * static_cast<std::uint64_t>(C));
  check_finite(out, "batch_norm");

  if (tg) {
    attach(out, {x, gamma, beta},
           [x, gamma, beta, eps, mean, var, N, C, sp, count, training](const TensorT<S>& o) {
             const S* go = o.gptr();
             const S* xp = x.ptr();
             S* gx = grad_or_null(x);
             S* gg = grad_or_null(gamma);
             S* gb = grad_or_null(beta);
             for (int c = 0; c < C; ++c) {
               const S inv_std = S(1) / std::sqrt(var[c] + eps);
               const S gam = gamma.at(static_cast<size_t>(c));
               S sum_dy = 0, sum_dy_xhat = 0;
               for (int n = 0; n < N; ++n) {
                 const size_t base = (static_cast<size_t>(n) * C + c) * sp;
                 for (size_t i = 0; i < sp; ++i) {
                   const S dy = go[base + i];
                   sum_dy += dy;
                   sum_dy_xhat += dy * (xp[base + i] - mean[c]) * inv_std;
                 }
               }
               if (gg) gg[c] += sum_dy_xhat;
               if (gb) gb[c] += sum_dy;
               if (gx) {
                 const S inv_count = S(1) / static_cast<S>(count);
                 for (int n = 0; n < N; ++n) {
                   const size_t base = (static_cast<size_t>(n) * C + c) * sp;
                   for (size_t i = 0; i < sp; ++i) {
                     const S xhat = (xp[base + i] - mean[c]) * inv_std;
                     if (training) {
                       gx[base + i] += gam * inv_std *
                                       (go[base + i] - sum_dy * inv_count -
                                        xhat * sum_dy_xhat * inv_count);
                     } else {
                       gx[base + i] += gam * inv_std * go[base + i];
                     }
                   }
                 }
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss / reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels) {
  if (!logits.defined() || logits.dim() != 2) fail("cross_entropy: expected 2-D logits");
  const int N = logits.extent(0), K = logits.extent(1);
  if (static_cast<int>(labels.size()) != N) fail("cross_entropy: label count != batch");
  for (int l : labels) {
    if (l < 0 || l >= K) fail("cross_entropy: label " + std::to_string(l) + " outside [0, K)");
  }

  OpTimer timer(OpKind::cross_entropy);
  bool tg = track_grad(logits);
  const S* zp = logits.ptr();
  S total = 0;
  for (int n = 0; n < N; ++n) {
    const S* z = zp + static_cast<size_t>(n) * K;
    S m = z[0];
    for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
    S sum = 0;
    for (int k = 0; k < K; ++k) sum += std::exp(z[k] - m);
    total += m + std::log(sum) - z[labels[n]];
  }
  TensorT<S> out({1}, {total / static_cast<S>(N)}, tg);
  timer.finish(0, logits.numel() + N + 1);
  check_finite(out, "cross_entropy");

  if (tg) {
    attach(out, {logits}, [logits, labels, N, K](const TensorT<S>& o) {
      S* gz = grad_or_null(logits);
      if (!gz) return;
      const S g_ = o.gptr()[0] / static_cast<S>(N);
      const S* zp = logits.ptr();
      for (int n = 0; n < N; ++n) {
        const S* z = zp + static_cast<size_t>(n) * K;
        S m = z[0];
        for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
        S sum = 0;
        for (int k = 0; k < K; ++k) sum += std::exp(z[k] - m);
        S* g = gz + static_cast<size_t>(n) * K;
        for (int k = 0; k < K; ++k) {
          const S p = std::exp(z[k] - m) / sum;
          g[k] += g_ * (p - (k == labels[n] ? S(1) : S(0)));
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
  if (!x.defined()) fail("sum_all: undefined input");
  OpTimer timer(OpKind::sum_reduce);
  bool tg = track_grad(x);
  const S* xp = x.ptr();
  S acc = 0;
  for (size_t i = 0; i < x.numel(); ++i) acc += xp[i];
  TensorT<S> out({1}, {acc}, tg);
  timer.finish(0, x.numel() + 1);
  check_finite(out, "sum_reduce");

  if (tg) {
    attach(out, {x}, [x](const TensorT<S>& o) {
      if (S* gx = grad_or_null(x)) {
        const S g_ = o.gptr()[0];
        for (size_t i = 0; i < x.numel(); ++i) gx[i] += g_;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

#define SHVIT_INSTANTIATE_OPS(S)                                                              \
  template TensorT<S> conv2d<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>*, int, \
                                int, int);                                                    \
  template TensorT<S> matmul<S>(const TensorT<S>&, const TensorT<S>&, MatMode);               \
  template TensorT<S> linear<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>*);     \
  template TensorT<S> softmax_lastdim<S>(const TensorT<S>&);                                  \
  template TensorT<S> relu<S>(const TensorT<S>&);                                             \
  template TensorT<S> add<S>(const TensorT<S>&, const TensorT<S>&);                           \
  template TensorT<S> scale<S>(const TensorT<S>&, S);                                         \
  template TensorT<S> global_avg_pool<S>(const TensorT<S>&);                                  \
  template std::vector<TensorT<S>> split_channels<S>(const TensorT<S>&,                       \
                                                     const std::vector<int>&);                \
  template TensorT<S> concat_channels<S>(const std::vector<TensorT<S>>&);                     \
  template TensorT<S> slice_lastdim<S>(const TensorT<S>&, int, int);                          \
  template TensorT<S> concat_lastdim<S>(const std::vector<TensorT<S>>&);                      \
  template TensorT<S> reshape<S>(const TensorT<S>&, const std::vector<int>&);                 \
  template TensorT<S> transpose_last2<S>(const TensorT<S>&);                                  \
  template TensorT<S> layer_norm_channels<S>(const TensorT<S>&, const TensorT<S>&,            \
                                             const TensorT<S>&, S);                           \
  template TensorT<S> layer_norm_lastdim<S>(const TensorT<S>&, const TensorT<S>&,             \
                                            const TensorT<S>&, S);                            \
  template TensorT<S> batch_norm<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&,  \
                                    TensorT<S>&, TensorT<S>&, S, bool);                       \
  template TensorT<S> cross_entropy<S>(const TensorT<S>&, const std::vector<int>&);           \
  template TensorT<S> sum_all<S>(const TensorT<S>&);

SHVIT_INSTANTIATE_OPS(float)
SHVIT_INSTANTIATE_OPS(double)

#undef SHVIT_INSTANTIATE_OPS

}  // namespace shvit

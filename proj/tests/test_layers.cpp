#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <stdexcept>

#include "shvit/layers.hpp"
#include "shvit/model.hpp"
#include "shvit/ops.hpp"
#include "test_util.hpp"

using namespace shvit;
using testutil::max_abs_diff;
using testutil::rand_tensor;
using testutil::to_arr;
using testutil::to_vec;

namespace {

oracle::ShsaWeights extract_weights(const ShsaF& layer, int dim) {
  oracle::ShsaWeights w;
  w.pdim = layer.pdim;
  w.d_qk = layer.d_qk;
  w.ln_gamma = to_vec(layer.pre_norm.gamma);
  w.ln_beta = to_vec(layer.pre_norm.beta);
  // 1x1 conv weights [Cout, Cin, 1, 1] flatten to row-major [Cout, Cin].
  w.wq = to_vec(layer.wq.w);
  w.wk = to_vec(layer.wk.w);
  w.wv = to_vec(layer.wv.w);
  w.wo = to_vec(layer.wo.w);
  REQUIRE(static_cast<int>(w.wo.size()) == dim * dim);
  return w;
}

}  // namespace

TEST_CASE("shsa forward matches the triple-loop oracle on 20 random cases") {
  Rng rng(31);
  for (int i = 0; i < 20; ++i) {
    const int N = 1 + static_cast<int>(rng.next_below(2));
    const int H = 1 + static_cast<int>(rng.next_below(3));
    const int W = 1 + static_cast<int>(rng.next_below(3));
    const int C = 5 + static_cast<int>(rng.next_below(8));
    const int pdim = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(C)));
    const int d_qk = 4 + static_cast<int>(rng.next_below(8));
    ShsaF layer = ShsaF::make(C, pdim, d_qk, rng);
    Tensor x = rand_tensor({N, C, H, W}, rng);
    NoGradGuard ng;
    Tensor got = layer.forward(x);
    oracle::Arr want = oracle::shsa(to_arr(x), extract_weights(layer, C));
    INFO("case ", i, ": N=", N, " C=", C, " Cp=", pdim, " H=", H, " W=", W);
    CHECK(max_abs_diff(got, want) < 1e-5);
  }
}

TEST_CASE("shsa rejects bad construction and bad input") {
  Rng rng(32);
  CHECK_THROWS_AS(ShsaF::make(8, 0, 16, rng), std::invalid_argument);
  CHECK_THROWS_AS(ShsaF::make(8, 9, 16, rng), std::invalid_argument);
  ShsaF layer = ShsaF::make(8, 3, 16, rng);
  Tensor bad = rand_tensor({1, 7, 2, 2}, rng);
  NoGradGuard ng;
  CHECK_THROWS_AS(layer.forward(bad), std::invalid_argument);
}

TEST_CASE("single-token input collapses attention to the value path") {
  Rng rng(33);
  const int C = 9;
  ShsaF layer = ShsaF::make(C, partial_channels(1.0 / 4.67, C), 16, rng);
  Tensor x = rand_tensor({2, C, 1, 1}, rng);
  NoGradGuard ng;
  Tensor got = layer.forward(x);

  // With one token the softmax row is the single weight 1, so the attended
  // slice is exactly v computed from the normalized slice.
  auto parts = split_channels(x, {layer.pdim, C - layer.pdim});
  Tensor v = layer.wv.forward(layer.pre_norm.forward_channels(parts[0]));
  Tensor want = layer.wo.forward(concat_channels<float>({v, parts[1]}));
  CHECK(max_abs_diff(got, want) < 1e-5);
}

TEST_CASE("full-ratio shsa equals a one-head mhsa with transplanted weights") {
  Rng rng(34);
  const int C = 12, d_qk = 7;
  CHECK(partial_channels(1.0, C) == C);
  ShsaF shsa = ShsaF::make(C, C, d_qk, rng);
  MhsaF mhsa = MhsaF::make(C, 1, d_qk, C, rng);

  // Same layer norm; the matmul weights are the conv weights transposed.
  mhsa.pre_norm.gamma = shsa.pre_norm.gamma.detached();
  mhsa.pre_norm.beta = shsa.pre_norm.beta.detached();
  auto transplant = [&](const Tensor& conv_w, Tensor& mat_w, int rows, int cols) {
    // conv_w is [rows, cols, 1, 1]; mat_w wants [cols, rows].
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        mat_w.at(static_cast<std::size_t>(c) * rows + r) =
            conv_w.at(static_cast<std::size_t>(r) * cols + c);
      }
    }
  };
  transplant(shsa.wq.w, mhsa.wq, d_qk, C);
  transplant(shsa.wk.w, mhsa.wk, d_qk, C);
  transplant(shsa.wv.w, mhsa.wv, C, C);
  transplant(shsa.wo.w, mhsa.wo, C, C);

  Tensor x = rand_tensor({2, C, 2, 2}, rng);
  NoGradGuard ng;
  CHECK(max_abs_diff(shsa.forward(x), mhsa.forward(x)) < 1e-5);
}

TEST_CASE("mhsa head mask zeroes exactly the masked head's contribution") {
  Rng rng(35);
  const int C = 12;
  MhsaF layer = MhsaF::make(C, 2, 4, 6, rng);
  Tensor x = rand_tensor({1, C, 2, 2}, rng);
  NoGradGuard ng;

  Tensor base = layer.forward(x);
  layer.mask = {1, 0};
  Tensor head0 = layer.forward(x);
  layer.mask = {0, 1};
  Tensor head1 = layer.forward(x);
  layer.mask = {1, 1};
  Tensor again = layer.forward(x);

  // The all-ones mask multiplies by exactly 1.0, so a remasked forward is
  // bit-identical, and the head outputs sum to the baseline before wo, which
  // is linear, so the projected outputs sum too.
  CHECK(testutil::bit_equal(base, again));
  Tensor sum = add(head0, head1);
  CHECK(max_abs_diff(base, sum) < 1e-5);

  layer.mask = {1, 1, 1};
  CHECK_THROWS_AS(layer.forward(x), std::invalid_argument);
  layer.mask = {1, 2};
  CHECK_THROWS_AS(layer.forward(x), std::invalid_argument);
}

TEST_CASE("attention maps are row-stochastic with the declared shape") {
  Rng rng(36);
  ShsaF shsa = ShsaF::make(10, 3, 8, rng);
  MhsaF mhsa = MhsaF::make(12, 3, 4, 4, rng);
  Tensor xs = rand_tensor({2, 10, 2, 2}, rng);
  Tensor xm = rand_tensor({2, 12, 2, 2}, rng);

  Tensor ms = attention_maps(xs, shsa);
  Tensor mm = attention_maps(xm, mhsa);
  CHECK(ms.shape == std::vector<int>{2, 1, 4, 4});
  CHECK(mm.shape == std::vector<int>{2, 3, 4, 4});
  for (const Tensor* m : {&ms, &mm}) {
    const int rows = static_cast<int>(m->numel()) / m->extent(3);
    for (int r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (int j = 0; j < m->extent(3); ++j) {
        const float e = m->at(static_cast<std::size_t>(r) * m->extent(3) + j);
        CHECK(e >= 0.0f);
        sum += e;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("conv-bn folding preserves eval outputs after training updates") {
  Rng rng(37);
  ConvBNF layer = ConvBNF::make(3, 5, 3, 1, 1, 1, rng);
  // Push a few training batches through so the running stats are non-trivial.
  for (int i = 0; i < 3; ++i) {
    Tensor warm = rand_tensor({4, 3, 6, 6}, rng);
    NoGradGuard ng;
    layer.forward(warm, true);
  }
  Tensor x = rand_tensor({2, 3, 6, 6}, rng);
  NoGradGuard ng;
  Tensor before = layer.forward(x, false);
  layer.fold_bn();
  CHECK(layer.fused);
  Tensor after = layer.forward(x, false);
  CHECK(max_abs_diff(before, after) < 1e-5);
  CHECK_THROWS_AS(layer.fold_bn(), std::logic_error);
}

TEST_CASE("ffn expands to twice the width and comes back") {
  Rng rng(38);
  FfnLayer<float> ffn = FfnLayer<float>::make(6, rng);
  CHECK(ffn.expand.conv.w.extent(0) == 12);
  CHECK(ffn.project.conv.w.extent(0) == 6);
  Tensor x = rand_tensor({2, 6, 3, 3}, rng);
  NoGradGuard ng;
  CHECK(ffn.forward(x, false).shape == x.shape);
}

TEST_CASE("identical seeds build identical layers") {
  Rng a(39), b(39);
  ShsaF la = ShsaF::make(10, 3, 8, a);
  ShsaF lb = ShsaF::make(10, 3, 8, b);
  CHECK(testutil::bit_equal(la.wq.w, lb.wq.w));
  CHECK(testutil::bit_equal(la.wo.w, lb.wo.w));
  Rng c(40);
  ShsaF lc = ShsaF::make(10, 3, 8, c);
  CHECK_FALSE(testutil::bit_equal(la.wq.w, lc.wq.w));
}

TEST_CASE("comparative single-head designs keep the map width") {
  Rng rng(41);
  BottleneckAttnLayer<float> bott = BottleneckAttnLayer<float>::make(12, 4, 8, rng);
  ShsaF full = make_fullchannel_attn<float>(12, 8, rng);
  Tensor x = rand_tensor({1, 12, 2, 2}, rng);
  NoGradGuard ng;
  CHECK(bott.forward(x).shape == x.shape);
  CHECK(full.pdim == 12);
  CHECK(full.forward(x).shape == x.shape);
}

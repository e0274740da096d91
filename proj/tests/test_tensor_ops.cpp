#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <stdexcept>

#include "shvit/gradcheck.hpp"
#include "shvit/ops.hpp"
#include "shvit/rng.hpp"
#include "shvit/tensor.hpp"
#include "test_util.hpp"

using namespace shvit;
using testutil::max_abs_diff;
using testutil::rand_tensor;
using testutil::to_arr;

TEST_CASE("tensor construction and accessors") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim() == 2);
  CHECK(t.extent(1) == 3);
  CHECK(t.at(4) == 5.0f);
  CHECK_THROWS_AS(Tensor({2, 3}, {1, 2, 3}), std::invalid_argument);

  Tensor z = Tensor::zeros({4}, true);
  CHECK(z.requires_grad);
  CHECK(z.at(3) == 0.0f);
  Tensor f = Tensor::full({2, 2}, 7.0f);
  CHECK(f.at(0) == 7.0f);
  CHECK(Tensor::scalar(3.0f).numel() == 1);
}

TEST_CASE("non-finite outputs are rejected at the producing op") {
  Tensor big = Tensor::full({2}, 3e38f);
  CHECK_THROWS_AS(add(big, big), std::runtime_error);
  CHECK_THROWS_AS(scale(big, 10.0f), std::runtime_error);
}

TEST_CASE("conv2d matches the loop oracle") {
  Rng rng(11);
  struct Case {
    std::vector<int> xs, ws;
    int stride, pad, groups;
    bool bias;
  };
  const std::vector<Case> cases = {
      {{2, 3, 5, 5}, {4, 3, 3, 3}, 1, 1, 1, true},
      {{1, 3, 7, 7}, {2, 3, 3, 3}, 2, 1, 1, false},
      {{2, 4, 4, 4}, {6, 2, 3, 3}, 1, 1, 2, true},
      {{1, 6, 5, 5}, {6, 1, 3, 3}, 2, 1, 6, false},
      {{2, 5, 3, 3}, {7, 5, 1, 1}, 1, 0, 1, true},
  };
  for (const auto& c : cases) {
    Tensor x = rand_tensor(c.xs, rng);
    Tensor w = rand_tensor(c.ws, rng);
    Tensor b = rand_tensor({c.ws[0]}, rng);
    Tensor got = conv2d(x, w, c.bias ? &b : nullptr, c.stride, c.pad, c.groups);
    std::vector<double> bv(b.ptr(), b.ptr() + b.numel());
    oracle::Arr want = oracle::conv2d(to_arr(x), to_arr(w), c.bias ? &bv : nullptr, c.stride,
                                      c.pad, c.groups);
    CHECK(got.shape == want.shape);
    CHECK(max_abs_diff(got, want) < 1e-4);
  }
}

TEST_CASE("conv2d output extents use floor arithmetic") {
  Rng rng(12);
  Tensor x = rand_tensor({1, 1, 5, 5}, rng);
  Tensor w = rand_tensor({1, 1, 3, 3}, rng);
  Tensor y = conv2d<float>(x, w, nullptr, 2, 0, 1);
  CHECK(y.extent(2) == 2);  // (5 - 3) / 2 + 1
  CHECK(y.extent(3) == 2);
}

TEST_CASE("matmul modes match the oracle") {
  Rng rng(13);
  const int B = 2, M = 3, K = 4, P = 5;

  Tensor a2 = rand_tensor({M, K}, rng);
  Tensor b2 = rand_tensor({K, P}, rng);
  Tensor nn2 = matmul(a2, b2);
  auto want2 = oracle::matmul(testutil::to_vec(a2), testutil::to_vec(b2), M, K, P);
  for (std::size_t i = 0; i < nn2.numel(); ++i) {
    CHECK(std::fabs(nn2.at(i) - want2[i]) < 1e-5);
  }

  // Batched modes against per-batch 2-D oracles with explicit transposes.
  Tensor a = rand_tensor({B, M, K}, rng);
  Tensor at = rand_tensor({B, K, M}, rng);
  Tensor b = rand_tensor({B, K, P}, rng);
  Tensor bt = rand_tensor({B, P, K}, rng);
  Tensor nn = matmul(a, b, MatMode::NN);
  Tensor tn = matmul(at, b, MatMode::TN);
  Tensor nt = matmul(a, bt, MatMode::NT);
  CHECK(nn.shape == std::vector<int>{B, M, P});
  CHECK(tn.shape == std::vector<int>{B, M, P});
  CHECK(nt.shape == std::vector<int>{B, M, P});
  for (int bi = 0; bi < B; ++bi) {
    std::vector<double> av(M * K), atv(M * K), bv(K * P), btv(K * P);
    for (int i = 0; i < M; ++i) {
      for (int t = 0; t < K; ++t) {
        av[static_cast<std::size_t>(i) * K + t] =
            a.at((static_cast<std::size_t>(bi) * M + i) * K + t);
        atv[static_cast<std::size_t>(i) * K + t] =
            at.at((static_cast<std::size_t>(bi) * K + t) * M + i);
      }
    }
    for (int t = 0; t < K; ++t) {
      for (int j = 0; j < P; ++j) {
        bv[static_cast<std::size_t>(t) * P + j] =
            b.at((static_cast<std::size_t>(bi) * K + t) * P + j);
        btv[static_cast<std::size_t>(t) * P + j] =
            bt.at((static_cast<std::size_t>(bi) * P + j) * K + t);
      }
    }
    auto wn = oracle::matmul(av, bv, M, K, P);
    auto wt = oracle::matmul(atv, bv, M, K, P);
    auto wx = oracle::matmul(av, btv, M, K, P);
    for (int i = 0; i < M * P; ++i) {
      const std::size_t o = static_cast<std::size_t>(bi) * M * P + i;
      CHECK(std::fabs(nn.at(o) - wn[static_cast<std::size_t>(i)]) < 1e-5);
      CHECK(std::fabs(tn.at(o) - wt[static_cast<std::size_t>(i)]) < 1e-5);
      CHECK(std::fabs(nt.at(o) - wx[static_cast<std::size_t>(i)]) < 1e-5);
    }
  }

  // 3-D x 2-D broadcasts the right operand across the batch.
  Tensor shared = matmul(a, b2);
  for (int bi = 0; bi < B; ++bi) {
    std::vector<double> av(M * K);
    for (int i = 0; i < M * K; ++i) {
      av[static_cast<std::size_t>(i)] = a.at(static_cast<std::size_t>(bi) * M * K + i);
    }
    auto want = oracle::matmul(av, testutil::to_vec(b2), M, K, P);
    for (int i = 0; i < M * P; ++i) {
      CHECK(std::fabs(shared.at(static_cast<std::size_t>(bi) * M * P + i) -
                      want[static_cast<std::size_t>(i)]) < 1e-5);
    }
  }

  CHECK_THROWS_AS(matmul(a2, rand_tensor({K + 1, P}, rng)), std::invalid_argument);
}

TEST_CASE("linear equals matmul plus bias") {
  Rng rng(14);
  Tensor x = rand_tensor({3, 4}, rng);
  Tensor w = rand_tensor({4, 2}, rng);
  Tensor b = rand_tensor({2}, rng);
  Tensor got = linear(x, w, &b);
  Tensor via = matmul(x, w);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      const std::size_t o = static_cast<std::size_t>(i) * 2 + j;
      CHECK(std::fabs(got.at(o) - (via.at(o) + b.at(static_cast<std::size_t>(j)))) < 1e-6);
    }
  }
}

TEST_CASE("softmax rows sum to one and shift invariance holds") {
  Rng rng(15);
  Tensor x = rand_tensor({2, 3, 5}, rng, -3.0f, 3.0f);
  Tensor y = softmax_lastdim(x);
  for (int r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (int j = 0; j < 5; ++j) sum += y.at(static_cast<std::size_t>(r) * 5 + j);
    CHECK(std::fabs(sum - 1.0) < 1e-6);
  }
  // Adding 100 already perturbs each float input by up to half an ulp of 100
  // (about 4e-6), so the comparison cannot be tighter than that.
  Tensor shifted = softmax_lastdim(add(x, Tensor::full(x.shape, 100.0f)));
  CHECK(max_abs_diff(y, shifted) < 1e-5);
}

TEST_CASE("elementwise and pooling ops") {
  Tensor x({1, 2, 2, 2}, {-1, 2, -3, 4, 5, -6, 7, -8});
  Tensor r = relu(x);
  CHECK(r.at(0) == 0.0f);
  CHECK(r.at(1) == 2.0f);
  Tensor s = scale(x, 0.5f);
  CHECK(s.at(3) == 2.0f);
  Tensor g = global_avg_pool(x);
  CHECK(g.shape == std::vector<int>{1, 2});
  CHECK(std::fabs(g.at(0) - 0.5) < 1e-6);   // (-1 + 2 - 3 + 4) / 4
  CHECK(std::fabs(g.at(1) + 0.5) < 1e-6);
  CHECK_THROWS_AS(add(x, Tensor::zeros({1, 2, 2, 1})), std::invalid_argument);
}

TEST_CASE("channel and lastdim splits invert their concats") {
  Rng rng(16);
  Tensor x = rand_tensor({2, 7, 3, 3}, rng);
  auto parts = split_channels(x, {3, 4});
  CHECK(parts[0].shape == std::vector<int>{2, 3, 3, 3});
  CHECK(parts[1].shape == std::vector<int>{2, 4, 3, 3});
  CHECK(testutil::bit_equal(concat_channels<float>(parts), x));
  CHECK_THROWS_AS(split_channels(x, {3, 3}), std::invalid_argument);

  Tensor t = rand_tensor({2, 3, 6}, rng);
  Tensor head = slice_lastdim(t, 0, 2);
  Tensor tail = slice_lastdim(t, 2, 4);
  CHECK(testutil::bit_equal(concat_lastdim<float>({head, tail}), t));
  CHECK_THROWS_AS(slice_lastdim(t, 5, 4), std::invalid_argument);
}

TEST_CASE("reshape and transpose_last2") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = reshape(x, {3, 2});
  CHECK(r.at(1) == 2.0f);  // element order preserved
  CHECK_THROWS_AS(reshape(x, {4, 2}), std::invalid_argument);
  Tensor t = transpose_last2(x);
  CHECK(t.shape == std::vector<int>{3, 2});
  CHECK(t.at(1) == 4.0f);
  CHECK(testutil::bit_equal(transpose_last2(t), x));
}

TEST_CASE("layer norms match the oracle") {
  Rng rng(17);
  Tensor x = rand_tensor({2, 5, 3, 3}, rng);
  Tensor gamma = rand_tensor({5}, rng, 0.5f, 1.5f);
  Tensor beta = rand_tensor({5}, rng);
  Tensor got = layer_norm_channels(x, gamma, beta, 1e-5f);
  oracle::Arr want = oracle::layer_norm_channels(to_arr(x), testutil::to_vec(gamma),
                                                 testutil::to_vec(beta), 1e-5);
  CHECK(max_abs_diff(got, want) < 1e-5);

  // The lastdim variant on token-major data must agree with the channels
  // variant on the equivalent map layout.
  Tensor xt = rand_tensor({2, 4, 5}, rng);
  Tensor ld = layer_norm_lastdim(xt, gamma, beta, 1e-5f);
  Tensor as_map = reshape(transpose_last2(xt), {2, 5, 4, 1});
  Tensor ch = layer_norm_channels(as_map, gamma, beta, 1e-5f);
  Tensor back = transpose_last2(reshape(ch, {2, 5, 4}));
  CHECK(max_abs_diff(ld, back) < 1e-6);
}

TEST_CASE("batch norm statistics and running updates") {
  Rng rng(18);
  Tensor x = rand_tensor({4, 3, 2, 2}, rng, -2.0f, 2.0f);
  Tensor gamma = Tensor::full({3}, 1.0f, true);
  Tensor beta = Tensor::zeros({3}, true);
  Tensor rm = Tensor::zeros({3});
  Tensor rv = Tensor::full({3}, 1.0f);

  Tensor y = batch_norm(x, gamma, beta, rm, rv, 1e-5f, true);
  const int per_channel = 4 * 2 * 2;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0, bmean = 0.0;
    for (int n = 0; n < 4; ++n) {
      for (int p = 0; p < 4; ++p) {
        const std::size_t i = (static_cast<std::size_t>(n) * 3 + c) * 4 + p;
        mean += y.at(i);
        var += static_cast<double>(y.at(i)) * y.at(i);
        bmean += x.at(i);
      }
    }
    mean /= per_channel;
    var = var / per_channel - mean * mean;
    bmean /= per_channel;
    CHECK(std::fabs(mean) < 1e-5);
    CHECK(std::fabs(var - 1.0) < 1e-3);
    // Momentum 0.1 pulls the zero-initialized running mean toward the batch.
    CHECK(std::fabs(rm.at(static_cast<std::size_t>(c)) - 0.1 * bmean) < 1e-5);
  }

  // Eval mode applies the provided statistics verbatim.
  Tensor rm2({3}, {0.5f, -0.5f, 0.0f});
  Tensor rv2({3}, {4.0f, 1.0f, 0.25f});
  Tensor ye = batch_norm(x, gamma, beta, rm2, rv2, 0.0f, false);
  const std::size_t i0 = x.idx4(1, 0, 1, 1);
  CHECK(std::fabs(ye.at(i0) - (x.at(i0) - 0.5) / 2.0) < 1e-5);
}

TEST_CASE("cross entropy matches the oracle and the uniform case") {
  Rng rng(19);
  Tensor z = rand_tensor({3, 5}, rng, -2.0f, 2.0f);
  std::vector<int> labels{2, 0, 4};
  Tensor loss = cross_entropy(z, labels);
  CHECK(loss.numel() == 1);
  CHECK(std::fabs(loss.at(0) - oracle::cross_entropy(testutil::to_vec(z), 3, 5, labels)) < 1e-5);

  Tensor uniform = Tensor::zeros({2, 7});
  Tensor lu = cross_entropy(uniform, {3, 6});
  CHECK(std::fabs(lu.at(0) - std::log(7.0)) < 1e-6);
  CHECK_THROWS_AS(cross_entropy(z, std::vector<int>{0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(z, std::vector<int>{0, 1, 9}), std::invalid_argument);
}

TEST_CASE("autograd accumulates through reuse and frees the graph") {
  Tensor x({2}, {1.0f, 2.0f}, true);
  Tensor y = add(x, x);           // fan-out: dL/dx gets two contributions
  Tensor s = sum_all(scale(y, 3.0f));
  backward(s);
  CHECK(x.gptr()[0] == doctest::Approx(6.0));
  CHECK(x.gptr()[1] == doctest::Approx(6.0));
  CHECK_THROWS_AS(backward(s), std::runtime_error);

  // Gradients accumulate across separate backward passes until zeroed.
  Tensor s2 = sum_all(x);
  backward(s2);
  CHECK(x.gptr()[0] == doctest::Approx(7.0));
  x.zero_grad();
  CHECK(x.gptr()[0] == 0.0f);
}

TEST_CASE("diamond-shaped graphs accumulate both paths") {
  Tensor x({1}, {3.0f}, true);
  Tensor a = scale(x, 2.0f);
  Tensor b = scale(x, 5.0f);
  Tensor s = sum_all(add(a, b));
  backward(s);
  CHECK(x.gptr()[0] == doctest::Approx(7.0));
}

TEST_CASE("no-grad mode records no graph") {
  Tensor x({2}, {1.0f, 2.0f}, true);
  NoGradGuard ng;
  Tensor y = add(x, x);
  CHECK_FALSE(y.requires_grad);
  CHECK(y.node == nullptr);
}

TEST_CASE("primitive gradient suite passes at the acceptance tolerance") {
  GradCheckOptions opt;  // eps 1e-3, tol 1e-6
  for (const auto& c : run_primitive_gradchecks(5, opt)) {
    INFO(c.name, " worst ", c.report.worst_param, " rel ", c.report.max_rel_err);
    CHECK(c.report.passed);
  }
}

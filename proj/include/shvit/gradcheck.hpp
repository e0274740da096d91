#pragma once

// Finite-difference gradient verification. Everything here runs in double;
// float arithmetic would drown the comparison in rounding noise.

#include <functional>
#include <string>
#include <vector>

#include "shvit/tensor.hpp"

namespace shvit {

using DTensor = TensorT<double>;

struct GradCheckReport {
  // max_j |analytic_j - numeric_j| / max(1, ||analytic||_inf, ||numeric||_inf)
  // per parameter, worst over parameters.
  double max_rel_err = 0.0;
  std::string worst_param;
  bool passed = false;
  // Coordinates where the difference quotient failed its own consistency
  // probe and was excluded from the comparison (see filter_kinks).
  int skipped = 0;
};

struct GradCheckOptions {
  double eps = 1e-3;
  double tol = 1e-6;
  // Whole-model check only: compare the quotient at eps against eps/2 and
  // drop coordinates where the two disagree. A central difference whose
  // +/-eps interval straddles a relu kink estimates no derivative at all;
  // the probe tests the estimator against itself, never against the
  // analytic value, so it cannot mask a backward-pass bug, only an invalid
  // oracle point.
  bool filter_kinks = false;
};

// Scalar function of a parameter pack; must read the pack fresh every call.
using ScalarFn = std::function<double(const std::vector<DTensor>&)>;

// Central differences (f(p + eps e_j) - f(p - eps e_j)) / (2 eps) for every
// element of every parameter. Perturbs deep copies; params are untouched.
std::vector<DTensor> finite_diff_grad(const ScalarFn& fn, const std::vector<DTensor>& params,
                                      double eps);

// Deep-copies params with gradient tracking on, runs build_loss once under
// autograd, then compares the analytic gradients against finite differences
// of the same closure evaluated with tracking off.
GradCheckReport grad_check(const std::function<DTensor(std::vector<DTensor>&)>& build_loss,
                           const std::vector<DTensor>& params,
                           const std::vector<std::string>& names,
                           const GradCheckOptions& opt = {});

struct PrimitiveCheck {
  std::string name;
  GradCheckReport report;
};

// One gradient check per differentiable primitive, inputs drawn from seed.
std::vector<PrimitiveCheck> run_primitive_gradchecks(std::uint64_t seed,
                                                     const GradCheckOptions& opt = {});

// Whole tiny-model check: one analytic backward through the inference path,
// then finite differences at `samples_per_tensor` coordinates of every
// trainable tensor (all coordinates when a tensor is smaller than that).
// Parameters are nudged off the fresh-init point first; see the source for
// why init is degenerate for this comparison.
GradCheckReport model_gradcheck(std::uint64_t seed, int samples_per_tensor,
                                const GradCheckOptions& opt = {});

}  // namespace shvit

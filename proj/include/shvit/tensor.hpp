#pragma once

// Dense 1-4D tensors (canonical N,C,H,W order) with reverse-mode autodiff.
// float is the deployment scalar; the double instantiation backs the
// finite-difference gradient oracle ("shadow mode").

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace shvit {

template <typename S>
struct TensorT;

// One recorded autograd edge: the op's inputs plus a closure that scatters
// the output gradient back into them.
template <typename S>
struct NodeT {
  std::vector<TensorT<S>> parents;
  std::function<void(const TensorT<S>&)> backprop;
  bool consumed = false;
};

template <typename S>
struct TensorT {
  std::vector<int> shape;
  std::shared_ptr<std::vector<S>> data;
  std::shared_ptr<std::vector<S>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::shared_ptr<NodeT<S>> node;

  TensorT() = default;
  TensorT(std::vector<int> shape_, std::vector<S> values, bool rg = false);

  static TensorT zeros(const std::vector<int>& shape, bool rg = false);
  static TensorT full(const std::vector<int>& shape, S value, bool rg = false);
  static TensorT scalar(S value, bool rg = false);

  bool defined() const { return static_cast<bool>(data); }
  int dim() const { return static_cast<int>(shape.size()); }
  std::size_t numel() const { return data ? data->size() : 0; }
  int extent(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }
  S* gptr() { return grad->data(); }
  const S* gptr() const { return grad->data(); }

  S& at(std::size_t i) { return (*data)[i]; }
  S at(std::size_t i) const { return (*data)[i]; }

  // Flat index for a 4-D tensor.
  std::size_t idx4(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
  }

  void zero_grad();

  // Same data, no graph edge, no gradient tracking.
  TensorT detached() const;
};

using Tensor = TensorT<float>;

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
bool same_shape(const std::vector<int>& a, const std::vector<int>& b);

// Throws if the tensor holds a NaN or Inf. Every primitive op calls this on
// its output so non-finite values surface at the op that produced them.
template <typename S>
void check_finite(const TensorT<S>& t, const char* op);

// ---------------------------------------------------------------------------
// Grad mode
// ---------------------------------------------------------------------------

bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename S>
bool track_grad(const TensorT<S>& t) {
  return grad_enabled() && t.requires_grad;
}

// Reverse-mode accumulation from a scalar loss. Populates the grad buffers of
// every requires_grad tensor reachable from `loss`, then frees the recorded
// graph; a second call without a new forward throws.
template <typename S>
void backward(TensorT<S>& loss);

template <typename From, typename To>
TensorT<To> tensor_cast(const TensorT<From>& t);

}  // namespace shvit

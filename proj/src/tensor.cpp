#include "shvit/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace shvit {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) {
      throw std::invalid_argument("tensor shape has non-positive extent " + std::to_string(e));
    }
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool same_shape(const std::vector<int>& a, const std::vector<int>& b) { return a == b; }

template <typename S>
TensorT<S>::TensorT(std::vector<int> shape_, std::vector<S> values, bool rg)
    : shape(std::move(shape_)), requires_grad(rg) {
  std::size_t n = shape_numel(shape);
  if (values.size() != n) {
    throw std::invalid_argument("tensor data size " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  data = std::make_shared<std::vector<S>>(std::move(values));
  if (rg) {
    grad = std::make_shared<std::vector<S>>(n, S(0));
  }
}

template <typename S>
TensorT<S> TensorT<S>::zeros(const std::vector<int>& shape, bool rg) {
  return TensorT(shape, std::vector<S>(shape_numel(shape), S(0)), rg);
}

template <typename S>
TensorT<S> TensorT<S>::full(const std::vector<int>& shape, S value, bool rg) {
  return TensorT(shape, std::vector<S>(shape_numel(shape), value), rg);
}

template <typename S>
TensorT<S> TensorT<S>::scalar(S value, bool rg) {
  return TensorT({1}, std::vector<S>{value}, rg);
}

template <typename S>
void TensorT<S>::zero_grad() {
  if (grad) {
    std::fill(grad->begin(), grad->end(), S(0));
  }
}

template <typename S>
TensorT<S> TensorT<S>::detached() const {
  TensorT out;
  out.shape = shape;
  out.data = data;
  return out;
}

template <typename S>
void check_finite(const TensorT<S>& t, const char* op) {
  const auto& v = *t.data;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw std::runtime_error(std::string(op) + " produced non-finite value at flat index " +
                               std::to_string(i));
    }
  }
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

template <typename S>
void backward(TensorT<S>& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward expects a scalar loss, got shape " +
                                shape_str(loss.shape));
  }
  if (!loss.requires_grad) {
    throw std::runtime_error("backward: loss does not require grad");
  }
  if (loss.node && loss.node->consumed) {
    throw std::runtime_error("backward: autograd graph already consumed");
  }

  // Postorder DFS over recorded nodes; reversing it puts every tensor before
  // the tensors it was computed from, so each grad buffer is complete before
  // its node scatters it.
  std::vector<TensorT<S>> order;
  std::unordered_set<NodeT<S>*> seen;
  struct Frame {
    TensorT<S> t;
    std::size_t next_parent = 0;
  };
  std::vector<Frame> stack;
  if (loss.node) {
    seen.insert(loss.node.get());
    stack.push_back({loss, 0});
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    auto& parents = f.t.node->parents;
    if (f.next_parent < parents.size()) {
      TensorT<S>& p = parents[f.next_parent++];
      if (p.node && !seen.count(p.node.get())) {
        seen.insert(p.node.get());
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  if (!loss.grad) {
    loss.grad = std::make_shared<std::vector<S>>(1, S(0));
  }
  (*loss.grad)[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<S>* node = it->node.get();
    node->backprop(*it);
    node->consumed = true;
    node->backprop = nullptr;
    node->parents.clear();
  }
}

template <typename From, typename To>
TensorT<To> tensor_cast(const TensorT<From>& t) {
  std::vector<To> v(t.numel());
  const From* src = t.ptr();
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = static_cast<To>(src[i]);
  }
  return TensorT<To>(t.shape, std::move(v), t.requires_grad);
}

template struct NodeT<float>;
template struct NodeT<double>;
template struct TensorT<float>;
template struct TensorT<double>;
template void check_finite<float>(const TensorT<float>&, const char*);
template void check_finite<double>(const TensorT<double>&, const char*);
template void backward<float>(TensorT<float>&);
template void backward<double>(TensorT<double>&);
template TensorT<double> tensor_cast<float, double>(const TensorT<float>&);
template TensorT<float> tensor_cast<double, float>(const TensorT<double>&);

}  // namespace shvit

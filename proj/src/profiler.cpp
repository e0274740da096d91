#include "shvit/profiler.hpp"

#include <chrono>
#include <stdexcept>

namespace shvit {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::conv2d: return "conv2d";
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::softmax: return "softmax";
    case OpKind::relu: return "relu";
    case OpKind::add: return "add";
    case OpKind::scale: return "scale";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::split: return "split";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::sum_reduce: return "sum_reduce";
    case OpKind::kCount: break;
  }
  throw std::logic_error("op_name: bad kind");
}

OpCategory op_category(OpKind k) {
  switch (k) {
    case OpKind::conv2d:
    case OpKind::matmul:
    case OpKind::linear:
      return OpCategory::compute;
    default:
      return OpCategory::memory_bound;
  }
}

bool op_is_data_movement(OpKind k) {
  switch (k) {
    case OpKind::reshape:
    case OpKind::transpose:
    case OpKind::split:
    case OpKind::slice:
    case OpKind::concat:
      return true;
    default:
      return false;
  }
}

bool op_is_normalization(OpKind k) {
  return k == OpKind::layer_norm || k == OpKind::batch_norm;
}

void Collector::record(OpKind kind, std::uint64_t ns, std::uint64_t macs, std::uint64_t mem) {
  OpRecord r{1, ns, macs, mem};
  by_kind_[static_cast<std::size_t>(kind)].merge(r);
  if (!scope_stack_.empty()) {
    auto it = scope_index_.find(scope_path_);
    std::size_t slot;
    if (it == scope_index_.end()) {
      slot = by_scope_.size();
      by_scope_.emplace_back(scope_path_, OpRecord{});
      scope_index_.emplace(scope_path_, slot);
    } else {
      slot = it->second;
    }
    by_scope_[slot].second.merge(r);
  }
}

void Collector::push_scope(const std::string& name) {
  scope_stack_.push_back(name);
  if (scope_path_.empty()) {
    scope_path_ = name;
  } else {
    scope_path_ += '.';
    scope_path_ += name;
  }
}

void Collector::pop_scope() {
  if (scope_stack_.empty()) {
    throw std::logic_error("collector scope underflow");
  }
  std::size_t tail = scope_stack_.back().size();
  scope_stack_.pop_back();
  if (scope_stack_.empty()) {
    scope_path_.clear();
  } else {
    scope_path_.resize(scope_path_.size() - tail - 1);
  }
}

std::uint64_t Collector::total_calls() const {
  std::uint64_t n = 0;
  for (const auto& r : by_kind_) n += r.calls;
  return n;
}

std::uint64_t Collector::total_ns() const {
  std::uint64_t n = 0;
  for (const auto& r : by_kind_) n += r.ns;
  return n;
}

std::uint64_t Collector::total_macs() const {
  std::uint64_t n = 0;
  for (const auto& r : by_kind_) n += r.macs;
  return n;
}

std::uint64_t Collector::total_mem_access() const {
  std::uint64_t n = 0;
  for (const auto& r : by_kind_) n += r.mem_access;
  return n;
}

namespace {
thread_local Collector* g_collector = nullptr;
}

Collector* current_collector() { return g_collector; }

CollectorScope::CollectorScope(Collector* c) : prev_(g_collector) { g_collector = c; }
CollectorScope::~CollectorScope() { g_collector = prev_; }

LayerScope::LayerScope(const std::string& name) : active_(g_collector != nullptr) {
  if (active_) {
    g_collector->push_scope(name);
  }
}

LayerScope::~LayerScope() {
  if (active_) {
    g_collector->pop_scope();
  }
}

OpTimer::OpTimer(OpKind kind) : kind_(kind), collector_(g_collector) {
  if (collector_ && collector_->time_ops()) {
    t0_ = monotonic_ns();
  }
}

void OpTimer::finish(std::uint64_t macs, std::uint64_t mem_access) {
  if (!collector_) {
    return;
  }
  std::uint64_t ns = 0;
  if (collector_->time_ops()) {
    ns = monotonic_ns() - t0_;
  }
  collector_->record(kind_, ns, macs, mem_access);
}

std::uint64_t monotonic_ns() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

}  // namespace shvit

#pragma once

// Per-primitive instrumentation. Every op kernel reports (kind, ns, MACs,
// memory accesses) to the active collector, attributed to the current layer
// scope. With no collector installed the hooks are a single pointer test.
//
// The category table is fixed, not measured: data movement and normalization
// are memory-bound, heavy arithmetic is compute-bound.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace shvit {

enum class OpKind {
  conv2d,
  matmul,
  linear,
  softmax,
  relu,
  add,
  scale,
  global_avg_pool,
  reshape,
  transpose,
  split,
  slice,
  concat,
  layer_norm,
  batch_norm,
  cross_entropy,
  sum_reduce,
  kCount
};

enum class OpCategory { compute, memory_bound };

const char* op_name(OpKind k);
OpCategory op_category(OpKind k);

// reshape/transpose/split/slice/concat
bool op_is_data_movement(OpKind k);
// layer_norm/batch_norm
bool op_is_normalization(OpKind k);

struct OpRecord {
  std::uint64_t calls = 0;
  std::uint64_t ns = 0;
  std::uint64_t macs = 0;
  std::uint64_t mem_access = 0;

  void merge(const OpRecord& o) {
    calls += o.calls;
    ns += o.ns;
    macs += o.macs;
    mem_access += o.mem_access;
  }
};

class Collector {
 public:
  explicit Collector(bool time_ops = true) : time_ops_(time_ops) {}

  bool time_ops() const { return time_ops_; }

  void record(OpKind kind, std::uint64_t ns, std::uint64_t macs, std::uint64_t mem);

  void push_scope(const std::string& name);
  void pop_scope();

  const std::array<OpRecord, static_cast<std::size_t>(OpKind::kCount)>& by_kind() const {
    return by_kind_;
  }
  // Insertion-ordered per-layer aggregation.
  const std::vector<std::pair<std::string, OpRecord>>& by_scope() const { return by_scope_; }

  std::uint64_t total_calls() const;
  std::uint64_t total_ns() const;
  std::uint64_t total_macs() const;
  std::uint64_t total_mem_access() const;

 private:
  bool time_ops_;
  std::array<OpRecord, static_cast<std::size_t>(OpKind::kCount)> by_kind_{};
  std::vector<std::string> scope_stack_;
  std::string scope_path_;
  std::vector<std::pair<std::string, OpRecord>> by_scope_;
  std::map<std::string, std::size_t> scope_index_;
};

Collector* current_collector();

// RAII: installs a collector for the current thread.
struct CollectorScope {
  explicit CollectorScope(Collector* c);
  ~CollectorScope();
  CollectorScope(const CollectorScope&) = delete;
  CollectorScope& operator=(const CollectorScope&) = delete;

 private:
  Collector* prev_;
};

// RAII: labels ops run inside with a layer name ("stem.c1", "s2.b0.ffn", ...).
struct LayerScope {
  explicit LayerScope(const std::string& name);
  ~LayerScope();
  LayerScope(const LayerScope&) = delete;
  LayerScope& operator=(const LayerScope&) = delete;

 private:
  bool active_;
};

// Used inside op kernels around the computation.
class OpTimer {
 public:
  explicit OpTimer(OpKind kind);
  // Call after the output is computed; counts are the op's exact MAC and
  // memory-access totals (integer cost model).
  void finish(std::uint64_t macs, std::uint64_t mem_access);

 private:
  OpKind kind_;
  Collector* collector_;
  std::uint64_t t0_ = 0;
};

std::uint64_t monotonic_ns();

}  // namespace shvit

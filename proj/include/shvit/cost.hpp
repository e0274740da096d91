#pragma once

// Analytic cost models: parameter counts, multiply-accumulates, and the
// memory-access estimate 2*b*h*w*c + k^2*c^2 per layer.

#include <cstdint>
#include <string>
#include <vector>

#include "shvit/model.hpp"

namespace shvit {

struct CostEntry {
  std::string name;
  long long params = 0;
  long long macs = 0;
  long long mem_access = 0;
};

struct CostReport {
  std::vector<CostEntry> layers;
  long long total_params = 0;
  long long total_macs = 0;
  long long total_mem_access = 0;

  std::string to_text() const;
  std::string to_json_text() const;
};

struct LayerDims {
  long long b = 1, h = 1, w = 1, c = 1, k = 1;
};

// 2*b*h*w*c + k^2*c^2, exact integer arithmetic. Throws std::overflow_error
// if the result does not fit in a signed 64-bit integer.
long long memory_access_cost(const LayerDims& d);

// Per-layer params/MACs/memory traffic for one image at the given resolution,
// gathered from a counting (untimed) instrumented forward.
CostReport cost_report(const ModelConfig& cfg, int res);

struct MacroCompare {
  CostReport a, b;
  std::string name_a, name_b;
  double throughput_a = 0.0;  // images/s, 0 when throughput is skipped
  double throughput_b = 0.0;

  std::string to_text() const;
  std::string to_json_text() const;
};

// Side-by-side cost comparison of two configs at one resolution. When
// include_throughput is set, each model is also benchmarked.
MacroCompare macro_cost_compare(const ModelConfig& cfg_a, const ModelConfig& cfg_b, int res,
                                bool include_throughput);

}  // namespace shvit

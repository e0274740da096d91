#pragma once

// Throughput harness and per-op runtime breakdown.

#include <string>
#include <vector>

#include "shvit/model.hpp"
#include "shvit/profiler.hpp"

namespace shvit {

struct ThroughputResult {
  double images_per_s = 0.0;
  int batch = 0;
  int resolution = 0;
  int warmup_iters = 0;
  int measured_iters = 0;
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;

  std::string to_text() const;
  std::string to_json_text() const;
};

struct BenchOptions {
  int batch = 16;
  int warmup = 2;
  int iters = 9;
};

// Median-based images/s. Inputs are generated before the timed region; every
// iteration runs the same pre-built batch.
ThroughputResult bench_throughput(Model& model, const BenchOptions& opt);

struct ProfileEntry {
  std::string op;
  OpCategory category = OpCategory::memory_bound;
  uint64_t calls = 0;
  uint64_t total_ns = 0;
  double share_pct = 0.0;
};

struct ProfileReport {
  std::vector<ProfileEntry> entries;  // descending total_ns
  uint64_t wall_ns = 0;
  int batch = 0;
  int resolution = 0;

  uint64_t calls_in_category(OpCategory cat) const;
  std::string to_text() const;
  std::string to_json_text() const;
};

// Times every primitive call in one instrumented forward of a single batch.
ProfileReport profile_ops(Model& model, int batch);

struct MixerCompareRow {
  std::string mixer;
  long long params = 0;
  long long macs = 0;
  long long mem_access = 0;
  double images_per_s = 0.0;
};

struct MixerCompareReport {
  std::vector<MixerCompareRow> rows;  // none, shsa, mhsa

  std::string to_text() const;
  std::string to_json_text() const;
};

// Builds three twins of cfg with the mixer swapped (none / shsa / mhsa) and
// reports analytic costs plus measured throughput (medians over `runs`
// throughput measurements; runs=0 skips timing).
MixerCompareReport compare_token_mixers(const ModelConfig& cfg, const BenchOptions& opt, int runs);

}  // namespace shvit

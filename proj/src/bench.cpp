#include "shvit/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "shvit/cost.hpp"
#include "shvit/rng.hpp"

namespace shvit {

namespace {

Tensor bench_input(int batch, int res) {
  Rng rng(12345);
  std::vector<float> v(static_cast<std::size_t>(batch) * 3 * res * res);
  for (auto& e : v) e = static_cast<float>(rng.uniform(0.0, 1.0));
  return Tensor({batch, 3, res, res}, std::move(v));
}

// Nearest-rank percentile of an already sorted sample.
double percentile(const std::vector<double>& sorted, double pct) {
  const std::size_t n = sorted.size();
  std::size_t rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * n));
  if (rank == 0) rank = 1;
  if (rank > n) rank = n;
  return sorted[rank - 1];
}

}  // namespace

ThroughputResult bench_throughput(Model& model, const BenchOptions& opt) {
  if (opt.warmup < 1) {
    throw std::invalid_argument("bench_throughput: need at least 1 warmup iteration");
  }
  if (opt.iters < 3) {
    throw std::invalid_argument("bench_throughput: need at least 3 measured iterations");
  }
  if (opt.batch < 1) {
    throw std::invalid_argument("bench_throughput: batch must be positive");
  }

  const int res = model.cfg.input_resolution;
  Tensor x = bench_input(opt.batch, res);
  NoGradGuard ng;

  for (int i = 0; i < opt.warmup; ++i) model.forward(x);

  std::vector<double> ms(static_cast<std::size_t>(opt.iters));
  for (int i = 0; i < opt.iters; ++i) {
    const std::uint64_t t0 = monotonic_ns();
    model.forward(x);
    ms[static_cast<std::size_t>(i)] = (monotonic_ns() - t0) / 1e6;
  }
  std::sort(ms.begin(), ms.end());

  ThroughputResult r;
  r.batch = opt.batch;
  r.resolution = res;
  r.warmup_iters = opt.warmup;
  r.measured_iters = opt.iters;
  r.median_ms = percentile(ms, 50.0);
  r.p10_ms = percentile(ms, 10.0);
  r.p90_ms = percentile(ms, 90.0);
  r.images_per_s = opt.batch / (r.median_ms / 1000.0);
  return r;
}

std::string ThroughputResult::to_text() const {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof(line),
                "batch %d at %dx%d: %.1f images/s (median %.3f ms, p10 %.3f, p90 %.3f, %d warmup, "
                "%d measured)\n",
                batch, resolution, resolution, images_per_s, median_ms, p10_ms, p90_ms,
                warmup_iters, measured_iters);
  os << line;
  return os.str();
}

std::string ThroughputResult::to_json_text() const {
  nlohmann::json j;
  j["report_version"] = 1;
  j["images_per_s"] = images_per_s;
  j["batch"] = batch;
  j["resolution"] = resolution;
  j["warmup_iters"] = warmup_iters;
  j["measured_iters"] = measured_iters;
  j["median_ms"] = median_ms;
  j["p10_ms"] = p10_ms;
  j["p90_ms"] = p90_ms;
  return j.dump(2);
}

ProfileReport profile_ops(Model& model, int batch) {
  if (batch < 1) {
    throw std::invalid_argument("profile_ops: batch must be positive");
  }
  const int res = model.cfg.input_resolution;
  Tensor x = bench_input(batch, res);
  NoGradGuard ng;
  model.forward(x);  // warm caches and allocator before the timed pass

  Collector collector(true);
  std::uint64_t wall;
  {
    CollectorScope cs(&collector);
    const std::uint64_t t0 = monotonic_ns();
    model.forward(x);
    wall = monotonic_ns() - t0;
  }

  ProfileReport rep;
  rep.wall_ns = wall;
  rep.batch = batch;
  rep.resolution = res;
  std::uint64_t entry_total = 0;
  for (std::size_t k = 0; k < static_cast<std::size_t>(OpKind::kCount); ++k) {
    const OpRecord& rec = collector.by_kind()[k];
    if (rec.calls == 0) continue;
    ProfileEntry e;
    e.op = op_name(static_cast<OpKind>(k));
    e.category = op_category(static_cast<OpKind>(k));
    e.calls = rec.calls;
    e.total_ns = rec.ns;
    rep.entries.push_back(e);
    entry_total += rec.ns;
  }
  for (auto& e : rep.entries) {
    e.share_pct = entry_total ? 100.0 * e.total_ns / entry_total : 0.0;
  }
  std::sort(rep.entries.begin(), rep.entries.end(),
            [](const ProfileEntry& a, const ProfileEntry& b) { return a.total_ns > b.total_ns; });
  return rep;
}

uint64_t ProfileReport::calls_in_category(OpCategory cat) const {
  uint64_t calls = 0;
  for (const auto& e : entries) {
    if (e.category == cat) calls += e.calls;
  }
  return calls;
}

std::string ProfileReport::to_text() const {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof(line), "batch %d at %dx%d, wall %.3f ms\n", batch, resolution,
                resolution, wall_ns / 1e6);
  os << line;
  std::snprintf(line, sizeof(line), "%-14s %-12s %8s %12s %8s\n", "op", "category", "calls",
                "total_ms", "share");
  os << line;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof(line), "%-14s %-12s %8llu %12.3f %7.1f%%\n", e.op.c_str(),
                  e.category == OpCategory::compute ? "compute" : "memory-bound",
                  static_cast<unsigned long long>(e.calls), e.total_ns / 1e6, e.share_pct);
    os << line;
  }
  return os.str();
}

std::string ProfileReport::to_json_text() const {
  nlohmann::json j;
  j["report_version"] = 1;
  j["batch"] = batch;
  j["resolution"] = resolution;
  j["wall_ns"] = wall_ns;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    j["entries"].push_back(
        {{"op", e.op},
         {"category", e.category == OpCategory::compute ? "compute" : "memory_bound"},
         {"calls", e.calls},
         {"total_ns", e.total_ns},
         {"share_pct", e.share_pct}});
  }
  return j.dump(2);
}

MixerCompareReport compare_token_mixers(const ModelConfig& cfg, const BenchOptions& opt,
                                        int runs) {
  MixerCompareReport rep;
  const MixerKind kinds[3] = {MixerKind::none, MixerKind::shsa, MixerKind::mhsa};
  for (MixerKind kind : kinds) {
    ModelConfig twin = cfg;
    twin.mixer = kind;

    MixerCompareRow row;
    row.mixer = mixer_name(kind);
    const CostReport cost = cost_report(twin, twin.input_resolution);
    row.params = cost.total_params;
    row.macs = cost.total_macs;
    row.mem_access = cost.total_mem_access;

    if (runs > 0) {
      Rng rng(1);
      Model model = build_model<float>(twin, rng);
      std::vector<double> rates;
      for (int i = 0; i < runs; ++i) {
        rates.push_back(bench_throughput(model, opt).images_per_s);
      }
      std::sort(rates.begin(), rates.end());
      row.images_per_s = percentile(rates, 50.0);
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

std::string MixerCompareReport::to_text() const {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof(line), "%-8s %12s %14s %14s %12s\n", "mixer", "params", "macs",
                "mem_access", "images/s");
  os << line;
  for (const auto& r : rows) {
    if (r.images_per_s > 0.0) {
      std::snprintf(line, sizeof(line), "%-8s %12lld %14lld %14lld %12.1f\n", r.mixer.c_str(),
                    r.params, r.macs, r.mem_access, r.images_per_s);
    } else {
      std::snprintf(line, sizeof(line), "%-8s %12lld %14lld %14lld %12s\n", r.mixer.c_str(),
                    r.params, r.macs, r.mem_access, "-");
    }
    os << line;
  }
  return os.str();
}

std::string MixerCompareReport::to_json_text() const {
  nlohmann::json j;
  j["report_version"] = 1;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row = {{"mixer", r.mixer},
                          {"params", r.params},
                          {"macs", r.macs},
                          {"mem_access", r.mem_access}};
    if (r.images_per_s > 0.0) row["images_per_s"] = r.images_per_s;
    j["rows"].push_back(row);
  }
  return j.dump(2);
}

}  // namespace shvit

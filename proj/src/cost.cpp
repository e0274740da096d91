#include "shvit/cost.hpp"

#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "shvit/bench.hpp"
#include "shvit/ops.hpp"
#include "shvit/profiler.hpp"
#include "shvit/rng.hpp"

#include "json.hpp"

namespace shvit {

namespace {

using int128 = __int128;

long long checked_narrow(int128 v, const char* what) {
  if (v > static_cast<int128>(std::numeric_limits<long long>::max())) {
    throw std::overflow_error(std::string(what) + ": result exceeds 64-bit range");
  }
  return static_cast<long long>(v);
}

}  // namespace

long long memory_access_cost(const LayerDims& d) {
  if (d.b < 1 || d.h < 1 || d.w < 1 || d.c < 1 || d.k < 1) {
    throw std::invalid_argument("memory_access_cost: all dimensions must be >= 1");
  }
  const int128 feature = int128(2) * d.b * d.h * d.w * d.c;
  const int128 weights = int128(d.k) * d.k * d.c * d.c;
  return checked_narrow(feature + weights, "memory_access_cost");
}

CostReport cost_report(const ModelConfig& cfg, int res) {
  ModelConfig sized = cfg;
  sized.input_resolution = res;
  sized.validate();

  Rng rng(1);
  Model model = build_model<float>(sized, rng);

  Collector counts(false);
  {
    CollectorScope cs(&counts);
    NoGradGuard ng;
    Tensor x = Tensor::zeros({1, 3, res, res});
    model.forward(x);
  }

  CostReport rep;
  for (const auto& [scope, rec] : counts.by_scope()) {
    CostEntry e;
    e.name = scope;
    e.macs = static_cast<long long>(rec.macs);
    e.mem_access = static_cast<long long>(rec.mem_access);
    rep.layers.push_back(e);
  }
  model.visit_params([&rep](const std::string& name, Tensor& t, bool trainable) {
    if (!trainable) return;
    for (auto& e : rep.layers) {
      if (name.rfind(e.name + ".", 0) == 0) {
        e.params += static_cast<long long>(t.numel());
        return;
      }
    }
  });
  for (const auto& e : rep.layers) {
    rep.total_params += e.params;
    rep.total_macs += e.macs;
    rep.total_mem_access += e.mem_access;
  }
  return rep;
}

std::string CostReport::to_text() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-12s %12s %14s %14s\n", "layer", "params", "macs",
                "mem_access");
  os << line;
  for (const auto& e : layers) {
    std::snprintf(line, sizeof(line), "%-12s %12lld %14lld %14lld\n", e.name.c_str(), e.params,
                  e.macs, e.mem_access);
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-12s %12lld %14lld %14lld\n", "total", total_params,
                total_macs, total_mem_access);
  os << line;
  return os.str();
}

std::string CostReport::to_json_text() const {
  nlohmann::json j;
  j["report_version"] = 1;
  j["layers"] = nlohmann::json::array();
  for (const auto& e : layers) {
    j["layers"].push_back({{"name", e.name},
                           {"params", e.params},
                           {"macs", e.macs},
                           {"mem_access", e.mem_access}});
  }
  j["total_params"] = total_params;
  j["total_macs"] = total_macs;
  j["total_mem_access"] = total_mem_access;
  return j.dump(2);
}

MacroCompare macro_cost_compare(const ModelConfig& cfg_a, const ModelConfig& cfg_b, int res,
                                bool include_throughput) {
  MacroCompare cmp;
  cmp.name_a = std::to_string(cfg_a.stages.size()) + "-stage";
  cmp.name_b = std::to_string(cfg_b.stages.size()) + "-stage";
  cmp.a = cost_report(cfg_a, res);
  cmp.b = cost_report(cfg_b, res);

  if (include_throughput) {
    BenchOptions opt;
    opt.batch = 4;
    for (int side = 0; side < 2; ++side) {
      ModelConfig sized = side == 0 ? cfg_a : cfg_b;
      sized.input_resolution = res;
      Rng rng(1);
      Model model = build_model<float>(sized, rng);
      const ThroughputResult r = bench_throughput(model, opt);
      (side == 0 ? cmp.throughput_a : cmp.throughput_b) = r.images_per_s;
    }
  }
  return cmp;
}

std::string MacroCompare::to_text() const {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof(line), "%-12s %12s %14s %14s %12s\n", "config", "params", "macs",
                "mem_access", "images/s");
  os << line;
  const CostReport* reps[2] = {&a, &b};
  const std::string* names[2] = {&name_a, &name_b};
  const double tps[2] = {throughput_a, throughput_b};
  for (int i = 0; i < 2; ++i) {
    if (tps[i] > 0.0) {
      std::snprintf(line, sizeof(line), "%-12s %12lld %14lld %14lld %12.1f\n", names[i]->c_str(),
                    reps[i]->total_params, reps[i]->total_macs, reps[i]->total_mem_access, tps[i]);
    } else {
      std::snprintf(line, sizeof(line), "%-12s %12lld %14lld %14lld %12s\n", names[i]->c_str(),
                    reps[i]->total_params, reps[i]->total_macs, reps[i]->total_mem_access, "-");
    }
    os << line;
  }
  return os.str();
}

std::string MacroCompare::to_json_text() const {
  nlohmann::json j;
  j["report_version"] = 1;
  j["a"] = {{"name", name_a},
            {"total_params", a.total_params},
            {"total_macs", a.total_macs},
            {"total_mem_access", a.total_mem_access}};
  j["b"] = {{"name", name_b},
            {"total_params", b.total_params},
            {"total_macs", b.total_macs},
            {"total_mem_access", b.total_mem_access}};
  if (throughput_a > 0.0) j["a"]["images_per_s"] = throughput_a;
  if (throughput_b > 0.0) j["b"]["images_per_s"] = throughput_b;
  return j.dump(2);
}

}  // namespace shvit

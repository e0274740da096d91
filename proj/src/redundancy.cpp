#include "shvit/redundancy.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace shvit {

namespace {

// Flattened-map cosine in double; attention rows are non-negative, so a zero
// norm can only mean the map was never written.
double map_cosine(const float* a, const float* b, std::size_t n) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw std::invalid_argument("head_similarity: zero-norm attention map");
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::string mask_str(const std::vector<int>& mask) {
  std::string s = "[";
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(mask[i]);
  }
  return s + "]";
}

// Restores the layer's mask on scope exit so a failed evaluation cannot leave
// the model ablated.
struct MaskGuard {
  MhsaLayer<float>* layer;
  std::vector<int> saved;

  MaskGuard(MhsaLayer<float>* l, const std::vector<int>& mask) : layer(l), saved(l->mask) {
    layer->mask = mask;
  }
  ~MaskGuard() { layer->mask = saved; }
  MaskGuard(const MaskGuard&) = delete;
  MaskGuard& operator=(const MaskGuard&) = delete;
};

}  // namespace

HeadSimReport head_similarity(const Tensor& maps, const std::string& layer_id) {
  if (maps.dim() != 4) {
    throw std::invalid_argument("head_similarity: expected maps [N, heads, T, T], got " +
                                shape_str(maps.shape));
  }
  const int N = maps.extent(0), Nh = maps.extent(1);
  const std::size_t map_len = static_cast<std::size_t>(maps.extent(2)) * maps.extent(3);
  if (Nh < 2) {
    throw std::invalid_argument("head_similarity: need at least 2 heads, got " +
                                std::to_string(Nh));
  }

  HeadSimReport rep;
  rep.layer_id = layer_id;
  rep.heads = Nh;
  rep.samples = N;
  rep.pair_matrix.assign(static_cast<std::size_t>(Nh),
                         std::vector<double>(static_cast<std::size_t>(Nh), 0.0));

  const float* base = maps.ptr();
  for (int n = 0; n < N; ++n) {
    const float* sample = base + static_cast<std::size_t>(n) * Nh * map_len;
    for (int j = 0; j < Nh; ++j) {
      for (int k = j + 1; k < Nh; ++k) {
        const double c = map_cosine(sample + j * map_len, sample + k * map_len, map_len);
        rep.pair_matrix[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] += c;
        rep.pair_matrix[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] += c;
      }
    }
  }
  double total = 0.0;
  for (int j = 0; j < Nh; ++j) {
    for (int k = 0; k < Nh; ++k) {
      if (j == k) {
        rep.pair_matrix[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] = 1.0;
      } else {
        rep.pair_matrix[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] /= N;
        total += rep.pair_matrix[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
      }
    }
  }
  rep.average = total / (static_cast<double>(Nh) * (Nh - 1));
  return rep;
}

HeadSimReport head_similarity(Model& model, const std::string& layer_id,
                              const SyntheticDataset& data) {
  if (data.size() == 0) {
    throw std::invalid_argument("head_similarity: empty dataset");
  }
  if (model.find_mhsa(layer_id) == nullptr) {
    throw std::invalid_argument("head_similarity: '" + layer_id +
                                "' is not a multi-head attention layer");
  }

  NoGradGuard ng;
  Tensor all_maps;
  float* dst = nullptr;
  const int chunk = 32;
  for (int start = 0; start < data.size(); start += chunk) {
    const int n = std::min(chunk, data.size() - start);
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = data.batch_images(idx);

    ForwardOptions fo;
    fo.capture_layer = layer_id;
    model.forward(x, &fo);
    const Tensor& maps = fo.captured_attention;

    if (!all_maps.defined()) {
      std::vector<int> shape = maps.shape;
      shape[0] = data.size();
      all_maps = Tensor::zeros(shape);
      dst = all_maps.ptr();
    }
    const std::size_t len = maps.numel();
    std::copy(maps.ptr(), maps.ptr() + len, dst);
    dst += len;
  }
  return head_similarity(all_maps, layer_id);
}

EvalResult ablate_heads(Model& model, const std::string& layer_id, const std::vector<int>& mask,
                        const SyntheticDataset& data) {
  MhsaLayer<float>* layer = model.find_mhsa(layer_id);
  if (layer == nullptr) {
    throw std::invalid_argument("ablate_heads: '" + layer_id +
                                "' is not a multi-head attention layer");
  }
  if (mask.size() != static_cast<std::size_t>(layer->heads)) {
    throw std::invalid_argument("ablate_heads: mask length " + std::to_string(mask.size()) +
                                " != " + std::to_string(layer->heads) + " heads");
  }
  MaskGuard guard(layer, mask);
  return evaluate(model, data);
}

namespace {

AblationReport run_sweep(Model& model, const std::string& layer_id, const SyntheticDataset& data,
                         const std::string& sweep_name) {
  MhsaLayer<float>* layer = model.find_mhsa(layer_id);
  if (layer == nullptr) {
    throw std::invalid_argument("head sweep: '" + layer_id +
                                "' is not a multi-head attention layer");
  }
  const int Nh = layer->heads;
  const bool one_hot = sweep_name == "one-hot";

  AblationReport rep;
  rep.layer_id = layer_id;
  rep.sweep = sweep_name;
  const EvalResult base = evaluate(model, data);
  rep.baseline_accuracy = base.accuracy;
  rep.baseline_loss = base.mean_loss;

  for (int h = 0; h < Nh; ++h) {
    std::vector<int> mask(static_cast<std::size_t>(Nh), one_hot ? 0 : 1);
    mask[static_cast<std::size_t>(h)] = one_hot ? 1 : 0;
    const EvalResult r = ablate_heads(model, layer_id, mask, data);
    AblationEntry e;
    e.mask = mask;
    e.accuracy = r.accuracy;
    e.mean_loss = r.mean_loss;
    e.delta_acc = r.accuracy - base.accuracy;
    rep.entries.push_back(std::move(e));
  }
  rep.best_accuracy = rep.entries.front().accuracy;
  rep.best_mask = rep.entries.front().mask;
  for (const auto& e : rep.entries) {
    if (e.accuracy > rep.best_accuracy) {
      rep.best_accuracy = e.accuracy;
      rep.best_mask = e.mask;
    }
  }
  return rep;
}

}  // namespace

AblationReport best_single_head_sweep(Model& model, const std::string& layer_id,
                                      const SyntheticDataset& data) {
  return run_sweep(model, layer_id, data, "one-hot");
}

AblationReport leave_one_out_sweep(Model& model, const std::string& layer_id,
                                   const SyntheticDataset& data) {
  return run_sweep(model, layer_id, data, "leave-one-out");
}

std::string HeadSimReport::to_text() const {
  std::ostringstream os;
  char line[160];
  os << "layer " << layer_id << ": " << heads << " heads, " << samples << " samples\n";
  std::snprintf(line, sizeof(line), "mean pairwise cosine: %.6f\n", average);
  os << line << "pair matrix:\n";
  for (const auto& row : pair_matrix) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      std::snprintf(line, sizeof(line), "%s%8.4f", k ? " " : "", row[k]);
      os << line;
    }
    os << '\n';
  }
  return os.str();
}

std::string HeadSimReport::to_json_text() const {
  nlohmann::json j;
  j["report_version"] = 1;
  j["layer"] = layer_id;
  j["heads"] = heads;
  j["samples"] = samples;
  j["average"] = average;
  j["pair_matrix"] = pair_matrix;
  return j.dump(2);
}

std::string AblationReport::to_text() const {
  std::ostringstream os;
  char line[200];
  os << "layer " << layer_id << ", " << sweep << " sweep\n";
  std::snprintf(line, sizeof(line), "baseline: accuracy %.4f, loss %.4f\n", baseline_accuracy,
                baseline_loss);
  os << line;
  std::snprintf(line, sizeof(line), "%-16s %10s %10s %10s\n", "mask", "accuracy", "loss",
                "delta_acc");
  os << line;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof(line), "%-16s %10.4f %10.4f %+10.4f\n", mask_str(e.mask).c_str(),
                  e.accuracy, e.mean_loss, e.delta_acc);
    os << line;
  }
  std::snprintf(line, sizeof(line), "best: %s at accuracy %.4f\n", mask_str(best_mask).c_str(),
                best_accuracy);
  os << line;
  return os.str();
}

std::string AblationReport::to_json_text() const {
  nlohmann::json j;
  j["report_version"] = 1;
  j["layer"] = layer_id;
  j["sweep"] = sweep;
  j["baseline_accuracy"] = baseline_accuracy;
  j["baseline_loss"] = baseline_loss;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    j["entries"].push_back({{"mask", e.mask},
                            {"accuracy", e.accuracy},
                            {"mean_loss", e.mean_loss},
                            {"delta_acc", e.delta_acc}});
  }
  j["best_accuracy"] = best_accuracy;
  j["best_mask"] = best_mask;
  return j.dump(2);
}

}  // namespace shvit

#include "shvit/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "shvit/profiler.hpp"

namespace shvit {

const char* mixer_name(MixerKind kind) {
  switch (kind) {
    case MixerKind::none: return "none";
    case MixerKind::shsa: return "shsa";
    case MixerKind::mhsa: return "mhsa";
  }
  throw std::logic_error("mixer_name: bad kind");
}

MixerKind mixer_from_name(const std::string& name) {
  if (name == "none") return MixerKind::none;
  if (name == "shsa") return MixerKind::shsa;
  if (name == "mhsa") return MixerKind::mhsa;
  throw std::invalid_argument("unknown mixer '" + name + "' (expected none, shsa, or mhsa)");
}

int partial_channels(double ratio, int channels) {
  int cp = static_cast<int>(std::lround(ratio * channels));
  return std::max(1, std::min(channels, cp));
}

namespace {

int round_even(double x) {
  int half = static_cast<int>(std::lround(x / 2.0));
  return std::max(2, 2 * half);
}

// Per-head width for MHSA twins: the largest power of two that divides every
// attention stage's channel count, capped at 64.
int derived_head_dim(const ModelConfig& cfg) {
  std::vector<int> widths;
  for (const auto& s : cfg.stages) {
    if (s.use_attention) widths.push_back(s.channels);
  }
  if (widths.empty()) return 8;
  int dh = 1;
  while (dh * 2 <= 64) {
    bool ok = true;
    for (int w : widths) {
      if (w % (dh * 2) != 0) ok = false;
    }
    if (!ok) break;
    dh *= 2;
  }
  return dh;
}

}  // namespace

std::vector<int> ModelConfig::resolved_stem() const {
  if (!stem_channels.empty()) {
    return stem_channels;
  }
  const int c1 = stages.at(0).channels;
  return {round_even(c1 / 8.0), round_even(c1 / 4.0), round_even(c1 / 2.0), c1};
}

void ModelConfig::validate() const {
  if (input_resolution <= 0 || input_resolution % 16 != 0) {
    throw std::invalid_argument("config: input_resolution must be a positive multiple of 16");
  }
  if (num_classes < 2) {
    throw std::invalid_argument("config: num_classes must be at least 2");
  }
  if (stages.size() < 2 || stages.size() > 4) {
    throw std::invalid_argument("config: expected 2 to 4 stages, got " +
                                std::to_string(stages.size()));
  }
  int prev = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.channels <= 0 || s.blocks < 1) {
      throw std::invalid_argument("config: stage " + std::to_string(i + 1) +
                                  " needs positive channels and at least one block");
    }
    if (s.channels <= prev) {
      throw std::invalid_argument("config: stage channels must increase across stages");
    }
    prev = s.channels;
    if (i == 0 && s.use_attention) {
      throw std::invalid_argument("config: the first stage does not use attention");
    }
    if (s.partial_ratio <= 0.0 || s.partial_ratio > 1.0) {
      throw std::invalid_argument("config: partial_ratio must be in (0, 1]");
    }
    if (s.d_qk < 1) {
      throw std::invalid_argument("config: d_qk must be positive");
    }
  }
  if (!stem_channels.empty()) {
    if (stem_channels.size() != 4) {
      throw std::invalid_argument("config: stem_channels needs exactly 4 entries");
    }
    for (int c : stem_channels) {
      if (c <= 0) throw std::invalid_argument("config: stem channels must be positive");
    }
    if (stem_channels.back() != stages[0].channels) {
      throw std::invalid_argument("config: stem ladder must end at stage-1 channels");
    }
  }
  if (mixer == MixerKind::mhsa) {
    const int dv = mhsa_d_v > 0 ? mhsa_d_v : derived_head_dim(*this);
    for (const auto& s : stages) {
      if (s.use_attention && s.channels % dv != 0) {
        throw std::invalid_argument("config: mhsa head width " + std::to_string(dv) +
                                    " does not divide stage channels " +
                                    std::to_string(s.channels));
      }
    }
  }
}

ModelConfig ModelConfig::reference() {
  ModelConfig cfg;
  cfg.input_resolution = 224;
  cfg.num_classes = 1000;
  cfg.mixer = MixerKind::shsa;
  cfg.stages = {
      {128, 2, false, 1.0 / 4.67, 16},
      {256, 4, true, 1.0 / 4.67, 16},
      {384, 2, true, 1.0 / 4.67, 16},
  };
  return cfg;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig cfg;
  cfg.input_resolution = 32;
  cfg.num_classes = 4;
  cfg.mixer = MixerKind::shsa;
  cfg.stages = {
      {8, 1, false, 1.0 / 4.67, 16},
      {16, 1, true, 1.0 / 4.67, 16},
      {24, 1, true, 1.0 / 4.67, 16},
  };
  return cfg;
}

ModelConfig ModelConfig::named_or_file(const std::string& spec) {
  if (spec == "ref") return reference();
  if (spec == "tiny") return tiny();
  std::ifstream in(spec, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open config '" + spec + "' (not a file, not ref/tiny)");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("config_version", 0) != 1) {
    throw std::invalid_argument("config: expected object with config_version 1");
  }
  ModelConfig cfg;
  cfg.input_resolution = j.value("input_resolution", 224);
  cfg.num_classes = j.value("num_classes", 1000);
  cfg.mixer = mixer_from_name(j.value("mixer", std::string("shsa")));
  cfg.mhsa_d_qk = j.value("mhsa_d_qk", 0);
  cfg.mhsa_d_v = j.value("mhsa_d_v", 0);
  if (j.contains("stem_channels")) {
    cfg.stem_channels = j.at("stem_channels").get<std::vector<int>>();
  }
  if (!j.contains("stages") || !j.at("stages").is_array()) {
    throw std::invalid_argument("config: missing stages array");
  }
  cfg.stages.clear();
  std::size_t idx = 0;
  for (const auto& js : j.at("stages")) {
    StageSpec s;
    s.channels = js.value("channels", 0);
    s.blocks = js.value("blocks", 1);
    s.use_attention = js.value("use_attention", idx > 0);
    s.partial_ratio = js.value("partial_ratio", 1.0 / 4.67);
    s.d_qk = js.value("d_qk", 16);
    cfg.stages.push_back(s);
    ++idx;
  }
  cfg.validate();
  return cfg;
}

std::string ModelConfig::to_json_text() const {
  nlohmann::json j;
  j["config_version"] = 1;
  j["input_resolution"] = input_resolution;
  j["num_classes"] = num_classes;
  j["mixer"] = mixer_name(mixer);
  if (!stem_channels.empty()) {
    j["stem_channels"] = stem_channels;
  }
  if (mhsa_d_qk > 0) j["mhsa_d_qk"] = mhsa_d_qk;
  if (mhsa_d_v > 0) j["mhsa_d_v"] = mhsa_d_v;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : stages) {
    j["stages"].push_back({{"channels", s.channels},
                           {"blocks", s.blocks},
                           {"use_attention", s.use_attention},
                           {"partial_ratio", s.partial_ratio},
                           {"d_qk", s.d_qk}});
  }
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Block
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> BlockT<S>::forward(const TensorT<S>& x, bool training, TensorT<S>* attn_out) {
  TensorT<S> y = add(x, dw.forward(x, training));
  if (mixer == MixerKind::shsa) {
    y = add(y, shsa->forward(y, attn_out));
  } else if (mixer == MixerKind::mhsa) {
    y = add(y, mhsa->forward(y, attn_out));
  }
  return add(y, ffn.forward(y, training));
}

template <typename S>
void BlockT<S>::fold_bn() {
  dw.fold_bn();
  ffn.fold_bn();
}

template <typename S>
void BlockT<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  dw.visit_params(prefix + ".dw", fn);
  if (shsa) shsa->visit_params(prefix + ".attn", fn);
  if (mhsa) mhsa->visit_params(prefix + ".attn", fn);
  ffn.visit_params(prefix + ".ffn", fn);
}

// ---------------------------------------------------------------------------
// Downsample
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> DownsampleT<S>::forward(const TensorT<S>& x, bool training) {
  TensorT<S> y = pre.forward(x, training);
  y = relu(expand.forward(y, training));
  y = relu(dw.forward(y, training));
  y = project.forward(y, training);
  return post.forward(y, training);
}

template <typename S>
void DownsampleT<S>::fold_bn() {
  pre.fold_bn();
  expand.fold_bn();
  dw.fold_bn();
  project.fold_bn();
  post.fold_bn();
}

template <typename S>
void DownsampleT<S>::visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
  pre.visit_params(prefix + ".pre", fn);
  expand.visit_params(prefix + ".expand", fn);
  dw.visit_params(prefix + ".dw", fn);
  project.visit_params(prefix + ".project", fn);
  post.visit_params(prefix + ".post", fn);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

template <typename S>
BlockT<S> make_block(int channels, MixerKind mixer, const StageSpec& spec, const ModelConfig& cfg,
                     Rng& rng) {
  BlockT<S> block;
  block.mixer = mixer;
  block.dw = ConvBN<S>::make(channels, channels, 3, 1, 1, channels, rng);
  if (mixer == MixerKind::shsa) {
    block.shsa =
        ShsaLayer<S>::make(channels, partial_channels(spec.partial_ratio, channels), spec.d_qk,
                           rng);
  } else if (mixer == MixerKind::mhsa) {
    const int dv = cfg.mhsa_d_v > 0 ? cfg.mhsa_d_v : derived_head_dim(cfg);
    const int dqk = cfg.mhsa_d_qk > 0 ? cfg.mhsa_d_qk : dv;
    block.mhsa = MhsaLayer<S>::make(channels, channels / dv, dqk, dv, rng);
  }
  block.ffn = FfnLayer<S>::make(channels, rng);
  return block;
}

}  // namespace

template <typename S>
ModelT<S> build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelT<S> model;
  model.cfg = cfg;

  const std::vector<int> ladder = cfg.resolved_stem();
  int cin = 3;
  for (int c : ladder) {
    model.stem.push_back(ConvBN<S>::make(cin, c, 3, 2, 1, 1, rng));
    cin = c;
  }

  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    const StageSpec& spec = cfg.stages[si];
    if (si > 0) {
      const int cprev = cfg.stages[si - 1].channels;
      DownsampleT<S> down;
      StageSpec plain;  // conv-only sandwich blocks take no attention fields
      down.pre = make_block<S>(cprev, MixerKind::none, plain, cfg, rng);
      down.expand = ConvBN<S>::make(cprev, 4 * cprev, 1, 1, 0, 1, rng);
      down.dw = ConvBN<S>::make(4 * cprev, 4 * cprev, 3, 2, 1, 4 * cprev, rng);
      down.project = ConvBN<S>::make(4 * cprev, spec.channels, 1, 1, 0, 1, rng);
      down.post = make_block<S>(spec.channels, MixerKind::none, plain, cfg, rng);
      model.downsamples.push_back(std::move(down));
    }
    std::vector<BlockT<S>> blocks;
    const MixerKind mixer = spec.use_attention ? cfg.mixer : MixerKind::none;
    for (int b = 0; b < spec.blocks; ++b) {
      blocks.push_back(make_block<S>(spec.channels, mixer, spec, cfg, rng));
    }
    model.stages.push_back(std::move(blocks));
  }

  const int clast = cfg.stages.back().channels;
  model.head_bn = BatchNormLayer<S>::make(clast);
  model.head_w = init_uniform<S>({clast, cfg.num_classes}, clast, rng);
  model.head_b = TensorT<S>::zeros({cfg.num_classes}, true);
  return model;
}

template <typename S>
TensorT<S> ModelT<S>::forward(const TensorT<S>& x, ForwardOptionsT<S>* opt) {
  if (!x.defined() || x.dim() != 4 || x.extent(1) != 3) {
    throw std::invalid_argument("forward: expected [N, 3, R, R] input");
  }
  if (x.extent(2) != cfg.input_resolution || x.extent(3) != cfg.input_resolution) {
    throw std::invalid_argument("forward: input resolution " + std::to_string(x.extent(2)) + "x" +
                                std::to_string(x.extent(3)) + " does not match configured " +
                                std::to_string(cfg.input_resolution));
  }
  const bool training = opt && opt->training;
  const std::string capture = opt ? opt->capture_layer : std::string();
  bool captured = false;

  TensorT<S> y = x;
  for (std::size_t i = 0; i < stem.size(); ++i) {
    LayerScope scope("stem.c" + std::to_string(i + 1));
    y = relu(stem[i].forward(y, training));
  }
  for (std::size_t si = 0; si < stages.size(); ++si) {
    if (si > 0) {
      LayerScope scope("d" + std::to_string(si));
      y = downsamples[si - 1].forward(y, training);
    }
    for (std::size_t bi = 0; bi < stages[si].size(); ++bi) {
      const std::string name = "s" + std::to_string(si + 1) + ".b" + std::to_string(bi);
      LayerScope scope(name);
      TensorT<S>* attn_sink = nullptr;
      if (!capture.empty() && capture == name + ".mixer") {
        attn_sink = &opt->captured_attention;
        captured = true;
      }
      y = stages[si][bi].forward(y, training, attn_sink);
    }
  }
  if (!capture.empty() && !captured) {
    throw std::invalid_argument("forward: no mixer layer named '" + capture + "'");
  }

  LayerScope scope("head");
  TensorT<S> pooled = global_avg_pool(y);
  if (!fused) {
    pooled = head_bn.forward(pooled, training);
  }
  return linear(pooled, head_w, &head_b);
}

template <typename S>
void ModelT<S>::visit_params(const ParamVisitor<S>& fn) {
  for (std::size_t i = 0; i < stem.size(); ++i) {
    stem[i].visit_params("stem.c" + std::to_string(i + 1), fn);
  }
  for (std::size_t si = 0; si < stages.size(); ++si) {
    if (si > 0) {
      downsamples[si - 1].visit_params("d" + std::to_string(si), fn);
    }
    for (std::size_t bi = 0; bi < stages[si].size(); ++bi) {
      stages[si][bi].visit_params("s" + std::to_string(si + 1) + ".b" + std::to_string(bi), fn);
    }
  }
  if (!fused) {
    head_bn.visit_params("head.bn", fn);
  }
  fn("head.fc.w", head_w, true);
  fn("head.fc.b", head_b, true);
}

template <typename S>
std::vector<std::pair<std::string, TensorT<S>*>> ModelT<S>::named_tensors() {
  std::vector<std::pair<std::string, TensorT<S>*>> out;
  visit_params([&out](const std::string& name, TensorT<S>& t, bool) { out.emplace_back(name, &t); });
  return out;
}

template <typename S>
std::vector<std::string> ModelT<S>::mixer_layer_ids() const {
  std::vector<std::string> ids;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    for (std::size_t bi = 0; bi < stages[si].size(); ++bi) {
      if (stages[si][bi].mixer != MixerKind::none) {
        ids.push_back("s" + std::to_string(si + 1) + ".b" + std::to_string(bi) + ".mixer");
      }
    }
  }
  return ids;
}

namespace {

template <typename S>
BlockT<S>* find_block(ModelT<S>& model, const std::string& layer_id) {
  for (std::size_t si = 0; si < model.stages.size(); ++si) {
    for (std::size_t bi = 0; bi < model.stages[si].size(); ++bi) {
      const std::string name =
          "s" + std::to_string(si + 1) + ".b" + std::to_string(bi) + ".mixer";
      if (name == layer_id) {
        return &model.stages[si][bi];
      }
    }
  }
  return nullptr;
}

}  // namespace

template <typename S>
MhsaLayer<S>* ModelT<S>::find_mhsa(const std::string& layer_id) {
  BlockT<S>* block = find_block(*this, layer_id);
  return block && block->mhsa ? &*block->mhsa : nullptr;
}

template <typename S>
ShsaLayer<S>* ModelT<S>::find_shsa(const std::string& layer_id) {
  BlockT<S>* block = find_block(*this, layer_id);
  return block && block->shsa ? &*block->shsa : nullptr;
}

template <typename S>
std::vector<int> ModelT<S>::stage_grids() const {
  std::vector<int> grids;
  int g = cfg.input_resolution / 16;
  grids.push_back(g);
  for (std::size_t i = 1; i < cfg.stages.size(); ++i) {
    g = (g + 1) / 2;  // stride-2 pad-1 3x3 gives ceil(g/2)
    grids.push_back(g);
  }
  return grids;
}

template <typename S>
void fuse_all_bn(ModelT<S>& model) {
  if (model.fused) {
    throw std::logic_error("fuse_all_bn: model already fused");
  }
  for (auto& layer : model.stem) {
    layer.fold_bn();
  }
  for (std::size_t si = 0; si < model.stages.size(); ++si) {
    if (si > 0) {
      model.downsamples[si - 1].fold_bn();
    }
    for (auto& block : model.stages[si]) {
      block.fold_bn();
    }
  }
  // The head BN folds forward into the linear: scale row k of W by
  // gamma_k/sigma_k and shift the bias by the normalized offset through W.
  {
    const int C = model.head_w.extent(0);
    const int K = model.head_w.extent(1);
    auto& bn = model.head_bn;
    for (int c = 0; c < C; ++c) {
      const S var = bn.running_var.at(static_cast<std::size_t>(c));
      if (var + bn.eps <= S(0)) {
        throw std::runtime_error("fuse_all_bn: non-positive variance in head");
      }
      const S g = bn.gamma.at(static_cast<std::size_t>(c)) / std::sqrt(var + bn.eps);
      const S shift =
          bn.beta.at(static_cast<std::size_t>(c)) - bn.running_mean.at(static_cast<std::size_t>(c)) * g;
      S* row = model.head_w.ptr() + static_cast<std::size_t>(c) * K;
      for (int k = 0; k < K; ++k) {
        model.head_b.at(static_cast<std::size_t>(k)) += shift * row[k];
      }
      for (int k = 0; k < K; ++k) {
        row[k] *= g;
      }
    }
  }
  model.fused = true;
}

template <typename S>
long long param_count(ModelT<S>& model) {
  long long total = 0;
  model.visit_params([&total](const std::string&, TensorT<S>& t, bool trainable) {
    if (trainable) {
      total += static_cast<long long>(t.numel());
    }
  });
  return total;
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

#define SHVIT_INSTANTIATE_MODEL(S)                  \
  template struct BlockT<S>;                        \
  template struct DownsampleT<S>;                   \
  template struct ModelT<S>;                        \
  template ModelT<S> build_model<S>(const ModelConfig&, Rng&); \
  template void fuse_all_bn<S>(ModelT<S>&);         \
  template long long param_count<S>(ModelT<S>&);

SHVIT_INSTANTIATE_MODEL(float)
SHVIT_INSTANTIATE_MODEL(double)

#undef SHVIT_INSTANTIATE_MODEL

}  // namespace shvit

#pragma once

// Whole-network assembly: overlapping patchify stem, three stages of blocks
// with downsampling layers between them, classifier head.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "shvit/layers.hpp"
#include "shvit/rng.hpp"
#include "shvit/tensor.hpp"

namespace shvit {

enum class MixerKind { none, shsa, mhsa };

const char* mixer_name(MixerKind kind);
MixerKind mixer_from_name(const std::string& name);

struct StageSpec {
  int channels = 0;
  int blocks = 0;
  bool use_attention = false;
  double partial_ratio = 1.0 / 4.67;
  int d_qk = 16;
};

struct ModelConfig {
  int input_resolution = 224;
  int num_classes = 1000;
  MixerKind mixer = MixerKind::shsa;
  // Empty -> derived ladder [C1/8, C1/4, C1/2, C1] rounded to even.
  std::vector<int> stem_channels;
  std::vector<StageSpec> stages;
  // MHSA twins only: per-head dims. 0 -> derived from stage width.
  int mhsa_d_qk = 0;
  int mhsa_d_v = 0;

  std::vector<int> resolved_stem() const;
  void validate() const;

  static ModelConfig reference();
  static ModelConfig tiny();
  // Named variant ("ref", "tiny") or a JSON file path.
  static ModelConfig named_or_file(const std::string& spec);
  static ModelConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
};

int partial_channels(double ratio, int channels);

// One SHViT block: depthwise conv, optional token mixer, FFN, each with its
// own residual connection.
template <typename S>
struct BlockT {
  MixerKind mixer = MixerKind::none;
  ConvBN<S> dw;  // 3x3 depthwise, stride 1, pad 1
  std::optional<ShsaLayer<S>> shsa;
  std::optional<MhsaLayer<S>> mhsa;
  FfnLayer<S> ffn;

  TensorT<S> forward(const TensorT<S>& x, bool training, TensorT<S>* attn_out = nullptr);
  void fold_bn();
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

// Downsampling layer between stages: conv-only block, inverted-residual
// stride-2 core (1x1 expand x4, 3x3 depthwise stride 2, 1x1 project), then
// another conv-only block at the new width.
template <typename S>
struct DownsampleT {
  BlockT<S> pre;       // at C_in
  ConvBN<S> expand;    // 1x1 C_in -> 4*C_in, ReLU after
  ConvBN<S> dw;        // 3x3 depthwise stride 2, ReLU after
  ConvBN<S> project;   // 1x1 4*C_in -> C_out
  BlockT<S> post;      // at C_out

  TensorT<S> forward(const TensorT<S>& x, bool training);
  void fold_bn();
  void visit_params(const std::string& prefix, const ParamVisitor<S>& fn);
};

template <typename S>
struct ForwardOptionsT {
  bool training = false;
  // When set, the named mixer's post-softmax attention map is captured.
  std::string capture_layer;
  TensorT<S> captured_attention;  // [N, heads, T, T] after a captured forward
};
using ForwardOptions = ForwardOptionsT<float>;

template <typename S>
struct ModelT {
  ModelConfig cfg;
  bool fused = false;
  std::vector<ConvBN<S>> stem;  // four 3x3 stride-2 layers, ReLU after each
  std::vector<std::vector<BlockT<S>>> stages;
  std::vector<DownsampleT<S>> downsamples;  // between consecutive stages
  BatchNormLayer<S> head_bn;
  TensorT<S> head_w;  // [C3, num_classes]
  TensorT<S> head_b;  // [num_classes]

  TensorT<S> forward(const TensorT<S>& x, ForwardOptionsT<S>* opt);
  TensorT<S> forward(const TensorT<S>& x) { return forward(x, nullptr); }

  void visit_params(const ParamVisitor<S>& fn);
  // Stable name -> tensor view of every parameter and buffer.
  std::vector<std::pair<std::string, TensorT<S>*>> named_tensors();
  std::vector<std::string> mixer_layer_ids() const;
  MhsaLayer<S>* find_mhsa(const std::string& layer_id);
  ShsaLayer<S>* find_shsa(const std::string& layer_id);

  // Spatial grid per stage for this config's resolution.
  std::vector<int> stage_grids() const;
};

using Model = ModelT<float>;

template <typename S>
ModelT<S> build_model(const ModelConfig& cfg, Rng& rng);

// Folds every ConvBN and the head BN (absorbed into the final linear).
// Throws std::logic_error if the model is already fused.
template <typename S>
void fuse_all_bn(ModelT<S>& model);

template <typename S>
long long param_count(ModelT<S>& model);

}  // namespace shvit

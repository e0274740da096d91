#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "shvit/gradcheck.hpp"
#include "shvit/model.hpp"
#include "shvit/ops.hpp"
#include "shvit/profiler.hpp"
#include "test_util.hpp"

using namespace shvit;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

std::string repo_file(const char* rel) { return std::string(SHVIT_SOURCE_DIR "/") + rel; }

}  // namespace

TEST_CASE("config validation rejects malformed configs") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_resolution = 30;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = ModelConfig::tiny();
  cfg.stages.clear();
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = ModelConfig::tiny();
  cfg.stages[1].partial_ratio = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = ModelConfig::tiny();
  cfg.stem_channels = {2, 4, 8, 12};  // ladder must end at stage-1 width
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = ModelConfig::tiny();
  cfg.mixer = MixerKind::mhsa;
  cfg.mhsa_d_v = 7;  // does not divide 16 or 24
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("config json round trip and file loading") {
  ModelConfig ref = ModelConfig::reference();
  ModelConfig back = ModelConfig::from_json_text(ref.to_json_text());
  CHECK(back.to_json_text() == ref.to_json_text());
  CHECK_THROWS_AS(ModelConfig::from_json_text("{\"stages\": []}"), std::invalid_argument);
  CHECK_THROWS_AS(ModelConfig::from_json_text("not json"), std::invalid_argument);

  // The checked-in config files must match the built-in presets.
  std::ifstream rf(repo_file("configs/ref.json"));
  REQUIRE(rf.good());
  std::ostringstream buf;
  buf << rf.rdbuf();
  CHECK(ModelConfig::from_json_text(buf.str()).to_json_text() == ref.to_json_text());

  ModelConfig tiny = ModelConfig::named_or_file(repo_file("configs/tiny.json"));
  CHECK(tiny.to_json_text() == ModelConfig::tiny().to_json_text());
  CHECK_NOTHROW(ModelConfig::named_or_file(repo_file("configs/macro4.json")));
  CHECK_THROWS_AS(ModelConfig::named_or_file("no_such_config"), std::runtime_error);
}

TEST_CASE("stem ladder derivation and grid trace") {
  ModelConfig ref = ModelConfig::reference();
  CHECK(ref.resolved_stem() == std::vector<int>{16, 32, 64, 128});

  Rng rng(1);
  Model m = build_model<float>(ref, rng);
  CHECK(m.stage_grids() == std::vector<int>{14, 7, 4});
  Rng rng2(1);
  Model t = build_model<float>(ModelConfig::tiny(), rng2);
  CHECK(t.stage_grids() == std::vector<int>{2, 1, 1});
}

TEST_CASE("partial channel counts follow the ratio with clamping") {
  CHECK(partial_channels(1.0 / 4.67, 128) == 27);
  CHECK(partial_channels(1.0 / 4.67, 256) == 55);
  CHECK(partial_channels(1.0 / 4.67, 384) == 82);
  CHECK(partial_channels(1.0, 5) == 5);
  CHECK(partial_channels(0.001, 100) == 1);
}

TEST_CASE("forward validates input shape and resolution") {
  Rng rng(2);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  NoGradGuard ng;
  CHECK_THROWS_AS(m.forward(rand_tensor({1, 3, 64, 64}, rng)), std::invalid_argument);
  CHECK_THROWS_AS(m.forward(rand_tensor({1, 1, 32, 32}, rng)), std::invalid_argument);
  Tensor logits = m.forward(rand_tensor({3, 3, 32, 32}, rng));
  CHECK(logits.shape == std::vector<int>{3, 4});
}

TEST_CASE("identical seeds build identical models") {
  Rng a(3), b(3), c(4);
  Model ma = build_model<float>(ModelConfig::tiny(), a);
  Model mb = build_model<float>(ModelConfig::tiny(), b);
  Model mc = build_model<float>(ModelConfig::tiny(), c);
  Rng xr(9);
  Tensor x = rand_tensor({2, 3, 32, 32}, xr);
  NoGradGuard ng;
  CHECK(testutil::bit_equal(ma.forward(x), mb.forward(x)));
  CHECK_FALSE(testutil::bit_equal(ma.forward(x), mc.forward(x)));
}

TEST_CASE("mixer layer ids, lookup, and attention capture") {
  Rng rng(5);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  CHECK(m.mixer_layer_ids() == std::vector<std::string>{"s2.b0.mixer", "s3.b0.mixer"});
  CHECK(m.find_shsa("s2.b0.mixer") != nullptr);
  CHECK(m.find_mhsa("s2.b0.mixer") == nullptr);
  CHECK(m.find_shsa("s1.b0.mixer") == nullptr);

  Rng xr(6);
  Tensor x = rand_tensor({2, 3, 32, 32}, xr);
  NoGradGuard ng;
  ForwardOptions opt;
  opt.capture_layer = "s2.b0.mixer";
  m.forward(x, &opt);
  CHECK(opt.captured_attention.shape == std::vector<int>{2, 1, 1, 1});

  ForwardOptions bad;
  bad.capture_layer = "s9.b0.mixer";
  CHECK_THROWS_AS(m.forward(x, &bad), std::invalid_argument);
}

TEST_CASE("derived mhsa head dims divide the stage widths") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.mixer = MixerKind::mhsa;
  Rng rng(7);
  Model m = build_model<float>(cfg, rng);
  MhsaLayer<float>* s2 = m.find_mhsa("s2.b0.mixer");
  MhsaLayer<float>* s3 = m.find_mhsa("s3.b0.mixer");
  REQUIRE(s2 != nullptr);
  REQUIRE(s3 != nullptr);
  // Largest power of two dividing both 16 and 24 is 8.
  CHECK(s2->heads == 2);
  CHECK(s2->d_v == 8);
  CHECK(s3->heads == 3);
}

TEST_CASE("training forward updates bn running stats, eval does not") {
  Rng rng(8);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  // detached() shares storage, so snapshots must copy the values out.
  const std::vector<double> before = testutil::to_vec(m.stem[0].bn.running_mean);
  Rng xr(9);
  Tensor x = rand_tensor({2, 3, 32, 32}, xr);
  NoGradGuard ng;
  ForwardOptions train_opt;
  train_opt.training = true;
  m.forward(x, &train_opt);
  CHECK_FALSE(testutil::to_vec(m.stem[0].bn.running_mean) == before);
  const std::vector<double> after = testutil::to_vec(m.stem[0].bn.running_mean);
  m.forward(x);
  CHECK(testutil::to_vec(m.stem[0].bn.running_mean) == after);
}

TEST_CASE("bn fusion preserves logits and removes every bn op") {
  Rng rng(10);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  // Non-trivial running stats make the fold a real transformation.
  {
    NoGradGuard ng;
    Rng warm(11);
    ForwardOptions opt;
    opt.training = true;
    for (int i = 0; i < 3; ++i) m.forward(rand_tensor({4, 3, 32, 32}, warm), &opt);
  }
  const long long params_before = param_count(m);
  Rng xr(12);
  Tensor x = rand_tensor({4, 3, 32, 32}, xr);
  NoGradGuard ng;
  Tensor before = m.forward(x);

  Collector unfused_ops(false);
  {
    CollectorScope cs(&unfused_ops);
    m.forward(x);
  }
  CHECK(unfused_ops.by_kind()[static_cast<std::size_t>(OpKind::batch_norm)].calls > 0);

  fuse_all_bn(m);
  CHECK(m.fused);
  Tensor after = m.forward(x);
  CHECK(max_abs_diff(before, after) < 1e-3);
  CHECK(param_count(m) <= params_before);
  CHECK_THROWS_AS(fuse_all_bn(m), std::logic_error);

  Collector fused_ops(false);
  {
    CollectorScope cs(&fused_ops);
    m.forward(x);
  }
  CHECK(fused_ops.by_kind()[static_cast<std::size_t>(OpKind::batch_norm)].calls == 0);
  // Layer norm is structural to the attention blocks and survives fusion.
  CHECK(fused_ops.by_kind()[static_cast<std::size_t>(OpKind::layer_norm)].calls > 0);
}

TEST_CASE("token mixer param ordering holds on tiny twins") {
  ModelConfig cfg = ModelConfig::tiny();
  long long params[3];
  const MixerKind kinds[] = {MixerKind::none, MixerKind::shsa, MixerKind::mhsa};
  for (int i = 0; i < 3; ++i) {
    cfg.mixer = kinds[i];
    Rng rng(13);
    Model m = build_model<float>(cfg, rng);
    params[i] = param_count(m);
  }
  CHECK(params[0] < params[1]);
  CHECK(params[1] < params[2]);
}

TEST_CASE("shsa block issues fewer data-movement and norm calls than mhsa") {
  auto mixer_block_calls = [](MixerKind kind) {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.mixer = kind;
    Rng rng(14);
    Model m = build_model<float>(cfg, rng);
    Rng xr(15);
    Tensor x = rand_tensor({1, 3, 32, 32}, xr);
    NoGradGuard ng;
    Collector ops(false);
    {
      CollectorScope cs(&ops);
      m.forward(x);
    }
    std::uint64_t calls = 0;
    for (std::size_t k = 0; k < static_cast<std::size_t>(OpKind::kCount); ++k) {
      const OpKind kk = static_cast<OpKind>(k);
      if (op_is_data_movement(kk) || op_is_normalization(kk)) {
        calls += ops.by_kind()[k].calls;
      }
    }
    return calls;
  };
  // Identical skeleton outside the mixers, so the whole-model difference is
  // exactly the per-block mixer difference.
  CHECK(mixer_block_calls(MixerKind::shsa) < mixer_block_calls(MixerKind::mhsa));
}

TEST_CASE("whole model gradient check passes at a kink-safe step") {
  GradCheckOptions opt;
  opt.eps = 1e-5;
  opt.filter_kinks = true;
  GradCheckReport rep = model_gradcheck(2, 2, opt);
  INFO("worst ", rep.worst_param, " rel ", rep.max_rel_err, " skipped ", rep.skipped);
  CHECK(rep.passed);
}

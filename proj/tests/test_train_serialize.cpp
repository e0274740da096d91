#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "shvit/model.hpp"
#include "shvit/ops.hpp"
#include "shvit/serialize.hpp"
#include "shvit/train.hpp"
#include "test_util.hpp"

using namespace shvit;

namespace {

SyntheticDataset quick_data(int count, double sigma, uint64_t seed) {
  DatasetParams dp;
  dp.count = count;
  dp.resolution = 32;
  dp.classes = 4;
  dp.noise_sigma = sigma;
  dp.seed = seed;
  return gen_dataset(dp);
}

double param_sumsq(Model& m) {
  double s = 0.0;
  m.visit_params([&s](const std::string&, Tensor& t, bool trainable) {
    if (!trainable) return;
    for (std::size_t i = 0; i < t.numel(); ++i) s += static_cast<double>(t.at(i)) * t.at(i);
  });
  return s;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("training is bit-deterministic for a fixed seed") {
  SyntheticDataset tr = quick_data(16, 0.05, 11);
  SyntheticDataset ev = quick_data(8, 0.05, 12);
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  cfg.eval_every = 3;
  cfg.seed = 3;

  Rng r1(7), r2(7);
  Model a = build_model<float>(ModelConfig::tiny(), r1);
  Model b = build_model<float>(ModelConfig::tiny(), r2);
  TrainResult ra = train(a, tr, ev, cfg);
  TrainResult rb = train(b, tr, ev, cfg);

  REQUIRE(ra.curve.size() == 6);
  for (std::size_t i = 0; i < ra.curve.size(); ++i) {
    CHECK(ra.curve[i].step == rb.curve[i].step);
    CHECK(ra.curve[i].lr == rb.curve[i].lr);
    CHECK(ra.curve[i].loss == rb.curve[i].loss);
    CHECK(ra.curve[i].eval_acc == rb.curve[i].eval_acc);
  }
}

TEST_CASE("zero learning rate keeps the full-batch loss constant") {
  SyntheticDataset tr = quick_data(8, 0.0, 13);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 8;  // covers the set, so every step sees the same batch
  cfg.lr = 0.0;
  cfg.eval_every = 5;
  Rng rng(8);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  TrainResult r = train(m, tr, tr, cfg);
  for (const auto& rec : r.curve) {
    CHECK(rec.loss == r.curve.front().loss);
    CHECK(rec.lr == 0.0);
  }
}

TEST_CASE("exploding updates raise a divergence error with a 1-based step") {
  SyntheticDataset tr = quick_data(8, 0.0, 14);
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 8;
  cfg.lr = 1e6;
  cfg.cosine_schedule = false;
  Rng rng(9);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  bool threw = false;
  try {
    train(m, tr, tr, cfg);
  } catch (const DivergenceError& e) {
    threw = true;
    CHECK(e.step >= 1);
    CHECK(e.step <= 50);
  }
  CHECK(threw);
}

TEST_CASE("eval runs on the configured cadence and at the last step") {
  SyntheticDataset tr = quick_data(16, 0.0, 15);
  SyntheticDataset ev = quick_data(8, 0.0, 16);
  TrainConfig cfg;
  cfg.steps = 25;
  cfg.batch_size = 8;
  cfg.lr = 0.01;
  cfg.eval_every = 10;
  Rng rng(10);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  TrainResult r = train(m, tr, ev, cfg);
  REQUIRE(r.curve.size() == 25);
  for (const auto& rec : r.curve) {
    const bool scheduled = rec.step % 10 == 0 || rec.step == 25;
    CHECK((rec.eval_acc >= 0.0) == scheduled);
  }
  CHECK(r.final_eval_acc == r.curve.back().eval_acc);

  const std::string csv = r.curve_csv();
  CHECK(csv.rfind("step,lr,loss,eval_acc\n", 0) == 0);
  // Non-eval rows leave the last field empty.
  CHECK(csv.find(",\n") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 26);
}

TEST_CASE("adamw reduces the loss on the noiseless task") {
  SyntheticDataset tr = quick_data(32, 0.0, 17);
  SyntheticDataset ev = quick_data(8, 0.0, 18);
  TrainConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 8;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.01;
  cfg.optimizer = OptimizerKind::adamw;
  cfg.eval_every = 50;
  cfg.seed = 4;
  Rng rng(11);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  TrainResult r = train(m, tr, ev, cfg);
  CHECK(r.final_loss < 0.5 * r.initial_loss);
}

TEST_CASE("weight decay shrinks the parameter norm after one step") {
  SyntheticDataset tr = quick_data(8, 0.0, 19);
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 8;
  cfg.lr = 0.01;
  cfg.cosine_schedule = false;
  cfg.momentum = 0.0;

  Rng r1(12), r2(12);
  Model plain = build_model<float>(ModelConfig::tiny(), r1);
  Model decayed = build_model<float>(ModelConfig::tiny(), r2);
  train(plain, tr, tr, cfg);
  cfg.weight_decay = 1.0;
  train(decayed, tr, tr, cfg);
  CHECK(param_sumsq(decayed) < param_sumsq(plain));
}

TEST_CASE("train and dataset configs reject malformed values") {
  TrainConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.batch_size = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.lr = -0.1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.eval_every = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("evaluate matches a single full-batch pass and rejects empty sets") {
  SyntheticDataset data = quick_data(40, 0.05, 20);  // spans two eval chunks
  Rng rng(13);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  EvalResult r = evaluate(m, data);

  NoGradGuard ng;
  std::vector<int> idx(40);
  std::iota(idx.begin(), idx.end(), 0);
  Tensor logits = m.forward(data.batch_images(idx));
  std::vector<int> labels = data.batch_labels(idx);
  int correct = 0;
  for (int i = 0; i < 40; ++i) {
    const float* row = logits.ptr() + static_cast<std::size_t>(i) * 4;
    int best = 0;
    for (int k = 1; k < 4; ++k) {
      if (row[k] > row[best]) best = k;
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  CHECK(r.accuracy == doctest::Approx(correct / 40.0));
  CHECK(r.mean_loss ==
        doctest::Approx(static_cast<double>(cross_entropy(logits, labels).at(0))).epsilon(1e-5));

  SyntheticDataset empty;
  CHECK_THROWS_AS(evaluate(m, empty), std::invalid_argument);
}

TEST_CASE("model save and load round trip is bit-exact") {
  const std::string path = "tt_roundtrip.shvw";
  Rng rng(14);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  // Move the BN running stats off their init values so buffers are exercised.
  SyntheticDataset tr = quick_data(8, 0.05, 21);
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  cfg.eval_every = 2;
  train(m, tr, tr, cfg);

  save_model(m, path);
  Model loaded = load_model(path);
  CHECK(loaded.cfg.to_json_text() == m.cfg.to_json_text());
  CHECK_FALSE(loaded.fused);

  auto na = m.named_tensors();
  auto nb = loaded.named_tensors();
  REQUIRE(na.size() == nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].first == nb[i].first);
    CHECK(testutil::bit_equal(*na[i].second, *nb[i].second));
  }

  NoGradGuard ng;
  Tensor x = testutil::rand_tensor({2, 3, 32, 32}, rng);
  CHECK(testutil::bit_equal(m.forward(x), loaded.forward(x)));
  std::remove(path.c_str());
}

TEST_CASE("fused models survive the round trip with their layout intact") {
  const std::string path = "tt_fused.shvw";
  Rng rng(15);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  SyntheticDataset tr = quick_data(8, 0.05, 22);
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  cfg.eval_every = 2;
  train(m, tr, tr, cfg);
  fuse_all_bn(m);

  save_model(m, path);
  Model loaded = load_model(path);
  CHECK(loaded.fused);
  CHECK(loaded.named_tensors().size() == m.named_tensors().size());

  NoGradGuard ng;
  Tensor x = testutil::rand_tensor({2, 3, 32, 32}, rng);
  CHECK(testutil::bit_equal(m.forward(x), loaded.forward(x)));
  std::remove(path.c_str());
}

TEST_CASE("tensor containers round trip and reject model files") {
  const std::string path = "tt_tensor.shvw";
  Rng rng(16);
  Tensor t = testutil::rand_tensor({2, 3, 4}, rng);
  save_tensor(t, "input", path);
  std::string name;
  Tensor back = load_tensor(path, &name);
  CHECK(name == "input");
  CHECK(testutil::bit_equal(t, back));
  std::remove(path.c_str());

  const std::string mpath = "tt_manyt.shvw";
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  save_model(m, mpath);
  CHECK_THROWS_AS(load_tensor(mpath), ManifestMismatchError);
  std::remove(mpath.c_str());

  CHECK_THROWS_AS(save_tensor(Tensor{}, "x", path), std::invalid_argument);
}

TEST_CASE("each corruption mode raises its own error type") {
  const std::string base_path = "tt_fault_base.shvw";
  Rng rng(17);
  Model m = build_model<float>(ModelConfig::tiny(), rng);
  save_model(m, base_path);
  const std::string base = slurp(base_path);
  const std::string path = "tt_fault.shvw";

  SUBCASE("bad magic") {
    std::string bytes = base;
    bytes[0] = 'X';
    spit(path, bytes);
    CHECK_THROWS_AS(load_model(path), BadMagicError);
  }
  SUBCASE("file shorter than the magic") {
    spit(path, "SH");
    CHECK_THROWS_AS(load_model(path), BadMagicError);
  }
  SUBCASE("unsupported version") {
    std::string bytes = base;
    bytes[4] = 2;  // format version u32 LE at offset 4
    spit(path, bytes);
    CHECK_THROWS_AS(load_model(path), VersionMismatchError);
  }
  SUBCASE("truncated fixed header") {
    spit(path, base.substr(0, 8));
    CHECK_THROWS_AS(load_model(path), TruncatedPayloadError);
  }
  SUBCASE("truncated json header") {
    spit(path, base.substr(0, 40));
    CHECK_THROWS_AS(load_model(path), TruncatedPayloadError);
  }
  SUBCASE("chopped payload") {
    spit(path, base.substr(0, base.size() - 64));
    CHECK_THROWS_AS(load_model(path), TruncatedPayloadError);
  }
  SUBCASE("manifest name flipped") {
    std::string bytes = base;
    const std::size_t at = bytes.find("head.fc.b");
    REQUIRE(at != std::string::npos);
    bytes[at + 8] = 'c';  // same length, so offsets stay valid
    spit(path, bytes);
    CHECK_THROWS_AS(load_model(path), ManifestMismatchError);
  }
  SUBCASE("trailing bytes") {
    spit(path, base + "junk");
    CHECK_THROWS_AS(load_model(path), SerializeError);
  }
  std::remove(path.c_str());
  std::remove(base_path.c_str());
}

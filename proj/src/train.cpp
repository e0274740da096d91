#include "shvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "shvit/ops.hpp"

namespace shvit {

DivergenceError::DivergenceError(int step_)
    : std::runtime_error("training diverged at step " + std::to_string(step_)), step(step_) {}

void TrainConfig::validate() const {
  if (steps <= 0) throw std::invalid_argument("TrainConfig: steps must be positive");
  if (batch_size <= 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (lr < 0.0) throw std::invalid_argument("TrainConfig: lr must be non-negative");
  if (weight_decay < 0.0) {
    throw std::invalid_argument("TrainConfig: weight_decay must be non-negative");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
  }
  if (eval_every <= 0) throw std::invalid_argument("TrainConfig: eval_every must be positive");
}

EvalResult evaluate(Model& model, const SyntheticDataset& data) {
  if (data.size() == 0) {
    throw std::invalid_argument("evaluate: empty eval set");
  }
  NoGradGuard ng;
  const int chunk = 32;
  int correct = 0;
  double loss_sum = 0.0;
  for (int start = 0; start < data.size(); start += chunk) {
    const int n = std::min(chunk, data.size() - start);
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = data.batch_images(idx);
    std::vector<int> labels = data.batch_labels(idx);
    Tensor logits = model.forward(x);
    loss_sum += static_cast<double>(cross_entropy(logits, labels).at(0)) * n;
    const int classes = logits.extent(1);
    for (int i = 0; i < n; ++i) {
      const float* row = logits.ptr() + static_cast<std::size_t>(i) * classes;
      int best = 0;
      for (int k = 1; k < classes; ++k) {
        if (row[k] > row[best]) best = k;
      }
      if (best == labels[static_cast<std::size_t>(i)]) ++correct;
    }
  }
  EvalResult r;
  r.accuracy = static_cast<double>(correct) / data.size();
  r.mean_loss = loss_sum / data.size();
  return r;
}

namespace {

// Epoch-shuffled batch cursor; refills with a fresh permutation so every
// batch is full and every example is seen once per epoch.
struct BatchCursor {
  std::vector<int> order;
  std::size_t pos = 0;
  Rng* rng;

  BatchCursor(int n, Rng* r) : order(static_cast<std::size_t>(n)), rng(r) {
    std::iota(order.begin(), order.end(), 0);
    shuffle();
  }

  void shuffle() {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng->next_below(i)]);
    }
    pos = 0;
  }

  std::vector<int> next(int batch) {
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(batch));
    while (static_cast<int>(idx.size()) < batch) {
      if (pos == order.size()) shuffle();
      idx.push_back(order[pos++]);
    }
    return idx;
  }
};

struct OptSlot {
  Tensor* param;
  Tensor velocity;  // SGD momentum buffer, or Adam first moment
  Tensor second;    // Adam second moment only
};

}  // namespace

TrainResult train(Model& model, const SyntheticDataset& train_set,
                  const SyntheticDataset& eval_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0) {
    throw std::invalid_argument("train: empty training set");
  }

  std::vector<OptSlot> slots;
  model.visit_params([&slots, &cfg](const std::string&, Tensor& t, bool trainable) {
    if (!trainable) return;
    OptSlot s;
    s.param = &t;
    s.velocity = Tensor::zeros(t.shape);
    if (cfg.optimizer == OptimizerKind::adamw) {
      s.second = Tensor::zeros(t.shape);
    }
    slots.push_back(std::move(s));
  });

  Rng rng(cfg.seed);
  BatchCursor cursor(train_set.size(), &rng);
  // A batch that covers the whole set is the whole set; keeping natural order
  // makes full-batch runs (and the lr=0 constant-loss property) bit-stable.
  const bool full_batch = cfg.batch_size >= train_set.size();
  std::vector<int> full_idx(static_cast<std::size_t>(train_set.size()));
  std::iota(full_idx.begin(), full_idx.end(), 0);

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;
  constexpr double kPi = 3.14159265358979323846;

  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = cfg.cosine_schedule
                          ? 0.5 * cfg.lr * (1.0 + std::cos(kPi * step / cfg.steps))
                          : cfg.lr;

    const std::vector<int> idx = full_batch ? full_idx : cursor.next(cfg.batch_size);
    Tensor x = train_set.batch_images(idx);
    std::vector<int> labels = train_set.batch_labels(idx);

    for (auto& s : slots) s.param->zero_grad();

    double loss_val;
    try {
      ForwardOptions fo;
      fo.training = true;
      Tensor loss = cross_entropy(model.forward(x, &fo), labels);
      loss_val = static_cast<double>(loss.at(0));
      backward(loss);
    } catch (const std::runtime_error&) {
      throw DivergenceError(step + 1);
    }
    if (!std::isfinite(loss_val)) {
      throw DivergenceError(step + 1);
    }

    for (auto& s : slots) {
      float* w = s.param->ptr();
      float* g = s.param->gptr();
      float* v = s.velocity.ptr();
      const std::size_t n = s.param->numel();
      if (cfg.optimizer == OptimizerKind::sgd_momentum) {
        for (std::size_t i = 0; i < n; ++i) {
          const double grad = g[i] + cfg.weight_decay * w[i];
          const double vel = cfg.momentum * v[i] + grad;
          v[i] = static_cast<float>(vel);
          w[i] = static_cast<float>(w[i] - lr * vel);
        }
      } else {
        float* m2 = s.second.ptr();
        const double bc1 = 1.0 - std::pow(kBeta1, step + 1);
        const double bc2 = 1.0 - std::pow(kBeta2, step + 1);
        for (std::size_t i = 0; i < n; ++i) {
          const double m = kBeta1 * v[i] + (1.0 - kBeta1) * g[i];
          const double s2 = kBeta2 * m2[i] + (1.0 - kBeta2) * g[i] * g[i];
          v[i] = static_cast<float>(m);
          m2[i] = static_cast<float>(s2);
          const double update = (m / bc1) / (std::sqrt(s2 / bc2) + kAdamEps);
          w[i] = static_cast<float>(w[i] - lr * (update + cfg.weight_decay * w[i]));
        }
      }
    }

    TrainStepRecord rec;
    rec.step = step + 1;
    rec.lr = lr;
    rec.loss = loss_val;
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      rec.eval_acc = evaluate(model, eval_set).accuracy;
    }
    result.curve.push_back(rec);
  }

  result.initial_loss = result.curve.front().loss;
  result.final_loss = result.curve.back().loss;
  result.final_eval_acc = result.curve.back().eval_acc;
  return result;
}

std::string TrainResult::curve_csv() const {
  std::ostringstream os;
  os << "step,lr,loss,eval_acc\n";
  for (const auto& r : curve) {
    os << r.step << ',' << r.lr << ',' << r.loss << ',';
    if (r.eval_acc >= 0.0) os << r.eval_acc;
    os << '\n';
  }
  return os.str();
}

}  // namespace shvit

#pragma once

#include <cmath>
#include <deque>
#include <limits>
#include <vector>

#include "latseg/model.hpp"

namespace latseg {

// Adaptive-moment optimizer with decoupled weight decay, plus a
// reduce-on-plateau learning-rate schedule over smoothed eval losses.

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int plateau_patience = 10;   // evaluations without improvement before a drop
  int plateau_window = 5;      // smoothing window over eval losses
  double plateau_factor = 0.1;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg), lr_(cfg.lr) {
    if (!(cfg.lr > 0)) throw config_error("optimizer: lr must be positive");
  }

  double learning_rate() const { return lr_; }
  int64_t step_count() const { return step_; }

  // One parameter update. `params` and `grads` are aligned.
  void step(std::vector<Tensor*> params, const std::vector<Tensor>& grads) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->shape);
        v_.emplace_back(p->shape);
      }
    }
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = grads[i];
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (size_t j = 0; j < p.data.size(); ++j) {
        double gj = g.data.empty() ? 0.0 : g.data[j];
        m.data[j] = cfg_.beta1 * m.data[j] + (1 - cfg_.beta1) * gj;
        v.data[j] = cfg_.beta2 * v.data[j] + (1 - cfg_.beta2) * gj * gj;
        double mhat = m.data[j] / bc1;
        double vhat = v.data[j] / bc2;
        p.data[j] -= lr_ * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.data[j]);
      }
    }
  }

  // Feeds one evaluation loss to the plateau detector. Returns true when the
  // learning rate was just dropped.
  bool observe_eval(double loss) {
    window_.push_back(loss);
    if (static_cast<int>(window_.size()) > cfg_.plateau_window) window_.pop_front();
    double smoothed = 0;
    for (double value : window_) smoothed += value;
    smoothed /= static_cast<double>(window_.size());
    if (smoothed < best_ - 1e-12) {
      best_ = smoothed;
      stall_ = 0;
      return false;
    }
    if (++stall_ >= cfg_.plateau_patience) {
      lr_ *= cfg_.plateau_factor;
      stall_ = 0;
      best_ = smoothed;
      return true;
    }
    return false;
  }

 private:
  OptimizerConfig cfg_;
  double lr_;
  int64_t step_ = 0;
  std::vector<Tensor> m_, v_;
  std::deque<double> window_;
  double best_ = std::numeric_limits<double>::infinity();
  int stall_ = 0;
};

// One full training step on a scene: forward, loss, backward, update.
// Aborts (train_abort) on a NaN loss, naming the first NaN-producing op.
inline double train_step(Model& model, const SceneContext& scene, Optimizer& opt,
                         const DiscriminativeMargins& margins = {}) {
  if (scene.steps.empty() || scene.last_step().n_points == 0)
    throw invalid_input("train_step: empty batch");
  Tape tape;
  auto params = model.bind(tape);
  auto fwd = model.forward(tape, scene, params);
  Var loss = model.loss(tape, scene, fwd, margins);
  double value = tape.val(loss).data[0];
  if (std::isnan(value))
    throw train_abort("NaN loss; first NaN at op " + tape.first_nan_op());
  tape.backward(loss);
  std::vector<Tensor*> ptrs;
  std::vector<Tensor> grads;
  ptrs.reserve(params.size());
  grads.reserve(params.size());
  for (int i = 0; i < model.parameter_count(); ++i) {
    ptrs.push_back(&model.parameter(i));
    grads.push_back(tape.grad(params[static_cast<size_t>(i)]));
  }
  opt.step(ptrs, grads);
  return value;
}

}  // namespace latseg

#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "fhrformer/errors.hpp"
#include "fhrformer/tensor.hpp"

namespace fhrformer {

/// Adam with decoupled weight decay. Moment buffers are kept in parameter
/// order; step_count increases by exactly 1 per update.
template <typename S>
class AdamT {
 public:
  struct Config {
    S learning_rate = S(1e-4);
    S weight_decay = S(0.01);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S epsilon = S(1e-8);
  };

  AdamT() = default;
  explicit AdamT(Config cfg) : cfg_(cfg) {}

  S learning_rate() const { return cfg_.learning_rate; }
  void set_learning_rate(S lr) { cfg_.learning_rate = lr; }
  long step_count() const { return step_; }
  const Config& config() const { return cfg_; }

  /// One update over all parameters; gradients are read from param.grad
  /// and must already hold the batch-mean gradient.
  void step(std::vector<ParameterT<S>*>& params) {
    if (first_.empty()) {
      for (auto* p : params) {
        TensorT<S> z = p->value;
        z.set_zero();
        first_.push_back(z);
        second_.push_back(z);
      }
    }
    if (first_.size() != params.size())
      throw TrainingError("optimizer state does not match parameter count");
    ++step_;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      ParameterT<S>& p = *params[i];
      if (!p.grad.same_shape(p.value))
        throw TrainingError("gradient shape mismatch for parameter " + p.name);
      if (!p.grad.all_finite())
        throw TrainingError("non-finite gradient for parameter " + p.name);
      // Decoupled weight decay, applied before the moment update.
      if (cfg_.weight_decay != S(0))
        p.value.mat() -= cfg_.learning_rate * cfg_.weight_decay * p.value.mat();
      auto m = first_[i].mat();
      auto v = second_[i].mat();
      const auto g = p.grad.mat();
      m = cfg_.beta1 * m + (S(1) - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (S(1) - cfg_.beta2) * g.cwiseProduct(g);
      const auto m_hat = m / bc1;
      const auto v_hat = v / bc2;
      p.value.mat().array() -=
          cfg_.learning_rate * m_hat.array() / (v_hat.array().sqrt() + cfg_.epsilon);
      if (!p.value.all_finite())
        throw TrainingError("non-finite value for parameter " + p.name + " after update");
    }
  }

 private:
  Config cfg_;
  long step_ = 0;
  std::vector<TensorT<S>> first_;
  std::vector<TensorT<S>> second_;
};

using Adam = AdamT<float>;

/// Reduce-on-plateau schedule: after `patience` consecutive epochs without
/// validation improvement the learning rate is multiplied by `factor`.
class PlateauScheduler {
 public:
  PlateauScheduler(int patience = 5, double factor = 0.1)
      : patience_(patience), factor_(factor) {}

  int patience() const { return patience_; }
  double factor() const { return factor_; }
  double best_loss() const { return best_; }
  int stale_count() const { return stale_; }

  /// Feeds one validation loss; returns the (possibly decayed) learning rate.
  double step(double val_loss, double current_lr) {
    if (!std::isfinite(val_loss)) throw TrainingError("scheduler: validation loss is not finite");
    if (val_loss < best_) {
      best_ = val_loss;
      stale_ = 0;
      return current_lr;
    }
    ++stale_;
    if (stale_ >= patience_) {
      stale_ = 0;
      return current_lr * factor_;
    }
    return current_lr;
  }

 private:
  int patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

}  // namespace fhrformer

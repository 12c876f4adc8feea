#pragma once

// Adam with L2 weight decay folded into the gradient, and a step learning-rate schedule.

#include <cmath>
#include <vector>

#include "fconv/net.hpp"
#include "fconv/tensor.hpp"

namespace fconv {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// lr(epoch) = base * factor^floor(epoch / every). every == 0 disables decay.
struct StepSchedule {
  double base = 1e-3;
  std::size_t every = 20;
  double factor = 0.1;

  double at(std::size_t epoch) const {
    if (every == 0) return base;
    return base * std::pow(factor, static_cast<double>(epoch / every));
  }
};

template <class T>
class Adam {
 public:
  Adam(std::vector<NamedTensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::size_t steps() const { return t_; }

  /// One update from the gradients currently stored on the parameters. Parameters that received
  /// no gradient still decay.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T> p = params_[i].tensor;
      const auto g = p.grad();
      auto w = p.mutable_values();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double grad = (g.empty() ? 0.0 : static_cast<double>(g[j])) + cfg_.weight_decay * static_cast<double>(w[j]);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad * grad;
        const double mh = m[j] / bc1, vh = v[j] / bc2;
        w[j] = static_cast<T>(static_cast<double>(w[j]) - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

 private:
  std::vector<NamedTensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace fconv

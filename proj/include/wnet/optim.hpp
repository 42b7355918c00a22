// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>

#include "wnet/nn.hpp"

namespace wnet {

struct AdamConfig {
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Decoupled: params <- params - lr * weight_decay * params before the Adam update.
  double weight_decay = 1e-5;
};

/// lr = initial * decay^epoch.
inline double lr_schedule(double initial, double decay, Index epoch) {
  return initial * std::pow(decay, static_cast<double>(epoch));
}

template <class T>
struct AdamMoments {
  Tensor<T> m, v;
};

/// Adam over every trainable parameter of one ParameterSet. Parameters the
/// gradient map does not mention are stepped with a zero gradient.
template <class T>
class Adam {
 public:
  Adam(ParameterSet<T>& params, AdamConfig cfg = {}) : params_(&params), cfg_(cfg) {
    for (auto& p : params) {
      if (p.trainable) moments_.emplace(p.name, AdamMoments<T>{Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())});
    }
  }

  const AdamConfig& config() const noexcept { return cfg_; }
  Index steps() const noexcept { return step_; }
  std::map<std::string, AdamMoments<T>>& moments() noexcept { return moments_; }
  const std::map<std::string, AdamMoments<T>>& moments() const noexcept { return moments_; }
  void set_steps(Index s) { step_ = s; }

  void step(const GradientMap<T>& grads, double lr) {
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& p : *params_) {
      if (!p.trainable) continue;
      auto& mom = moments_.at(p.name);
      const Tensor<T>* g = grads.contains(p) ? &grads.of(p) : nullptr;
      if (g && g->shape() != p.value.shape()) throw ShapeError("gradient shape mismatch for '" + p.name + "'");
      T* w = p.value.data();
      T* m = mom.m.data();
      T* v = mom.v.data();
      for (Index i = 0; i < p.value.size(); ++i) {
        const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
        double wi = static_cast<double>(w[i]);
        wi -= lr * cfg_.weight_decay * wi;
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        wi -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.epsilon);
        w[i] = static_cast<T>(wi);
      }
    }
  }

 private:
  ParameterSet<T>* params_;
  AdamConfig cfg_;
  std::map<std::string, AdamMoments<T>> moments_;
  Index step_ = 0;
};

}  // namespace wnet

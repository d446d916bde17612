// Named parameters and the Adam update. Parameters carry their own moment
// buffers so a checkpointed model can be rebuilt and trained further
// without an external optimizer registry.
#pragma once

#include <cmath>
#include <string>

#include "dmg/tensor.hpp"

namespace dmg {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> m, v;  // Adam moments, sized on first step

  void init(std::string n, Tensor<T> t) {
    name = std::move(n);
    value = std::move(t);
    value.set_requires_grad(true);
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Stepwise-constant decay: the base rate halves every 50 epochs.
inline double lr_schedule(int epoch, double base_lr) {
  require(epoch >= 0, "lr_schedule: epoch must be non-negative");
  require(base_lr > 0.0, "lr_schedule: base_lr must be positive");
  return base_lr * std::pow(0.5, epoch / 50);
}

// One bias-corrected Adam update over params in registration order. step is
// 1-based. Parameters whose gradient buffer was never touched are treated
// as having zero gradient.
template <class T>
void adam_step(const std::vector<Parameter<T>*>& params, const AdamConfig& cfg, int64_t step) {
  require(step >= 1, "adam_step: step is 1-based");
  double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (Parameter<T>* p : params) {
    auto data = p->value.handle();
    int64_t n = p->value.numel();
    if (p->m.empty()) {
      p->m.assign(static_cast<size_t>(n), T(0));
      p->v.assign(static_cast<size_t>(n), T(0));
    }
    T* w = data->values.data();
    const T* g = data->grad.empty() ? nullptr : data->grad.data();
    for (int64_t i = 0; i < n; ++i) {
      double gi = g ? static_cast<double>(g[i]) : 0.0;
      double mi = cfg.beta1 * static_cast<double>(p->m[i]) + (1.0 - cfg.beta1) * gi;
      double vi = cfg.beta2 * static_cast<double>(p->v[i]) + (1.0 - cfg.beta2) * gi * gi;
      p->m[i] = static_cast<T>(mi);
      p->v[i] = static_cast<T>(vi);
      double mhat = mi / c1;
      double vhat = vi / c2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <class T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (Parameter<T>* p : params) p->value.zero_grad();
}

}  // namespace dmg

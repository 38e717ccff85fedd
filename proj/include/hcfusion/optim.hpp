#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "hcfusion/config.hpp"
#include "hcfusion/layers.hpp"

namespace hcfusion {

/// Cosine-annealed learning rate, one anneal over the whole run.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) return cfg.lr_init;
  if (step >= total_steps) return cfg.lr_final;
  if (step == 0) return cfg.lr_init;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Param<T>*>& params, double max_norm) {
  double sq = 0;
  for (const auto* p : params)
    for (T g : p->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto* p : params)
      for (T& g : p->grad.values()) g *= s;
  }
  return norm;
}

/// Adaptive moment estimation with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(const std::vector<Param<T>*>& params, double lr) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->value.numel(), 0.0);
        v_.emplace_back(p->value.numel(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = p.grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        if (lr == 0.0) continue;
        double w = p.value[i];
        w -= lr * wd_ * w;
        w -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        p.value[i] = static_cast<T>(w);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace hcfusion

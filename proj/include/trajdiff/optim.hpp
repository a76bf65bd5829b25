#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "trajdiff/nn.hpp"

namespace trajdiff {

/// Adam with bias correction; learning rate supplied per step.
template <typename T>
class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(nn::ParamStore<T>& ps, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < ps.values.size(); ++i) {
      const double g = ps.grads[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      ps.values[i] = static_cast<T>(ps.values[i] - lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_));
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Linear warmup then cosine decay to zero.
inline double cosine_lr(double base, long step, long total, long warmup) {
  if (warmup > 0 && step < warmup) return base * (step + 1) / double(warmup);
  if (total <= warmup) return base;
  double progress = double(step - warmup) / double(total - warmup);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

/// Scales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(nn::ParamStore<T>& ps, double max_norm) {
  double sq = 0.0;
  for (T g : ps.grads) sq += double(g) * g;
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (T& g : ps.grads) g *= scale;
  }
  return norm;
}

}  // namespace trajdiff

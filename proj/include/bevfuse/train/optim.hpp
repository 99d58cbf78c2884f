#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "bevfuse/diffcore/parameters.hpp"

namespace bevfuse::train {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
///   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  std::size_t steps() const { return t_; }

  void step(diff::ParameterStore& params, const diff::GradMap& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const diff::Tensor& g = git->second;
      if (g.shape() != p.shape()) throw diff::ShapeError("adamw: gradient shape mismatch for " + name);
      auto& [m, v] = state_[name];
      if (m.shape() != p.shape()) {
        m = diff::Tensor(p.shape());
        v = diff::Tensor(p.shape());
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        p[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * p[i]);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<diff::Tensor, diff::Tensor>> state_;
};

/// Linear warmup to the peak over `warmup_steps`, then cosine to zero at
/// `total_steps`. Steps are 0-based optimizer updates.
struct OneCycleSchedule {
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 1;
  std::size_t total_steps = 1;

  double operator()(std::size_t step) const {
    if (total_steps == 0 || warmup_steps > total_steps) {
      throw std::invalid_argument("schedule: need 0 < warmup <= total steps");
    }
    if (step < warmup_steps) {
      return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const std::size_t decay = total_steps - warmup_steps;
    if (decay == 0) return 0.0;
    const double t = std::min(1.0, static_cast<double>(step + 1 - warmup_steps) / static_cast<double>(decay));
    return 0.5 * peak_lr * (1.0 + std::cos(std::numbers::pi * t));
  }
};

}  // namespace bevfuse::train

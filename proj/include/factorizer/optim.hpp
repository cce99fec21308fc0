#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "factorizer/autodiff.hpp"

namespace factorizer {

/// Linear warmup to base_lr, then cosine decay toward 0 at the final step.
inline double lr_at(double base_lr, int64_t step, int64_t warmup_steps, int64_t total_steps) {
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Adaptive moments with decoupled weight decay. Norm gains/offsets, biases
/// and the positional embedding are excluded from decay.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Var<T>>>& params, AdamWConfig cfg)
      : params_(&params), cfg_(cfg) {
    for (auto& [name, v] : params) {
      m_.push_back(Tensor<double>::zeros(v.value().shape()));
      v_.push_back(Tensor<double>::zeros(v.value().shape()));
      decayed_.push_back(decays(name));
    }
  }

  static bool decays(const std::string& name) {
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) return false;
    if (name.find("norm") != std::string::npos) return false;
    if (name.find("pos_embed") != std::string::npos) return false;
    return true;
  }

  int64_t step_count() const { return t_; }

  /// One update over every parameter; consumes and clears gradients.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_->size(); ++i) {
      Var<T>& p = (*params_)[i].second;
      const Tensor<T>& grad = p.grad();
      Tensor<T> value = p.value().clone();
      auto pv = value.mutable_data();
      auto pg = grad.data();
      auto pm = m_[i].mutable_data();
      auto pvv = v_[i].mutable_data();
      const double wd = decayed_[i] ? cfg_.weight_decay : 0.0;
      for (size_t j = 0; j < pv.size(); ++j) {
        const double g = static_cast<double>(pg[j]);
        pm[j] = cfg_.beta1 * pm[j] + (1.0 - cfg_.beta1) * g;
        pvv[j] = cfg_.beta2 * pvv[j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = pm[j] / bc1;
        const double vhat = pvv[j] / bc2;
        const double theta = static_cast<double>(pv[j]);
        pv[j] = static_cast<T>(theta - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * theta));
      }
      p.set_value(std::move(value));
      p.zero_grad();
    }
  }

 private:
  std::vector<std::pair<std::string, Var<T>>>* params_;
  AdamWConfig cfg_;
  std::vector<Tensor<double>> m_, v_;
  std::vector<char> decayed_;
  int64_t t_ = 0;
};

}  // namespace factorizer

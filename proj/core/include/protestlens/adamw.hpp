#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "protestlens/tensor.hpp"

namespace protestlens {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (lr <= 0.0) throw ValueError("adamw: lr must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ValueError("adamw: betas must lie in [0, 1)");
    }
    if (eps <= 0.0) throw ValueError("adamw: eps must be > 0");
    if (weight_decay < 0.0) throw ValueError("adamw: weight_decay must be >= 0");
  }
};

/// Decoupled-weight-decay Adam. Decay multiplies the parameter by
/// (1 - lr * weight_decay) before the bias-corrected moment update, so
/// decay never flows through the moment estimates.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWConfig config)
      : params_(std::move(params)), config_(config) {
    config_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor<T>& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void step() { step(config_.lr); }

  /// Applies one update with an externally scheduled learning rate.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const T decay_mul = static_cast<T>(1.0 - lr * config_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (!p.has_grad()) {
        throw StateError("adamw: parameter " + std::to_string(i) + " of shape " +
                         shape_to_string(p.shape()) +
                         " has no gradient; run backward first");
      }
      auto pv = p.data();
      auto gv = p.grad();
      std::vector<T>& m = m_[i];
      std::vector<T>& v = v_[i];
      for (std::size_t j = 0; j < pv.size(); ++j) {
        const double g = static_cast<double>(gv[j]);
        pv[j] *= decay_mul;
        m[j] = static_cast<T>(config_.beta1 * m[j] + (1.0 - config_.beta1) * g);
        v[j] = static_cast<T>(config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g);
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        pv[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + config_.eps));
      }
    }
  }

  void zero_grad() {
    for (Tensor<T>& p : params_) p.zero_grad();
  }

  std::size_t step_count() const { return t_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamWConfig config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::size_t t_ = 0;
};

}  // namespace protestlens

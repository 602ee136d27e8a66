#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "simmdg/diffcalc.hpp"
#include "simmdg/errors.hpp"

namespace simmdg {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of leaf parameters.
class Adam {
 public:
  Adam(std::vector<ad::Node> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape().rows, p.shape().cols);
      v_.emplace_back(p.shape().rows, p.shape().cols);
    }
  }

  /// Applies one update from the parameters' current gradients. A non-finite
  /// gradient aborts before any parameter changes.
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      for (double g : params_[i].grad().values()) {
        if (!std::isfinite(g)) {
          throw TrainingError("adam: non-finite gradient in parameter " + std::to_string(i) +
                              " at step " + std::to_string(t_ + 1));
        }
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& g = params_[i].grad();
      auto& w = params_[i].mutable_value();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        w[k] -= cfg_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<ad::Node> params_;
  AdamConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t t_ = 0;
};

}  // namespace simmdg

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cscde/autodiff.hpp"
#include "cscde/errors.hpp"

namespace cscde {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with bias correction. Weight decay is decoupled: p <- p - lr*wd*p is
/// applied before, and independently of, the adaptive step.
template <typename Real>
class AdamW {
 public:
  AdamW(std::vector<Param<Real>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  std::size_t steps() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  const Tensor<Real>& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor<Real>& second_moment(std::size_t i) const { return v_[i]; }

  void step() {
    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param<Real>& p = *params_[i];
      if (!p.trainable) continue;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      Real* w = p.value.data();
      const Real* g = p.grad.data();
      Real* m = m_[i].data();
      Real* v = v_[i].data();
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double gk = g[k];
        const double mk = b1 * m[k] + (1 - b1) * gk;
        const double vk = b2 * v[k] + (1 - b2) * gk * gk;
        m[k] = static_cast<Real>(mk);
        v[k] = static_cast<Real>(vk);
        const double wd = static_cast<double>(w[k]) * decay;
        w[k] = static_cast<Real>(wd - cfg_.lr * (mk / c1) / (std::sqrt(vk / c2) + cfg_.eps));
      }
    }
  }

 private:
  std::vector<Param<Real>*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<Real>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace cscde

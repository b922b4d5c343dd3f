#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cscde/autodiff.hpp"
#include "cscde/rng.hpp"

namespace cscde {

/// Kaiming-uniform (fan-in, ReLU gain) kernel of shape (c_out, c_in, k, k).
template <typename Real>
Tensor<Real> kaiming_uniform(std::size_t c_out, std::size_t c_in, std::size_t k, SplitMix64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(c_in * k * k));
  return random_uniform<Real>(Shape{c_out, c_in, k, k}, rng, -bound, bound);
}

/// Batch norm with learnable affine parameters and running statistics.
template <typename Real>
struct BatchNormLayer {
  Param<Real> gamma;
  Param<Real> beta;
  Tensor<Real> running_mean;
  Tensor<Real> running_var;

  BatchNormLayer() = default;
  BatchNormLayer(const std::string& prefix, std::size_t channels) {
    BNState<Real> init(channels);
    gamma = Param<Real>(prefix + ".gamma", init.gamma);
    beta = Param<Real>(prefix + ".beta", init.beta);
    running_mean = init.running_mean;
    running_var = init.running_var;
  }

  std::size_t channels() const { return gamma.value.size(); }

  Var operator()(Tape<Real>& t, Var x, Mode mode) {
    return ad::batch_norm(t, x, t.param(gamma), t.param(beta), running_mean, running_var, mode);
  }

  Tensor<Real> operator()(const Tensor<Real>& x, Mode mode) {
    return batch_norm_forward(x, gamma.value, beta.value, running_mean, running_var, mode,
                              static_cast<BNSaved<Real>*>(nullptr));
  }

  void collect(std::vector<Param<Real>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void collect_buffers(std::vector<std::pair<std::string, Tensor<Real>*>>& out) {
    const std::string prefix = gamma.name.substr(0, gamma.name.rfind('.'));
    out.emplace_back(prefix + ".running_mean", &running_mean);
    out.emplace_back(prefix + ".running_var", &running_var);
  }
};

}  // namespace cscde

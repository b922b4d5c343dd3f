#pragma once

// Multi-layer convolutional sparse coding block.
//
// Encode pass:
//   gamma1 = ReLU(BN(c1 * conv(x, W1) + b1))
//   gamma2 = ReLU(BN(c2 * conv(gamma1, W2) + b2))
// followed by T refinement iterations, each a projected gradient step on the
// two-layer reconstruction residual:
//   gamma1 = convT(gamma2, W2)
//   gamma1 = ReLU(gamma1 - c1 * conv(convT(gamma1, W1) - x, W1) + b1)
//   gamma2 = ReLU(gamma2 - c2 * conv(convT(gamma2, W2) - gamma1, W2) + b2)
//
// With a negative offset b = -lambda the ReLU is the nonnegative
// soft-threshold, which makes each refinement step one layered ISTA step.
// Batch norm only runs in the encode pass. The residual conv in the gamma1
// update uses the block stride like every other call; with stride 1 this is
// identical to a unit-stride conv.

#include <cstddef>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "cscde/autodiff.hpp"
#include "cscde/layers.hpp"
#include "cscde/ops.hpp"

namespace cscde {

template <typename Real>
struct MLBlock {
  Param<Real> w1;  // (d1, c_in, k, k)
  Param<Real> w2;  // (d2, d1, k, k)
  Param<Real> c1;  // scalar step sizes
  Param<Real> c2;
  Param<Real> b1;  // (1, d1, 1, 1) offsets
  Param<Real> b2;  // (1, d2, 1, 1)
  BatchNormLayer<Real> bn1;
  BatchNormLayer<Real> bn2;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t iterations = 0;

  MLBlock() = default;

  /// Kaiming-uniform kernels, c1 = c2 = 1, zero offsets, identity batch norms.
  static MLBlock create(const std::string& prefix, std::size_t in_channels, std::size_t d1,
                        std::size_t d2, std::size_t kernel, std::size_t stride,
                        std::size_t padding, std::size_t iterations, SplitMix64& rng) {
    MLBlock b;
    b.w1 = Param<Real>(prefix + ".w1", kaiming_uniform<Real>(d1, in_channels, kernel, rng));
    b.w2 = Param<Real>(prefix + ".w2", kaiming_uniform<Real>(d2, d1, kernel, rng));
    b.c1 = Param<Real>(prefix + ".c1", Tensor<Real>::scalar(1));
    b.c2 = Param<Real>(prefix + ".c2", Tensor<Real>::scalar(1));
    b.b1 = Param<Real>(prefix + ".b1", Tensor<Real>(Shape{1, d1, 1, 1}));
    b.b2 = Param<Real>(prefix + ".b2", Tensor<Real>(Shape{1, d2, 1, 1}));
    b.bn1 = BatchNormLayer<Real>(prefix + ".bn1", d1);
    b.bn2 = BatchNormLayer<Real>(prefix + ".bn2", d2);
    b.stride = stride;
    b.padding = padding;
    b.iterations = iterations;
    b.validate();
    return b;
  }

  ConvGeom geom() const { return {stride, padding}; }
  std::size_t in_channels() const { return w1.value.c(); }
  std::size_t d1() const { return w1.value.n(); }
  std::size_t d2() const { return w2.value.n(); }

  void validate() const {
    if (w2.value.c() != w1.value.n()) {
      throw ShapeError("ML-block: W2 " + w2.value.shape().str() + " does not consume W1 output " +
                       w1.value.shape().str());
    }
    if (b1.value.size() != d1() || b2.value.size() != d2()) {
      throw ShapeError("ML-block: offset lengths do not match kernel outputs");
    }
    if (c1.value.size() != 1 || c2.value.size() != 1) {
      throw ShapeError("ML-block: c1 and c2 must be scalars");
    }
    if (stride == 0) throw ShapeError("ML-block: stride must be positive");
  }

  void collect(std::vector<Param<Real>*>& out) {
    for (Param<Real>* p : {&w1, &w2, &c1, &c2, &b1, &b2}) out.push_back(p);
    bn1.collect(out);
    bn2.collect(out);
  }
  void collect_buffers(std::vector<std::pair<std::string, Tensor<Real>*>>& out) {
    bn1.collect_buffers(out);
    bn2.collect_buffers(out);
  }
};

template <typename Real>
struct MLSnapshot {
  Tensor<Real> gamma1;
  Tensor<Real> gamma2;
  double sparsity_gamma1 = 0;
  double sparsity_gamma2 = 0;
  double residual_norm = 0;  // ||convT(convT(gamma2, W2), W1) - x||
};

/// Snapshot 0 is the encode pass, snapshot t the t-th refinement.
template <typename Real>
struct MLBlockTrace {
  std::vector<MLSnapshot<Real>> snapshots;
};

/// Fraction of entries with |v| <= tol.
template <typename Real>
double sparsity(const Tensor<Real>& t, double tol = 0.0) {
  if (t.size() == 0) return 1.0;
  std::size_t zeros = 0;
  for (Real v : t.vec()) zeros += std::abs(static_cast<double>(v)) <= tol ? 1 : 0;
  return static_cast<double>(zeros) / static_cast<double>(t.size());
}

namespace detail {

template <typename Real>
std::pair<std::size_t, std::size_t> hw(const Tensor<Real>& t) {
  return {t.h(), t.w()};
}

template <typename Real>
MLSnapshot<Real> snapshot(const Tensor<Real>& x, const Tensor<Real>& g1, const Tensor<Real>& g2,
                          const MLBlock<Real>& p) {
  const Tensor<Real> mid = conv_transpose2d(g2, p.w2.value, p.geom(), hw(g1));
  const Tensor<Real> recon = conv_transpose2d(mid, p.w1.value, p.geom(), hw(x));
  return {g1, g2, sparsity(g1), sparsity(g2), l2_norm(recon - x)};
}

}  // namespace detail

/// Two-layer encode pass. Scale, then offset, then batch norm, then ReLU.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> ml_encode(const Tensor<Real>& x, MLBlock<Real>& p,
                                                Mode mode) {
  const ConvGeom g = p.geom();
  Tensor<Real> z1 = scale(conv2d(x, p.w1.value, g), p.c1.value[0]);
  Tensor<Real> gamma1 = relu(p.bn1(add_channel_bias(std::move(z1), p.b1.value), mode));
  Tensor<Real> z2 = scale(conv2d(gamma1, p.w2.value, g), p.c2.value[0]);
  Tensor<Real> gamma2 = relu(p.bn2(add_channel_bias(std::move(z2), p.b2.value), mode));
  return {std::move(gamma1), std::move(gamma2)};
}

/// One refinement iteration, statement by statement.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> ml_refine(const Tensor<Real>& gamma2, const Tensor<Real>& x,
                                                const MLBlock<Real>& p) {
  const ConvGeom g = p.geom();
  const std::pair g1_hw{conv_out_size(x.h(), p.w1.value.h(), g),
                       conv_out_size(x.w(), p.w1.value.w(), g)};
  const Real c1 = p.c1.value[0];
  const Real c2 = p.c2.value[0];

  Tensor<Real> gamma1 = conv_transpose2d(gamma2, p.w2.value, g, g1_hw);
  Tensor<Real> temp1 = conv_transpose2d(gamma1, p.w1.value, g, detail::hw(x)) - x;
  Tensor<Real> temp2 = conv2d(temp1, p.w1.value, g);
  gamma1 = shrink_step(gamma1, c1, temp2, p.b1.value);
  Tensor<Real> temp3 = conv_transpose2d(gamma2, p.w2.value, g, g1_hw) - gamma1;
  Tensor<Real> temp4 = conv2d(temp3, p.w2.value, g);
  Tensor<Real> next2 = shrink_step(gamma2, c2, temp4, p.b2.value);
  return {std::move(gamma1), std::move(next2)};
}

/// Encode, then p.iterations refinements; returns the final gamma2.
template <typename Real>
Tensor<Real> ml_forward(const Tensor<Real>& x, MLBlock<Real>& p, Mode mode,
                        MLBlockTrace<Real>* trace = nullptr) {
  auto [gamma1, gamma2] = ml_encode(x, p, mode);
  if (trace) trace->snapshots = {detail::snapshot(x, gamma1, gamma2, p)};
  for (std::size_t t = 0; t < p.iterations; ++t) {
    std::tie(gamma1, gamma2) = ml_refine(gamma2, x, p);
    if (trace) trace->snapshots.push_back(detail::snapshot(x, gamma1, gamma2, p));
  }
  return gamma2;
}

/// Differentiable version of ml_forward. convT(gamma2, W2) appears twice per
/// iteration with the same argument, so it is recorded once and reused.
template <typename Real>
Var ml_forward(Tape<Real>& t, Var x, MLBlock<Real>& p, Mode mode,
               MLBlockTrace<Real>* trace = nullptr) {
  const ConvGeom g = p.geom();
  Var w1 = t.param(p.w1);
  Var w2 = t.param(p.w2);
  Var c1 = t.param(p.c1);
  Var c2 = t.param(p.c2);
  Var b1 = t.param(p.b1);
  Var b2 = t.param(p.b2);

  Var gamma1 = ad::relu(
      t, p.bn1(t, ad::add_channel_bias(t, ad::scalar_mul(t, c1, ad::conv2d(t, x, w1, g)), b1),
               mode));
  Var gamma2 = ad::relu(
      t, p.bn2(t, ad::add_channel_bias(t, ad::scalar_mul(t, c2, ad::conv2d(t, gamma1, w2, g)), b2),
               mode));
  const auto x_hw = detail::hw(t.value(x));
  const auto g1_hw = detail::hw(t.value(gamma1));
  if (trace) trace->snapshots = {detail::snapshot(t.value(x), t.value(gamma1), t.value(gamma2), p)};

  for (std::size_t it = 0; it < p.iterations; ++it) {
    Var up = ad::conv_transpose2d(t, gamma2, w2, g, g1_hw);
    Var temp1 = ad::sub(t, ad::conv_transpose2d(t, up, w1, g, x_hw), x);
    Var temp2 = ad::conv2d(t, temp1, w1, g);
    gamma1 = ad::shrink_step(t, up, c1, temp2, b1);
    Var temp3 = ad::sub(t, up, gamma1);
    Var temp4 = ad::conv2d(t, temp3, w2, g);
    gamma2 = ad::shrink_step(t, gamma2, c2, temp4, b2);
    if (trace) {
      trace->snapshots.push_back(detail::snapshot(t.value(x), t.value(gamma1), t.value(gamma2), p));
    }
  }
  return gamma2;
}

/// CSV with columns iteration, sparsity_gamma1, sparsity_gamma2, residual_norm.
template <typename Real>
void write_trace_csv(std::ostream& os, const MLBlockTrace<Real>& trace) {
  os << "iteration,sparsity_gamma1,sparsity_gamma2,residual_norm\n";
  const auto old = os.precision(10);
  for (std::size_t i = 0; i < trace.snapshots.size(); ++i) {
    const auto& s = trace.snapshots[i];
    os << i << ',' << s.sparsity_gamma1 << ',' << s.sparsity_gamma2 << ',' << s.residual_norm
       << '\n';
  }
  os.precision(old);
}

}  // namespace cscde

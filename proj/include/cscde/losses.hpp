#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cscde/autodiff.hpp"
#include "cscde/errors.hpp"
#include "cscde/ops.hpp"

namespace cscde {

namespace detail {

template <typename Real>
void check_labels(const Tensor<Real>& logits, const LabelMap& labels, const char* who) {
  if (labels.n() != logits.n() || labels.c() != 1 || labels.h() != logits.h() ||
      labels.w() != logits.w()) {
    throw ShapeError(std::string(who) + ": labels " + labels.shape().str() +
                     " do not match logits " + logits.shape().str());
  }
  for (std::uint8_t v : labels.vec()) {
    if (v >= logits.c()) {
      throw DataError(std::string(who) + ": label " + std::to_string(v) + " outside [0, " +
                      std::to_string(logits.c()) + ")");
    }
  }
}

}  // namespace detail

/// Mean over pixels of -log softmax(logits)[label].
template <typename Real>
Var cross_entropy_loss(Tape<Real>& t, Var logits, const LabelMap& labels) {
  const Tensor<Real>& z = t.value(logits);
  detail::check_labels(z, labels, "cross_entropy_loss");
  const Shape s = z.shape();
  const std::size_t hw = s.plane();
  double total = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      double mx = -INFINITY;
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, double(z.plane(n, c)[i]));
      double sum = 0;
      for (std::size_t c = 0; c < s.c; ++c) sum += std::exp(double(z.plane(n, c)[i]) - mx);
      const std::size_t y = labels.plane(n, 0)[i];
      total += (std::log(sum) + mx) - double(z.plane(n, y)[i]);
    }
  }
  const double count = static_cast<double>(s.n * hw);
  return t.record(Tensor<Real>::scalar(static_cast<Real>(total / count)), {logits},
                  [logits, labels, count](Tape<Real>& t, const Tensor<Real>& g) {
                    Tensor<Real> p = softmax_channels(t.value(logits));
                    const Shape s = p.shape();
                    const double k = g[0] / count;
                    for (std::size_t n = 0; n < s.n; ++n) {
                      for (std::size_t i = 0; i < s.plane(); ++i) {
                        const std::size_t y = labels.plane(n, 0)[i];
                        for (std::size_t c = 0; c < s.c; ++c) {
                          Real& v = p.plane(n, c)[i];
                          v = static_cast<Real>(k * (double(v) - (c == y ? 1.0 : 0.0)));
                        }
                      }
                    }
                    t.accumulate(logits, p);
                  });
}

/// 1 - mean_k (2 sum p_k g_k + eps) / (sum p_k + sum g_k + eps) with
/// p = softmax(logits) and g the one-hot labels, summed over batch and space.
template <typename Real>
Var dice_loss(Tape<Real>& t, Var logits, const LabelMap& labels, double eps = 1e-5) {
  const Tensor<Real>& z = t.value(logits);
  detail::check_labels(z, labels, "dice_loss");
  const Shape s = z.shape();
  const std::size_t K = s.c;
  Tensor<Real> p = softmax_channels(z);
  std::vector<double> inter(K, 0.0), psum(K, 0.0), gsum(K, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < K; ++c) {
      const Real* pc = p.plane(n, c);
      const std::uint8_t* lab = labels.plane(n, 0);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        psum[c] += pc[i];
        if (lab[i] == c) {
          inter[c] += pc[i];
          gsum[c] += 1;
        }
      }
    }
  }
  double mean_dice = 0;
  for (std::size_t c = 0; c < K; ++c) {
    mean_dice += (2 * inter[c] + eps) / (psum[c] + gsum[c] + eps);
  }
  mean_dice /= static_cast<double>(K);
  return t.record(
      Tensor<Real>::scalar(static_cast<Real>(1.0 - mean_dice)), {logits},
      [logits, labels, p, inter, psum, gsum, eps](Tape<Real>& t, const Tensor<Real>& g) {
        const Shape s = p.shape();
        const std::size_t K = s.c;
        // dL/dp_{k,i} = -(1/K) * (2 g_{k,i} / S_k - (2 I_k + eps) / S_k^2)
        std::vector<double> a(K), b(K);
        for (std::size_t c = 0; c < K; ++c) {
          const double den = psum[c] + gsum[c] + eps;
          a[c] = -2.0 / (static_cast<double>(K) * den);
          b[c] = (2 * inter[c] + eps) / (static_cast<double>(K) * den * den);
        }
        Tensor<Real> gz(s);
        std::vector<double> dp(K);
        for (std::size_t n = 0; n < s.n; ++n) {
          const std::uint8_t* lab = labels.plane(n, 0);
          for (std::size_t i = 0; i < s.plane(); ++i) {
            double inner = 0;
            for (std::size_t c = 0; c < K; ++c) {
              dp[c] = g[0] * ((lab[i] == c ? a[c] : 0.0) + b[c]);
              inner += dp[c] * p.plane(n, c)[i];
            }
            for (std::size_t c = 0; c < K; ++c) {
              gz.plane(n, c)[i] = static_cast<Real>(p.plane(n, c)[i] * (dp[c] - inner));
            }
          }
        }
        t.accumulate(logits, gz);
      });
}

}  // namespace cscde

#pragma once

// Reference computations used only for verification. They deliberately take
// the slow, obvious route (direct summation, all-pairs distances) and share no
// code with the implementations they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "cscde/tensor.hpp"

namespace cscde::oracle {

/// Direct 7-loop cross-correlation.
template <typename Real>
Tensor<Real> conv2d_direct(const Tensor<Real>& x, const Tensor<Real>& k, std::size_t stride,
                           std::size_t pad) {
  const std::size_t oh = (x.h() + 2 * pad - k.h()) / stride + 1;
  const std::size_t ow = (x.w() + 2 * pad - k.w()) / stride + 1;
  Tensor<Real> y(Shape{x.n(), k.n(), oh, ow});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t co = 0; co < k.n(); ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          long double acc = 0;
          for (std::size_t ci = 0; ci < k.c(); ++ci)
            for (std::size_t ky = 0; ky < k.h(); ++ky)
              for (std::size_t kx = 0; kx < k.w(); ++kx) {
                const long iy = long(oy * stride + ky) - long(pad);
                const long ix = long(ox * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(x.h()) || ix >= long(x.w())) continue;
                acc += static_cast<long double>(x.at(n, ci, iy, ix)) * k.at(co, ci, ky, kx);
              }
          y.at(n, co, oy, ox) = static_cast<Real>(acc);
        }
  return y;
}

/// Nonnegative soft-threshold max(0, v - lambda).
inline std::vector<double> nonneg_soft_threshold(const std::vector<double>& v, double lambda) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lambda > 0 ? v[i] - lambda : 0.0;
  return out;
}

/// 95th percentile, linear interpolation between order statistics.
inline double percentile95(std::vector<double> d) {
  if (d.empty()) return 0.0;
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (d[hi] - d[lo]) * (pos - static_cast<double>(lo));
}

/// HD95 by comparing every boundary pixel against every other boundary pixel.
inline double hd95_all_pairs(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls) {
  const long H = static_cast<long>(pred.h());
  const long W = static_cast<long>(pred.w());
  auto boundary = [&](const LabelMap& m) {
    std::vector<std::pair<long, long>> pts;
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        if (m.at(0, 0, y, x) != cls) continue;
        bool edge = false;
        for (long dy = -1; dy <= 1 && !edge; ++dy)
          for (long dx = -1; dx <= 1 && !edge; ++dx) {
            const long yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= H || xx >= W || m.at(0, 0, yy, xx) != cls) edge = true;
          }
        if (edge) pts.emplace_back(y, x);
      }
    return pts;
  };
  const auto a = boundary(pred);
  const auto b = boundary(gt);
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) return std::sqrt(double(H * H + W * W));
  std::vector<double> d;
  auto directed = [&](const auto& from, const auto& to) {
    for (auto [y, x] : from) {
      long best = -1;
      for (auto [v, u] : to) {
        const long dd = (y - v) * (y - v) + (x - u) * (x - u);
        if (best < 0 || dd < best) best = dd;
      }
      d.push_back(std::sqrt(static_cast<double>(best)));
    }
  };
  directed(a, b);
  directed(b, a);
  return percentile95(std::move(d));
}

}  // namespace cscde::oracle

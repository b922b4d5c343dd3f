#pragma once

// Dense NCHW operators: convolution and its exact adjoint, pointwise maps,
// batch normalization, bilinear 2x upsampling and channel concatenation.
// Each operator that the autodiff tape needs to differentiate also exposes its
// backward kernel here so the tape stays a thin bookkeeping layer.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cscde/errors.hpp"
#include "cscde/tensor.hpp"

namespace cscde {

enum class Mode { Train, Eval };

struct ConvGeom {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Kernel of shape (c_out, c_in, k_h, k_w) plus its stride and padding.
template <typename Real>
struct ConvSpec {
  Tensor<Real> kernel;
  std::size_t stride = 1;
  std::size_t padding = 0;

  ConvGeom geom() const { return {stride, padding}; }
};

/// floor((in + 2p - k) / s) + 1, rejecting non-positive results.
inline std::size_t conv_out_size(std::size_t in, std::size_t k, ConvGeom g) {
  if (g.stride == 0) throw ShapeError("conv stride must be positive");
  if (in + 2 * g.padding < k) {
    throw ShapeError("conv kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * g.padding));
  }
  return (in + 2 * g.padding - k) / g.stride + 1;
}

namespace detail {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;

struct Geometry {
  std::size_t c, h, w;     // input plane stack
  std::size_t kh, kw;      // kernel
  std::size_t oh, ow;      // output plane
  std::size_t stride, pad;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return oh * ow; }
};

// Output columns [lo, hi) whose tap at kernel offset k lands inside [0, in).
struct TapRange {
  std::size_t lo, hi;
};

inline TapRange valid_range(std::size_t k, std::size_t in, std::size_t out, std::size_t stride,
                            std::size_t pad) {
  const std::size_t lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  const std::size_t hi =
      in + pad <= k ? 0 : std::min(out, (in + pad - k + stride - 1) / stride);
  return {std::min(lo, hi), hi};
}

// cols[(ci*kh + ky)*kw + kx][oy*ow + ox] = img[ci][oy*s - p + ky][ox*s - p + kx]
template <typename Real>
void im2col(const Real* img, const Geometry& g, Real* cols) {
  const std::size_t ncol = g.cols();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    const Real* src = img + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const TapRange ry = valid_range(ky, g.h, g.oh, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const TapRange rx = valid_range(kx, g.w, g.ow, g.stride, g.pad);
        Real* dst = cols + ((ci * g.kh + ky) * g.kw + kx) * ncol;
        std::fill(dst, dst + ry.lo * g.ow, Real(0));
        for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
          const Real* srow = src + (oy * g.stride + ky - g.pad) * g.w;
          Real* row = dst + oy * g.ow;
          std::fill(row, row + rx.lo, Real(0));
          if (g.stride == 1) {
            const Real* first = srow + (rx.lo + kx - g.pad);
            std::copy(first, first + (rx.hi - rx.lo), row + rx.lo);
          } else {
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) row[ox] = srow[ox * g.stride + kx - g.pad];
          }
          std::fill(row + rx.hi, row + g.ow, Real(0));
        }
        std::fill(dst + ry.hi * g.ow, dst + ncol, Real(0));
      }
    }
  }
}

// Transpose of im2col: scatter-add columns back into the (zeroed) image.
template <typename Real>
void col2im(const Real* cols, const Geometry& g, Real* img) {
  const std::size_t ncol = g.cols();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    Real* dst = img + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const TapRange ry = valid_range(ky, g.h, g.oh, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const TapRange rx = valid_range(kx, g.w, g.ow, g.stride, g.pad);
        const Real* src = cols + ((ci * g.kh + ky) * g.kw + kx) * ncol;
        for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
          Real* drow = dst + (oy * g.stride + ky - g.pad) * g.w;
          const Real* srow = src + oy * g.ow;
          if (g.stride == 1) {
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) drow[ox + kx - g.pad] += srow[ox];
          } else {
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) drow[ox * g.stride + kx - g.pad] += srow[ox];
          }
        }
      }
    }
  }
}

// Unit-stride convolution without im2col. The padded input is stored channel
// major with every image's plane side by side, so each kernel tap reads one
// shifted contiguous window and the whole batch becomes a single GEMM per tap.
// Columns past the valid output width (and the tail of each plane) hold junk
// that is cropped away.
template <typename Real>
struct WideLayout {
  std::size_t n, c, h, w, kh, kw, pad;
  std::size_t hp() const { return h + 2 * pad; }
  std::size_t wp() const { return w + 2 * pad; }
  std::size_t oh() const { return hp() - kh + 1; }
  std::size_t ow() const { return wp() - kw + 1; }
  std::size_t plane() const { return hp() * wp(); }
  std::size_t cols() const { return n * plane(); }
  // Slack so the last tap window never reads past the buffer.
  std::size_t stride() const { return cols() + (kh - 1) * wp() + kw; }
};

template <typename Real>
std::vector<Real> pad_wide(const Tensor<Real>& x, const WideLayout<Real>& L) {
  std::vector<Real> buf(L.c * L.stride(), Real(0));
  for (std::size_t ci = 0; ci < L.c; ++ci)
    for (std::size_t n = 0; n < L.n; ++n) {
      const Real* src = x.plane(n, ci);
      Real* dst = buf.data() + ci * L.stride() + n * L.plane() + L.pad * L.wp() + L.pad;
      for (std::size_t y = 0; y < L.h; ++y) std::copy(src + y * L.w, src + (y + 1) * L.w, dst + y * L.wp());
    }
  return buf;
}

// Output-side layout: out rows of width wp, one plane of hp rows per image.
template <typename Real>
std::vector<Real> spread_wide(const Tensor<Real>& g, const WideLayout<Real>& L) {
  std::vector<Real> buf(g.c() * L.cols(), Real(0));
  for (std::size_t co = 0; co < g.c(); ++co)
    for (std::size_t n = 0; n < L.n; ++n) {
      const Real* src = g.plane(n, co);
      Real* dst = buf.data() + co * L.cols() + n * L.plane();
      for (std::size_t y = 0; y < L.oh(); ++y)
        std::copy(src + y * L.ow(), src + (y + 1) * L.ow(), dst + y * L.wp());
    }
  return buf;
}

// taps[t] is the (co x ci) slice of the kernel at tap t = ky*kw + kx.
template <typename Real>
std::vector<Real> kernel_taps(const Tensor<Real>& k) {
  const Shape& s = k.shape();
  const std::size_t nt = s.h * s.w;
  std::vector<Real> taps(nt * s.n * s.c);
  for (std::size_t co = 0; co < s.n; ++co)
    for (std::size_t ci = 0; ci < s.c; ++ci)
      for (std::size_t t = 0; t < nt; ++t) taps[(t * s.n + co) * s.c + ci] = k.data()[(co * s.c + ci) * nt + t];
  return taps;
}

template <typename Real>
Tensor<Real> conv2d_unit_stride(const Tensor<Real>& x, const Tensor<Real>& kernel, std::size_t pad) {
  const Shape& ks = kernel.shape();
  const WideLayout<Real> L{x.n(), x.c(), x.h(), x.w(), ks.h, ks.w, pad};
  const std::vector<Real> xp = pad_wide(x, L);
  const std::vector<Real> taps = kernel_taps(kernel);
  using Strided = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;
  RowMat<Real> acc = RowMat<Real>::Zero(ks.n, L.cols());
  for (std::size_t ky = 0; ky < ks.h; ++ky)
    for (std::size_t kx = 0; kx < ks.w; ++kx) {
      const std::size_t t = ky * ks.w + kx;
      ConstMatMap<Real> wt(taps.data() + t * ks.n * ks.c, ks.n, ks.c);
      Strided win(xp.data() + ky * L.wp() + kx, ks.c, L.cols(), Eigen::OuterStride<>(L.stride()));
      acc.noalias() += wt * win;
    }
  Tensor<Real> out(Shape{x.n(), ks.n, L.oh(), L.ow()});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t co = 0; co < ks.n; ++co) {
      const Real* src = acc.data() + co * L.cols() + n * L.plane();
      Real* dst = out.plane(n, co);
      for (std::size_t y = 0; y < L.oh(); ++y)
        std::copy(src + y * L.wp(), src + y * L.wp() + L.ow(), dst + y * L.ow());
    }
  return out;
}

template <typename Real>
Tensor<Real> conv2d_weight_grad_unit_stride(const Tensor<Real>& x, const Tensor<Real>& gout,
                                            std::size_t pad, std::size_t kh, std::size_t kw) {
  const WideLayout<Real> L{x.n(), x.c(), x.h(), x.w(), kh, kw, pad};
  const std::vector<Real> xp = pad_wide(x, L);
  const std::vector<Real> gw = spread_wide(gout, L);
  using Strided = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;
  ConstMatMap<Real> gm(gw.data(), gout.c(), L.cols());
  Tensor<Real> dw(Shape{gout.c(), x.c(), kh, kw});
  RowMat<Real> tap(gout.c(), x.c());
  for (std::size_t ky = 0; ky < kh; ++ky)
    for (std::size_t kx = 0; kx < kw; ++kx) {
      Strided win(xp.data() + ky * L.wp() + kx, x.c(), L.cols(), Eigen::OuterStride<>(L.stride()));
      tap.noalias() = gm * win.transpose();
      for (std::size_t co = 0; co < gout.c(); ++co)
        for (std::size_t ci = 0; ci < x.c(); ++ci) dw.at(co, ci, ky, kx) = tap(co, ci);
    }
  return dw;
}

// Per-tap GEMMs with a short inner dimension are dominated by packing, so the
// shifted-window path only pays off once the input is reasonably wide.
inline bool prefer_unit_stride_path(std::size_t cin, std::size_t cout) {
  return (cin >= 8 && cout <= 2 * cin) || (cin >= 4 && cout <= 8);
}

inline bool prefer_unit_stride_wgrad(std::size_t cin, std::size_t cout) {
  return cin >= 8 && 2 * cout <= cin;
}

inline void require_kernel_rank(const Shape& k) {
  if (k.numel() == 0) throw ShapeError("empty convolution kernel " + k.str());
}

}  // namespace detail

/// Cross-correlation without bias. Output spatial size follows conv_out_size.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& kernel, ConvGeom g) {
  const Shape& ks = kernel.shape();
  detail::require_kernel_rank(ks);
  if (x.c() != ks.c) {
    throw ShapeError("conv2d: input " + x.shape().str() + " has " + std::to_string(x.c()) +
                     " channels but kernel " + ks.str() + " expects " + std::to_string(ks.c));
  }
  const std::size_t oh = conv_out_size(x.h(), ks.h, g);
  const std::size_t ow = conv_out_size(x.w(), ks.w, g);
  const detail::Geometry geo{x.c(), x.h(), x.w(), ks.h, ks.w, oh, ow, g.stride, g.padding};

  if (g.stride == 1 && detail::prefer_unit_stride_path(x.c(), ks.n))
    return detail::conv2d_unit_stride(x, kernel, g.padding);
  Tensor<Real> out(Shape{x.n(), ks.n, oh, ow});
  std::vector<Real> cols(geo.rows() * geo.cols());
  detail::ConstMatMap<Real> wm(kernel.data(), ks.n, geo.rows());
  for (std::size_t n = 0; n < x.n(); ++n) {
    detail::im2col(x.plane(n, 0), geo, cols.data());
    detail::ConstMatMap<Real> cm(cols.data(), geo.rows(), geo.cols());
    detail::MatMap<Real> om(out.plane(n, 0), ks.n, geo.cols());
    om.noalias() = wm * cm;
  }
  return out;
}

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const ConvSpec<Real>& spec) {
  return conv2d(x, spec.kernel, spec.geom());
}

/// Smallest input extent whose convolution output is `out`.
inline std::size_t conv_transpose_default_size(std::size_t out, std::size_t k, ConvGeom g) {
  const std::size_t full = (out - 1) * g.stride + k;
  if (full < 2 * g.padding + 1) throw ShapeError("conv_transpose2d: padding exceeds kernel span");
  return full - 2 * g.padding;
}

/// Exact adjoint of conv2d with the same kernel and geometry:
/// <conv2d(x, w), y> == <x, conv_transpose2d(y, w)>.
///
/// With stride > 1 several input sizes share one output size, so the caller may
/// pin the output extent; it must map back to y's extent under conv_out_size.
template <typename Real>
Tensor<Real> conv_transpose2d(const Tensor<Real>& y, const Tensor<Real>& kernel, ConvGeom g,
                              std::optional<std::pair<std::size_t, std::size_t>> out_hw = {}) {
  const Shape& ks = kernel.shape();
  detail::require_kernel_rank(ks);
  if (y.c() != ks.n) {
    throw ShapeError("conv_transpose2d: input " + y.shape().str() + " has " +
                     std::to_string(y.c()) + " channels but kernel " + ks.str() + " produces " +
                     std::to_string(ks.n));
  }
  const std::size_t h = out_hw ? out_hw->first : conv_transpose_default_size(y.h(), ks.h, g);
  const std::size_t w = out_hw ? out_hw->second : conv_transpose_default_size(y.w(), ks.w, g);
  if (conv_out_size(h, ks.h, g) != y.h() || conv_out_size(w, ks.w, g) != y.w()) {
    throw ShapeError("conv_transpose2d: output extent (" + std::to_string(h) + "," +
                     std::to_string(w) + ") does not convolve back to " + y.shape().str());
  }
  if (g.stride == 1 && g.padding < ks.h && g.padding < ks.w && ks.h == ks.w) {
    // Unit stride: the adjoint is a correlation with the spatially flipped,
    // channel-transposed kernel and padding k - 1 - p.
    Tensor<Real> flipped(Shape{ks.c, ks.n, ks.h, ks.w});
    for (std::size_t co = 0; co < ks.n; ++co)
      for (std::size_t ci = 0; ci < ks.c; ++ci)
        for (std::size_t ky = 0; ky < ks.h; ++ky)
          for (std::size_t kx = 0; kx < ks.w; ++kx)
            flipped.at(ci, co, ks.h - 1 - ky, ks.w - 1 - kx) = kernel.at(co, ci, ky, kx);
    return conv2d(y, flipped, ConvGeom{1, ks.h - 1 - g.padding});
  }
  const detail::Geometry geo{ks.c, h, w, ks.h, ks.w, y.h(), y.w(), g.stride, g.padding};
  Tensor<Real> out(Shape{y.n(), ks.c, h, w});
  std::vector<Real> cols(geo.rows() * geo.cols());
  detail::ConstMatMap<Real> wm(kernel.data(), ks.n, geo.rows());
  for (std::size_t n = 0; n < y.n(); ++n) {
    detail::ConstMatMap<Real> ym(y.plane(n, 0), ks.n, geo.cols());
    detail::MatMap<Real> cm(cols.data(), geo.rows(), geo.cols());
    cm.noalias() = wm.transpose() * ym;
    detail::col2im(cols.data(), geo, out.plane(n, 0));
  }
  return out;
}

template <typename Real>
Tensor<Real> conv_transpose2d(const Tensor<Real>& y, const ConvSpec<Real>& spec,
                              std::optional<std::pair<std::size_t, std::size_t>> out_hw = {}) {
  return conv_transpose2d(y, spec.kernel, spec.geom(), out_hw);
}

/// d<conv2d(x, w), gout>/dw, summed over the batch in index order.
template <typename Real>
Tensor<Real> conv2d_weight_grad(const Tensor<Real>& x, const Tensor<Real>& gout, ConvGeom g,
                                std::size_t kh, std::size_t kw) {
  if (x.n() != gout.n()) throw ShapeError("conv2d_weight_grad: batch mismatch");
  const detail::Geometry geo{x.c(), x.h(), x.w(), kh, kw, gout.h(), gout.w(), g.stride,
                             g.padding};
  if (conv_out_size(x.h(), kh, g) != gout.h() || conv_out_size(x.w(), kw, g) != gout.w()) {
    throw ShapeError("conv2d_weight_grad: gradient " + gout.shape().str() +
                     " does not match input " + x.shape().str());
  }
  if (g.stride == 1 && detail::prefer_unit_stride_wgrad(x.c(), gout.c()))
    return detail::conv2d_weight_grad_unit_stride(x, gout, g.padding, kh, kw);
  Tensor<Real> dw(Shape{gout.c(), x.c(), kh, kw});
  detail::MatMap<Real> dwm(dw.data(), gout.c(), geo.rows());
  std::vector<Real> cols(geo.rows() * geo.cols());
  for (std::size_t n = 0; n < x.n(); ++n) {
    detail::im2col(x.plane(n, 0), geo, cols.data());
    detail::ConstMatMap<Real> cm(cols.data(), geo.rows(), geo.cols());
    detail::ConstMatMap<Real> gm(gout.plane(n, 0), gout.c(), geo.cols());
    dwm.noalias() += gm * cm.transpose();
  }
  return dw;
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename Real>
Tensor<Real> relu(Tensor<Real> x) {
  for (auto& v : x.vec()) v = v > Real(0) ? v : Real(0);
  return x;
}

/// Subgradient convention: relu'(0) = 0.
template <typename Real>
Tensor<Real> relu_backward(const Tensor<Real>& x, const Tensor<Real>& gout) {
  Tensor<Real> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > Real(0) ? gout[i] : Real(0);
  return g;
}

/// a - s*b + bias, with bias broadcast per channel.
template <typename Real>
Tensor<Real> shrink_step_pre(const Tensor<Real>& a, Real s, const Tensor<Real>& b,
                             const Tensor<Real>& bias) {
  if (a.shape() != b.shape()) {
    throw ShapeError("shrink_step: " + a.shape().str() + " vs " + b.shape().str());
  }
  if (bias.size() != a.c()) throw ShapeError("shrink_step: bias length must equal channels");
  const std::size_t hw = a.h() * a.w();
  Tensor<Real> out(a.shape());
  for (std::size_t n = 0; n < a.n(); ++n) {
    for (std::size_t c = 0; c < a.c(); ++c) {
      const Real* pa = a.plane(n, c);
      const Real* pb = b.plane(n, c);
      Real* q = out.plane(n, c);
      const Real bc = bias[c];
      for (std::size_t i = 0; i < hw; ++i) q[i] = (pa[i] - s * pb[i]) + bc;
    }
  }
  return out;
}

/// relu(a - s*b + bias).
template <typename Real>
Tensor<Real> shrink_step(const Tensor<Real>& a, Real s, const Tensor<Real>& b,
                         const Tensor<Real>& bias) {
  return relu(shrink_step_pre(a, s, b, bias));
}

template <typename Real>
Tensor<Real> scale(Tensor<Real> x, Real a) {
  return x *= a;
}

namespace detail {
template <typename Real>
void require_channel_vector(const Tensor<Real>& x, const Tensor<Real>& b, const char* op) {
  if (b.size() != x.c()) {
    throw ShapeError(std::string(op) + ": per-channel vector of length " +
                     std::to_string(b.size()) + " does not match " + x.shape().str());
  }
}
}  // namespace detail

/// x[n, c, :, :] += b[c]
template <typename Real>
Tensor<Real> add_channel_bias(Tensor<Real> x, const Tensor<Real>& b) {
  detail::require_channel_vector(x, b, "add_channel_bias");
  const std::size_t hw = x.shape().plane();
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      Real* p = x.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) p[i] += b[c];
    }
  }
  return x;
}

/// Sum over batch and space per channel, returned as a (1, C, 1, 1) tensor.
template <typename Real>
Tensor<Real> channel_sum(const Tensor<Real>& x) {
  Tensor<Real> s(Shape{1, x.c(), 1, 1});
  const std::size_t hw = x.shape().plane();
  for (std::size_t c = 0; c < x.c(); ++c) {
    double acc = 0;
    for (std::size_t n = 0; n < x.n(); ++n) {
      const Real* p = x.plane(n, c);
      acc += lane_sum(hw, [p](std::size_t i) { return p[i]; });
    }
    s[c] = static_cast<Real>(acc);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Affine parameters and running statistics of one batch-norm layer, all
/// stored as (1, C, 1, 1) tensors.
template <typename Real>
struct BNState {
  Tensor<Real> gamma;
  Tensor<Real> beta;
  Tensor<Real> running_mean;
  Tensor<Real> running_var;

  static constexpr double eps = 1e-5;
  static constexpr double momentum = 0.1;

  explicit BNState(std::size_t channels = 0)
      : gamma(Shape{1, channels, 1, 1}, Real(1)),
        beta(Shape{1, channels, 1, 1}),
        running_mean(Shape{1, channels, 1, 1}),
        running_var(Shape{1, channels, 1, 1}, Real(1)) {}

  std::size_t channels() const { return gamma.size(); }
};

/// Values saved by the forward pass for batch_norm_backward.
template <typename Real>
struct BNSaved {
  Tensor<Real> xhat;
  std::vector<double> inv_std;
  Mode mode = Mode::Train;
};

/// Per-channel (x - mean) / sqrt(var + eps) * gamma + beta. Train mode uses the
/// biased batch variance for normalization and folds the unbiased one into the
/// running estimate.
template <typename Real>
Tensor<Real> batch_norm_forward(const Tensor<Real>& x, const Tensor<Real>& gamma,
                                const Tensor<Real>& beta, Tensor<Real>& running_mean,
                                Tensor<Real>& running_var, Mode mode, BNSaved<Real>* saved) {
  const std::size_t C = x.c();
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C ||
      running_var.size() != C) {
    throw ShapeError("batch_norm: state has " + std::to_string(gamma.size()) +
                     " channels, input " + x.shape().str());
  }
  const std::size_t hw = x.shape().plane();
  const std::size_t m = x.n() * hw;
  Tensor<Real> y(x.shape());
  Tensor<Real> xhat(x.shape());
  std::vector<double> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0;
    double var = 0;
    if (mode == Mode::Train) {
      if (m == 0) throw ShapeError("batch_norm: empty batch in train mode");
      for (std::size_t n = 0; n < x.n(); ++n) {
        const Real* p = x.plane(n, c);
        mean += lane_sum(hw, [p](std::size_t i) { return p[i]; });
      }
      mean /= static_cast<double>(m);
      for (std::size_t n = 0; n < x.n(); ++n) {
        const Real* p = x.plane(n, c);
        var += lane_sum(hw, [p, mean](std::size_t i) {
          const double d = p[i] - mean;
          return d * d;
        });
      }
      const double unbiased = m > 1 ? var / static_cast<double>(m - 1) : 0.0;
      var /= static_cast<double>(m);
      const double mom = BNState<Real>::momentum;
      running_mean[c] = static_cast<Real>((1 - mom) * running_mean[c] + mom * mean);
      running_var[c] = static_cast<Real>((1 - mom) * running_var[c] + mom * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + BNState<Real>::eps);
    inv_std[c] = is;
    const Real mu = static_cast<Real>(mean), s = static_cast<Real>(is);
    const Real gc = gamma[c], bc = beta[c];
    for (std::size_t n = 0; n < x.n(); ++n) {
      const Real* p = x.plane(n, c);
      Real* q = y.plane(n, c);
      Real* xh = xhat.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        const Real v = (p[i] - mu) * s;
        xh[i] = v;
        q[i] = v * gc + bc;
      }
    }
  }
  if (saved) {
    saved->xhat = std::move(xhat);
    saved->inv_std = std::move(inv_std);
    saved->mode = mode;
  }
  return y;
}

template <typename Real>
Tensor<Real> batch_norm(const Tensor<Real>& x, BNState<Real>& state, Mode mode) {
  return batch_norm_forward(x, state.gamma, state.beta, state.running_mean, state.running_var,
                            mode, static_cast<BNSaved<Real>*>(nullptr));
}

template <typename Real>
struct BNGrads {
  Tensor<Real> dx;
  Tensor<Real> dgamma;
  Tensor<Real> dbeta;
};

/// Train mode differentiates through the batch statistics.
template <typename Real>
BNGrads<Real> batch_norm_backward(const Tensor<Real>& gout, const Tensor<Real>& gamma,
                                  const BNSaved<Real>& saved) {
  const Shape& s = gout.shape();
  const std::size_t hw = s.plane();
  const double m = static_cast<double>(s.n * hw);
  BNGrads<Real> g{Tensor<Real>(s), Tensor<Real>(Shape{1, s.c, 1, 1}),
                  Tensor<Real>(Shape{1, s.c, 1, 1})};
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0;
    double sum_dy_xhat = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const Real* dy = gout.plane(n, c);
      const Real* xh = saved.xhat.plane(n, c);
      sum_dy += lane_sum(hw, [dy](std::size_t i) { return dy[i]; });
      sum_dy_xhat += lane_sum(hw, [dy, xh](std::size_t i) { return static_cast<double>(dy[i]) * xh[i]; });
    }
    g.dbeta[c] = static_cast<Real>(sum_dy);
    g.dgamma[c] = static_cast<Real>(sum_dy_xhat);
    const Real a = static_cast<Real>(static_cast<double>(gamma[c]) * saved.inv_std[c]);
    const Real mean_dy = static_cast<Real>(sum_dy / m);
    const Real mean_dy_xhat = static_cast<Real>(sum_dy_xhat / m);
    for (std::size_t n = 0; n < s.n; ++n) {
      const Real* dy = gout.plane(n, c);
      const Real* xh = saved.xhat.plane(n, c);
      Real* dx = g.dx.plane(n, c);
      if (saved.mode == Mode::Train) {
        for (std::size_t i = 0; i < hw; ++i) dx[i] = a * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
      } else {
        for (std::size_t i = 0; i < hw; ++i) dx[i] = a * dy[i];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Bilinear source taps for doubling an axis, half-pixel centers.
inline std::vector<LerpTap> upsample_taps(std::size_t in) {
  std::vector<LerpTap> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    const auto i0 = static_cast<std::size_t>(src);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear interpolation to twice the height and width (align_corners = false).
template <typename Real>
Tensor<Real> upsample2x(const Tensor<Real>& x) {
  const Shape s = x.shape();
  Tensor<Real> y(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  if (s.numel() == 0) return y;
  const auto ty = detail::upsample_taps(s.h);
  const auto tx = detail::upsample_taps(s.w);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const Real* p = x.plane(n, c);
      Real* q = y.plane(n, c);
      for (std::size_t oy = 0; oy < 2 * s.h; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < 2 * s.w; ++ox) {
          const auto& b = tx[ox];
          const double top = (1 - b.w1) * p[a.i0 * s.w + b.i0] + b.w1 * p[a.i0 * s.w + b.i1];
          const double bot = (1 - b.w1) * p[a.i1 * s.w + b.i0] + b.w1 * p[a.i1 * s.w + b.i1];
          q[oy * 2 * s.w + ox] = static_cast<Real>((1 - a.w1) * top + a.w1 * bot);
        }
      }
    }
  }
  return y;
}

/// Adjoint of upsample2x.
template <typename Real>
Tensor<Real> upsample2x_backward(const Tensor<Real>& gout) {
  const Shape s{gout.n(), gout.c(), gout.h() / 2, gout.w() / 2};
  Tensor<Real> g(s);
  if (s.numel() == 0) return g;
  const auto ty = detail::upsample_taps(s.h);
  const auto tx = detail::upsample_taps(s.w);
  std::vector<double> acc(s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const Real* q = gout.plane(n, c);
      for (std::size_t oy = 0; oy < 2 * s.h; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < 2 * s.w; ++ox) {
          const auto& b = tx[ox];
          const double v = q[oy * 2 * s.w + ox];
          acc[a.i0 * s.w + b.i0] += (1 - a.w1) * (1 - b.w1) * v;
          acc[a.i0 * s.w + b.i1] += (1 - a.w1) * b.w1 * v;
          acc[a.i1 * s.w + b.i0] += a.w1 * (1 - b.w1) * v;
          acc[a.i1 * s.w + b.i1] += a.w1 * b.w1 * v;
        }
      }
      Real* p = g.plane(n, c);
      for (std::size_t i = 0; i < acc.size(); ++i) p[i] = static_cast<Real>(acc[i]);
    }
  }
  return g;
}

/// 2x2 mean pooling; odd trailing rows/columns are dropped.
template <typename Real>
Tensor<Real> avg_pool2x(const Tensor<Real>& x) {
  const Shape s{x.n(), x.c(), x.h() / 2, x.w() / 2};
  Tensor<Real> y(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const Real* p = x.plane(n, c);
      Real* q = y.plane(n, c);
      for (std::size_t oy = 0; oy < s.h; ++oy) {
        const Real* r0 = p + 2 * oy * x.w();
        const Real* r1 = r0 + x.w();
        for (std::size_t ox = 0; ox < s.w; ++ox) {
          q[oy * s.w + ox] =
              Real(0.25) * ((r0[2 * ox] + r0[2 * ox + 1]) + (r1[2 * ox] + r1[2 * ox + 1]));
        }
      }
    }
  }
  return y;
}

template <typename Real>
Tensor<Real> avg_pool2x_backward(const Tensor<Real>& gout, Shape input) {
  Tensor<Real> g(input);
  for (std::size_t n = 0; n < gout.n(); ++n) {
    for (std::size_t c = 0; c < gout.c(); ++c) {
      const Real* q = gout.plane(n, c);
      Real* p = g.plane(n, c);
      for (std::size_t oy = 0; oy < gout.h(); ++oy) {
        for (std::size_t ox = 0; ox < gout.w(); ++ox) {
          const Real v = Real(0.25) * q[oy * gout.w() + ox];
          p[2 * oy * input.w + 2 * ox] = v;
          p[2 * oy * input.w + 2 * ox + 1] = v;
          p[(2 * oy + 1) * input.w + 2 * ox] = v;
          p[(2 * oy + 1) * input.w + 2 * ox + 1] = v;
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Channel stacking

template <typename Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat_channels: " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor<Real> out(Shape{a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t sa = a.c() * a.shape().plane();
  const std::size_t sb = b.c() * b.shape().plane();
  for (std::size_t n = 0; n < a.n(); ++n) {
    Real* dst = out.data() + n * (sa + sb);
    std::copy(a.data() + n * sa, a.data() + (n + 1) * sa, dst);
    std::copy(b.data() + n * sb, b.data() + (n + 1) * sb, dst + sa);
  }
  return out;
}

/// Inverse of concat_channels: first `first_channels` channels, then the rest.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> split_channels(const Tensor<Real>& x,
                                                     std::size_t first_channels) {
  if (first_channels > x.c()) {
    throw ShapeError("split_channels: " + std::to_string(first_channels) + " > channels of " +
                     x.shape().str());
  }
  Tensor<Real> a(Shape{x.n(), first_channels, x.h(), x.w()});
  Tensor<Real> b(Shape{x.n(), x.c() - first_channels, x.h(), x.w()});
  const std::size_t sa = a.c() * a.shape().plane();
  const std::size_t sb = b.c() * b.shape().plane();
  for (std::size_t n = 0; n < x.n(); ++n) {
    const Real* src = x.data() + n * (sa + sb);
    std::copy(src, src + sa, a.data() + n * sa);
    std::copy(src + sa, src + sa + sb, b.data() + n * sb);
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Class scores

/// Softmax across channels at every (n, y, x), max-subtracted.
template <typename Real>
Tensor<Real> softmax_channels(const Tensor<Real>& logits) {
  const Shape s = logits.shape();
  Tensor<Real> p(s);
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      double mx = -INFINITY;
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, double(logits.plane(n, c)[i]));
      double z = 0;
      for (std::size_t c = 0; c < s.c; ++c) z += std::exp(double(logits.plane(n, c)[i]) - mx);
      for (std::size_t c = 0; c < s.c; ++c) {
        p.plane(n, c)[i] = static_cast<Real>(std::exp(double(logits.plane(n, c)[i]) - mx) / z);
      }
    }
  }
  return p;
}

}  // namespace cscde

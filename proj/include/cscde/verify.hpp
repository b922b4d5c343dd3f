#pragma once

// Self-checks shipped with the library: adjoint identities, finite-difference
// gradients, exact properties of the ML-block iteration, and metric oracles.
// Each suite returns a machine-readable result; the CLI prints them as JSON.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cscde/autodiff.hpp"
#include "cscde/losses.hpp"
#include "cscde/metrics.hpp"
#include "cscde/ml_block.hpp"
#include "cscde/oracles.hpp"
#include "cscde/segnet.hpp"

namespace cscde::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0;      // worst observed error (or mismatch count)
  double tolerance = 0;
  nlohmann::json detail = nlohmann::json::object();
};

struct SuiteResult {
  std::string suite;
  std::vector<CheckResult> checks;
  double seconds = 0;

  bool passed() const {
    for (const auto& c : checks) {
      if (!c.passed) return false;
    }
    return !checks.empty();
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> f;
    for (const auto& c : checks) {
      if (!c.passed) f.push_back(suite + "/" + c.name);
    }
    return f;
  }
};

inline nlohmann::json to_json(const SuiteResult& s) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : s.checks) {
    checks.push_back({{"name", c.name},
                      {"passed", c.passed},
                      {"value", c.value},
                      {"tolerance", c.tolerance},
                      {"detail", c.detail}});
  }
  return {{"suite", s.suite}, {"passed", s.passed()}, {"seconds", s.seconds}, {"checks", checks}};
}

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline double rel_gap(long double a, long double b) {
  return static_cast<double>(std::fabs(a - b) / (std::fabs(a) + 1e-30L));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Adjoint suite

/// `cases` random geometries over strides {1,2}, paddings {0,1,2}, kernels
/// {1,3,5}: the conv/conv-transpose pairing, linearity, shape contract, and
/// agreement with direct summation.
inline SuiteResult adjoint_suite(std::uint64_t seed = 42, int cases = 100) {
  detail::Stopwatch sw;
  SplitMix64 rng = make_stream(seed, Stream::Check, 1);
  double worst_adj = 0, worst_lin = 0, worst_direct = 0;
  int shape_failures = 0;
  const std::size_t kernels[] = {1, 3, 5};
  for (int i = 0; i < cases; ++i) {
    const ConvGeom g{1 + rng.below(2), rng.below(3)};
    const std::size_t k = kernels[rng.below(3)];
    const std::size_t cin = 1 + rng.below(4), cout = 1 + rng.below(4), n = 1 + rng.below(2);
    // Smallest extent with a non-empty output is k - 2p (at least 1).
    const std::size_t lo = k > 2 * g.padding ? k - 2 * g.padding : 1;
    const std::size_t h = lo + rng.below(8), w = lo + rng.below(8);
    const Tensor<double> x = random_normal<double>(Shape{n, cin, h, w}, rng);
    const Tensor<double> x2 = random_normal<double>(Shape{n, cin, h, w}, rng);
    const Tensor<double> kern = random_normal<double>(Shape{cout, cin, k, k}, rng);
    const Tensor<double> y0 = conv2d(x, kern, g);
    const Tensor<double> y = random_normal<double>(y0.shape(), rng);
    const Tensor<double> xt = conv_transpose2d(y, kern, g, std::pair{h, w});
    worst_adj = std::max(worst_adj, detail::rel_gap(dot(y0, y), dot(x, xt)));

    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    const Tensor<double> lhs = conv2d(scale(x, a) + scale(x2, b), kern, g);
    const Tensor<double> rhs = scale(y0, a) + scale(conv2d(x2, kern, g), b);
    worst_lin = std::max(worst_lin, max_abs_diff(lhs, rhs) / (l2_norm(rhs) + 1e-30));

    if (y0.h() != conv_out_size(h, k, g) || y0.w() != conv_out_size(w, k, g)) ++shape_failures;
    if (xt.h() != h || xt.w() != w) ++shape_failures;
    if (g.stride == 1) {
      const Tensor<double> xd = conv_transpose2d(y, kern, g);
      if (xd.h() != h || xd.w() != w) ++shape_failures;
    }
    const Tensor<double> yd = oracle::conv2d_direct(x, kern, g.stride, g.padding);
    worst_direct = std::max(worst_direct, max_abs_diff(y0, yd) / (l2_norm(yd) + 1e-30));
  }
  SuiteResult s{"adjoint", {}, 0};
  s.checks.push_back({"conv_transpose_adjoint", worst_adj <= 1e-10, worst_adj, 1e-10,
                      {{"cases", cases}}});
  s.checks.push_back({"conv_linearity", worst_lin <= 1e-12, worst_lin, 1e-12, {{"cases", cases}}});
  s.checks.push_back({"conv_matches_direct_sum", worst_direct <= 1e-12, worst_direct, 1e-12,
                      {{"cases", cases}}});
  s.checks.push_back({"shape_contract", shape_failures == 0, double(shape_failures), 0,
                      {{"cases", cases}}});
  s.seconds = sw.seconds();
  return s;
}

// ---------------------------------------------------------------------------
// Gradient suite

namespace detail {

using Build = std::function<Var(Tape<double>&)>;

inline CheckResult grad_check(const std::string& name, const std::vector<Param<double>*>& params,
                              const Build& build, std::uint64_t seed, Fault fault,
                              double tol = 1e-4) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> t;
    t.set_fault(fault);
    t.backward(build(t));
  }
  const std::function<LossProbe()> probe = [&] {
    Tape<double> t(false);
    t.watch_kinks(true);
    const double l = t.value(build(t))[0];
    return LossProbe{l, t.kink_signature()};
  };
  const GradCheckReport rep = finite_diff_check<double>(probe, params, seed);
  CheckResult c{name, rep.passed(tol), rep.worst(), tol, nlohmann::json::object()};
  std::size_t skipped = 0;
  for (const auto& [k, v] : rep.max_rel_err) c.detail[k] = std::isfinite(v) ? v : 1e300;
  for (const auto& [k, v] : rep.skipped) skipped += v;
  c.detail["kink_skipped"] = skipped;
  return c;
}

inline Param<double> random_param(const std::string& name, Shape s, SplitMix64& rng,
                                  double stddev = 1.0) {
  return Param<double>(name, random_normal<double>(s, rng, stddev));
}

// Entries pushed at least `gap` away from zero, so finite differences never
// straddle a ReLU kink.
inline Param<double> kink_free_param(const std::string& name, Shape s, SplitMix64& rng,
                                     double gap = 0.05) {
  Tensor<double> t = random_normal<double>(s, rng);
  for (auto& v : t.vec()) v = v >= 0 ? v + gap : v - gap;
  return Param<double>(name, std::move(t));
}

inline LabelMap random_labels(Shape s, std::size_t k, SplitMix64& rng) {
  LabelMap m(s);
  for (auto& v : m.vec()) v = static_cast<std::uint8_t>(rng.below(k));
  return m;
}

}  // namespace detail

/// Small network used by the full-network gradient check (32x32 input).
inline SegNetConfig grad_check_net_config() {
  SegNetConfig c;
  c.in_channels = 1;
  c.n_classes = 3;
  c.encoder_channels = {4, 6, 8, 8};
  c.decoder_channels = {6, 4, 4};
  c.iterations = {2, 2, 2};
  c.seed = 7;
  return c;
}

/// Central finite differences (step 1e-5, f64) against the tape for every
/// operator, the losses, the ML-block at T = 0, 1, 2 and a whole network.
inline SuiteResult grad_suite(std::uint64_t seed = 42, Fault fault = Fault::None) {
  using detail::grad_check;
  using detail::random_param;
  detail::Stopwatch sw;
  SplitMix64 rng = make_stream(seed, Stream::Check, 2);
  SuiteResult s{"grad", {}, 0};
  auto probe = [&](Shape sh) { return random_normal<double>(sh, rng); };

  {
    auto x = random_param("x", {2, 3, 7, 6}, rng), w = random_param("w", {4, 3, 3, 3}, rng);
    const ConvGeom g{2, 1};
    const auto r = probe(conv2d(x.value, w.value, g).shape());
    s.checks.push_back(grad_check("conv2d", {&x, &w}, [&](Tape<double>& t) {
      return ad::dot_const(t, ad::conv2d(t, t.param(x), t.param(w), g), r);
    }, seed, fault));
  }
  {
    auto v = random_param("v", {2, 4, 4, 3}, rng), w = random_param("w", {4, 3, 3, 3}, rng);
    const ConvGeom g{2, 1};
    const std::pair<std::size_t, std::size_t> hw{7, 6};
    const auto r = probe(Shape{2, 3, 7, 6});
    s.checks.push_back(grad_check("conv_transpose2d", {&v, &w}, [&](Tape<double>& t) {
      return ad::dot_const(t, ad::conv_transpose2d(t, t.param(v), t.param(w), g, hw), r);
    }, seed, fault));
  }
  {
    auto x = detail::kink_free_param("x", {2, 3, 5, 5}, rng);
    const auto r = probe(x.value.shape());
    s.checks.push_back(grad_check("relu", {&x}, [&](Tape<double>& t) {
      return ad::dot_const(t, ad::relu(t, t.param(x)), r);
    }, seed, fault));
  }
  {
    auto a = random_param("a", {2, 3, 4, 4}, rng), b = random_param("b", {2, 3, 4, 4}, rng);
    auto c = random_param("c", {1, 1, 1, 1}, rng), bias = random_param("bias", {1, 3, 1, 1}, rng);
    const auto r = probe(a.value.shape());
    s.checks.push_back(grad_check("elementwise", {&a, &b, &c, &bias}, [&](Tape<double>& t) {
      Var y = ad::sub(t, ad::add(t, t.param(a), ad::scale(t, t.param(b), 0.7)), t.param(b));
      y = ad::add_channel_bias(t, ad::scalar_mul(t, t.param(c), y), t.param(bias));
      return ad::add(t, ad::dot_const(t, y, r), ad::mean(t, ad::sum(t, y)));
    }, seed, fault));
  }
  {
    auto a = random_param("a", {2, 3, 4, 4}, rng), b = random_param("b", {2, 3, 4, 4}, rng);
    auto c = random_param("c", {1, 1, 1, 1}, rng), bias = random_param("bias", {1, 3, 1, 1}, rng);
    const auto r = probe(a.value.shape());
    s.checks.push_back(grad_check("shrink_step", {&a, &b, &c, &bias}, [&](Tape<double>& t) {
      return ad::dot_const(
          t, ad::shrink_step(t, t.param(a), t.param(c), t.param(b), t.param(bias)), r);
    }, seed, fault));
  }
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    auto x = random_param("x", {3, 2, 4, 5}, rng);
    auto gamma = random_param("gamma", {1, 2, 1, 1}, rng), beta = random_param("beta", {1, 2, 1, 1}, rng);
    Tensor<double> rm = random_normal<double>(Shape{1, 2, 1, 1}, rng, 0.1);
    Tensor<double> rv(Shape{1, 2, 1, 1}, 1.5);
    const auto r = probe(x.value.shape());
    const std::string name = mode == Mode::Train ? "batch_norm_train" : "batch_norm_eval";
    s.checks.push_back(grad_check(name, {&x, &gamma, &beta}, [&](Tape<double>& t) {
      return ad::dot_const(
          t, ad::batch_norm(t, t.param(x), t.param(gamma), t.param(beta), rm, rv, mode), r);
    }, seed, fault));
  }
  {
    auto x = random_param("x", {2, 2, 3, 5}, rng);
    const auto r = probe(Shape{2, 2, 6, 10});
    s.checks.push_back(grad_check("upsample2x", {&x}, [&](Tape<double>& t) {
      return ad::dot_const(t, ad::upsample2x(t, t.param(x)), r);
    }, seed, fault));
  }
  {
    auto x = random_param("x", {2, 2, 6, 4}, rng);
    const auto r = probe(Shape{2, 2, 3, 2});
    s.checks.push_back(grad_check("avg_pool2x", {&x}, [&](Tape<double>& t) {
      return ad::dot_const(t, ad::avg_pool2x(t, t.param(x)), r);
    }, seed, fault));
  }
  {
    auto a = random_param("a", {2, 2, 3, 3}, rng), b = random_param("b", {2, 3, 3, 3}, rng);
    const auto r = probe(Shape{2, 5, 3, 3});
    s.checks.push_back(grad_check("concat_channels", {&a, &b}, [&](Tape<double>& t) {
      return ad::dot_const(t, ad::concat_channels(t, t.param(a), t.param(b)), r);
    }, seed, fault));
  }
  {
    auto x = random_param("x", {2, 4, 3, 3}, rng);
    const auto r = probe(x.value.shape());
    s.checks.push_back(grad_check("softmax_channels", {&x}, [&](Tape<double>& t) {
      return ad::dot_const(t, ad::softmax_channels(t, t.param(x)), r);
    }, seed, fault));
  }
  {
    auto z = random_param("logits", {2, 4, 5, 5}, rng);
    const LabelMap y = detail::random_labels(Shape{2, 1, 5, 5}, 4, rng);
    s.checks.push_back(grad_check("cross_entropy_loss", {&z}, [&](Tape<double>& t) {
      return cross_entropy_loss(t, t.param(z), y);
    }, seed, fault));
    s.checks.push_back(grad_check("dice_loss", {&z}, [&](Tape<double>& t) {
      return dice_loss(t, t.param(z), y);
    }, seed, fault));
    s.checks.push_back(grad_check("combined_loss", {&z}, [&](Tape<double>& t) {
      Var zv = t.param(z);
      return ad::add(t, ad::scale(t, cross_entropy_loss(t, zv, y), 0.5),
                     ad::scale(t, dice_loss(t, zv, y), 0.5));
    }, seed, fault));
  }
  for (std::size_t T : {0, 1, 2}) {
    SplitMix64 init = make_stream(seed, Stream::Init, 10 + T);
    MLBlock<double> blk = MLBlock<double>::create("ml", 3, 4, 5, 3, 1, 1, T, init);
    // Non-trivial offsets and step sizes so every parameter matters.
    blk.b1.value = random_normal<double>(blk.b1.value.shape(), rng, 0.1);
    blk.b2.value = random_normal<double>(blk.b2.value.shape(), rng, 0.1);
    blk.c1.value[0] = 0.3;
    blk.c2.value[0] = 0.2;
    auto x = random_param("x", {2, 3, 6, 6}, rng);
    // At T = 0 train-mode batch norm cancels c and b exactly, leaving only
    // rounding noise for the difference quotient; eval mode keeps them live.
    const Mode mode = T == 0 ? Mode::Eval : Mode::Train;
    if (mode == Mode::Eval) {
      blk.bn1.running_mean = random_normal<double>(blk.bn1.running_mean.shape(), rng, 0.1);
      blk.bn2.running_mean = random_normal<double>(blk.bn2.running_mean.shape(), rng, 0.1);
    }
    const auto r = probe(Shape{2, 5, 6, 6});
    std::vector<Param<double>*> ps{&x};
    blk.collect(ps);
    s.checks.push_back(grad_check("ml_block_T" + std::to_string(T), ps, [&](Tape<double>& t) {
      return ad::dot_const(t, ml_forward(t, t.param(x), blk, mode), r);
    }, seed, fault));
  }
  {
    SegNet<double> net(grad_check_net_config());
    SplitMix64 data = make_stream(seed, Stream::Data, 99);
    const Tensor<double> img = random_uniform<double>(Shape{2, 1, 32, 32}, data, 0, 1);
    const LabelMap y = detail::random_labels(Shape{2, 1, 32, 32}, 3, data);
    s.checks.push_back(grad_check("segnet_32x32", net.params(), [&](Tape<double>& t) {
      Var z = net.forward(t, t.leaf(img), Mode::Train);
      return ad::add(t, ad::scale(t, cross_entropy_loss(t, z, y), 0.5),
                     ad::scale(t, dice_loss(t, z, y), 0.5));
    }, seed, fault));
  }
  s.seconds = sw.seconds();
  return s;
}

// ---------------------------------------------------------------------------
// ML-block mechanics

namespace detail {

inline bool bitwise_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && a.vec() == b.vec();
}

// Batch norm in eval mode with statistics that make it the exact identity:
// var + eps rounds to 1 in double.
inline void make_bn_identity(BatchNormLayer<double>& bn) {
  bn.running_mean.fill(0.0);
  bn.running_var.fill(1.0 - BNState<double>::eps);
  bn.gamma.value.fill(1.0);
  bn.beta.value.fill(0.0);
}

}  // namespace detail

inline SuiteResult mechanics_suite(std::uint64_t seed = 42) {
  detail::Stopwatch sw;
  SplitMix64 rng = make_stream(seed, Stream::Check, 3);
  SuiteResult s{"ml_block", {}, 0};

  // T = 0 is the encode pass, bitwise, on and off the tape.
  {
    int mismatches = 0;
    for (int trial = 0; trial < 4; ++trial) {
      SplitMix64 init = make_stream(seed, Stream::Init, 20 + trial);
      const std::size_t stride = 1 + trial % 2;
      MLBlock<double> a = MLBlock<double>::create("a", 3, 4, 5, 3, stride, 1, 0, init);
      MLBlock<double> b = a;
      MLBlock<double> c = a;
      const Tensor<double> x = random_normal<double>(Shape{2, 3, 9, 8}, rng);
      const Tensor<double> fwd = ml_forward(x, a, Mode::Train);
      const Tensor<double> enc = ml_encode(x, b, Mode::Train).second;
      Tape<double> t;
      const Tensor<double> taped = t.value(ml_forward(t, t.leaf(x), c, Mode::Train));
      mismatches += !detail::bitwise_equal(fwd, enc) + !detail::bitwise_equal(fwd, taped);
    }
    s.checks.push_back({"T0_equals_encode", mismatches == 0, double(mismatches), 0});
  }

  // Tape and tensor paths agree bitwise for T >= 1 too.
  {
    int mismatches = 0;
    for (std::size_t T : {1, 2, 3}) {
      SplitMix64 init = make_stream(seed, Stream::Init, 30 + T);
      MLBlock<double> a = MLBlock<double>::create("a", 2, 3, 4, 3, 1, 1, T, init);
      a.c1.value[0] = 0.4;
      a.c2.value[0] = 0.3;
      MLBlock<double> b = a;
      const Tensor<double> x = random_normal<double>(Shape{2, 2, 8, 8}, rng);
      Tape<double> t;
      mismatches += !detail::bitwise_equal(ml_forward(x, a, Mode::Train),
                                           t.value(ml_forward(t, t.leaf(x), b, Mode::Train)));
    }
    s.checks.push_back({"tape_matches_direct", mismatches == 0, double(mismatches), 0});
  }

  // gamma2* >= 0, W >= 0, b = 0, x = convT(convT(gamma2*, W2), W1): every
  // residual is exactly zero, so refinement must return gamma2* untouched.
  {
    int mismatches = 0;
    for (std::size_t stride : {1, 2}) {
      SplitMix64 init = make_stream(seed, Stream::Init, 40 + stride);
      MLBlock<double> p = MLBlock<double>::create("fp", 2, 3, 4, 3, stride, 1, 0, init);
      p.w1.value = random_uniform<double>(p.w1.value.shape(), rng, 0, 1);
      p.w2.value = random_uniform<double>(p.w2.value.shape(), rng, 0, 1);
      p.c1.value[0] = rng.uniform(0.1, 2.0);
      p.c2.value[0] = rng.uniform(0.1, 2.0);
      const std::size_t H = stride == 1 ? 7 : 13;
      const ConvGeom g = p.geom();
      const std::size_t h1 = conv_out_size(H, 3, g), h2 = conv_out_size(h1, 3, g);
      Tensor<double> star = random_uniform<double>(Shape{2, 4, h2, h2}, rng, -0.5, 1);
      star = relu(std::move(star));
      const Tensor<double> x = conv_transpose2d(conv_transpose2d(star, p.w2.value, g, std::pair{h1, h1}),
                                                p.w1.value, g, std::pair{H, H});
      for (int T = 1; T <= 5; ++T) {
        Tensor<double> g2 = star;
        for (int it = 0; it < T; ++it) g2 = ml_refine(g2, x, p).second;
        mismatches += !detail::bitwise_equal(g2, star);
      }
    }
    s.checks.push_back({"fixed_point_invariant_T1_to_5", mismatches == 0, double(mismatches), 0});
  }

  // 1x1 identity kernels, c = 1, b = -lambda, batch norm reduced to the
  // identity: the encode pass is two nonnegative soft-thresholds.
  {
    int mismatches = 0;
    for (double lambda : {0.0, 0.25, 1.0}) {
      SplitMix64 init = make_stream(seed, Stream::Init, 50);
      const std::size_t C = 3;
      MLBlock<double> p = MLBlock<double>::create("st", C, C, C, 1, 1, 0, 0, init);
      for (Param<double>* w : {&p.w1, &p.w2}) {
        w->value.fill(0.0);
        for (std::size_t c = 0; c < C; ++c) w->value.at(c, c, 0, 0) = 1.0;
      }
      p.b1.value.fill(-lambda);
      p.b2.value.fill(-lambda);
      detail::make_bn_identity(p.bn1);
      detail::make_bn_identity(p.bn2);
      const Tensor<double> x = random_normal<double>(Shape{2, C, 4, 4}, rng);
      const auto [g1, g2] = ml_encode(x, p, Mode::Eval);
      const std::vector<double> o1 = oracle::nonneg_soft_threshold(x.vec(), lambda);
      const std::vector<double> o2 = oracle::nonneg_soft_threshold(o1, lambda);
      mismatches += (g1.vec() != o1) + (g2.vec() != o2);
    }
    s.checks.push_back({"soft_threshold_oracle", mismatches == 0, double(mismatches), 0});
  }
  s.seconds = sw.seconds();
  return s;
}

// ---------------------------------------------------------------------------
// Metric oracles

inline SuiteResult metrics_suite(std::uint64_t seed = 42, int cases = 200) {
  detail::Stopwatch sw;
  SplitMix64 rng = make_stream(seed, Stream::Check, 4);
  SuiteResult s{"metrics", {}, 0};
  int mismatches = 0, asym = 0;
  for (int i = 0; i < cases; ++i) {
    // Blobby masks: random rectangles over a sparse salt pattern, with some
    // empty masks mixed in.
    auto draw = [&] {
      LabelMap m(Shape{1, 1, 16, 16});
      const double density = rng.uniform(0, 0.3);
      for (auto& v : m.vec()) v = rng.coin(density) ? 1 : (rng.coin(0.1) ? 2 : 0);
      const std::size_t rects = rng.below(3);
      for (std::size_t r = 0; r < rects; ++r) {
        const std::size_t y0 = rng.below(16), x0 = rng.below(16);
        const std::size_t y1 = std::min<std::size_t>(16, y0 + 1 + rng.below(8));
        const std::size_t x1 = std::min<std::size_t>(16, x0 + 1 + rng.below(8));
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) m.at(0, 0, y, x) = 1;
      }
      if (rng.coin(0.05)) m.fill(0);
      return m;
    };
    const LabelMap a = draw(), b = draw();
    const double fast = hd95(a, b, 1);
    mismatches += fast != oracle::hd95_all_pairs(a, b, 1);
    asym += fast != hd95(b, a, 1);
  }
  s.checks.push_back({"hd95_matches_all_pairs", mismatches == 0, double(mismatches), 0,
                      {{"cases", cases}}});
  s.checks.push_back({"hd95_symmetric", asym == 0, double(asym), 0, {{"cases", cases}}});

  {
    LabelMap p(Shape{1, 1, 4, 4}), g(Shape{1, 1, 4, 4});
    int bad = 0;
    // identical
    for (std::size_t i = 0; i < 4; ++i) p[i] = g[i] = 1;
    bad += dsc(p, g, 1) != 1.0;
    // disjoint, 4 pixels each
    g.fill(0);
    for (std::size_t i = 8; i < 12; ++i) g[i] = 1;
    bad += dsc(p, g, 1) != 0.0;
    // overlap of 2
    g.fill(0);
    for (std::size_t i = 2; i < 6; ++i) g[i] = 1;
    bad += dsc(p, g, 1) != 0.5;
    // both empty
    bad += dsc(p, g, 3) != 1.0;
    s.checks.push_back({"dsc_closed_forms", bad == 0, double(bad), 0});
  }
  {
    LabelMap p(Shape{1, 1, 8, 8}), g(Shape{1, 1, 8, 8});
    p.at(0, 0, 0, 0) = 1;
    g.at(0, 0, 3, 4) = 1;
    const double d = hd95(p, g, 1);
    s.checks.push_back({"hd95_3_4_5", d == 5.0, d, 0});
  }
  s.seconds = sw.seconds();
  return s;
}

}  // namespace cscde::verify

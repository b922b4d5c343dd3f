#include <gtest/gtest.h>

#include "cscde/autodiff.hpp"
#include "cscde/layers.hpp"
#include "cscde/losses.hpp"

using namespace cscde;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return random_normal<double>(s, rng);
}

}  // namespace

TEST(Tape, RecordingDoesNotChangeValues) {
  const auto x = randn({2, 3, 7, 7}, 1);
  const auto w = randn({4, 3, 3, 3}, 2);
  Tape<double> t;
  const Var y = ad::conv2d(t, t.leaf(x, true), t.leaf(w, true), ConvGeom{1, 1});
  EXPECT_EQ(t.value(y), conv2d(x, w, ConvGeom{1, 1}));
}

TEST(Tape, ReluSubgradient) {
  Tensor<double> x(Shape{1, 1, 1, 4}, std::vector<double>{-1, 0, 0.5, 3});
  Tape<double> t;
  const Var xv = t.leaf(x, true);
  t.backward(ad::sum(t, ad::relu(t, xv)));
  EXPECT_EQ(t.grad(xv).vec(), (std::vector<double>{0, 0, 1, 1}));
}

TEST(Tape, ShrinkStepMatchesUnfusedChain) {
  const auto a = randn({2, 3, 5, 4}, 11), b = randn({2, 3, 5, 4}, 12);
  const auto r = randn({2, 3, 5, 4}, 13), bias = randn({1, 3, 1, 1}, 14);
  const auto c = Tensor<double>::scalar(0.8);
  auto grads = [&](bool fused) {
    Tape<double> t;
    const Var va = t.leaf(a, true), vb = t.leaf(b, true), vc = t.leaf(c, true);
    const Var vbias = t.leaf(bias, true);
    const Var y = fused ? ad::shrink_step(t, va, vc, vb, vbias)
                        : ad::relu(t, ad::add_channel_bias(
                                          t, ad::sub(t, va, ad::scalar_mul(t, vc, vb)), vbias));
    const Tensor<double> out = t.value(y);
    t.backward(ad::dot_const(t, y, r));
    return std::vector<Tensor<double>>{out, t.grad(va), t.grad(vb), t.grad(vc), t.grad(vbias)};
  };
  const auto f = grads(true), u = grads(false);
  for (std::size_t k = 0; k < f.size(); ++k) {
    for (std::size_t i = 0; i < f[k].size(); ++i) EXPECT_NEAR(f[k][i], u[k][i], 1e-12) << k;
  }
}

TEST(Tape, SumGivesOnes) {
  Tape<double> t;
  const Var x = t.leaf(randn({2, 2, 3, 3}, 3), true);
  t.backward(ad::sum(t, x));
  const auto g = t.grad(x);
  for (double v : g.vec()) EXPECT_EQ(v, 1.0);
}

TEST(Tape, ConvInputGradientIsConvTranspose) {
  const auto x = randn({2, 3, 8, 6}, 4);
  const auto w = randn({5, 3, 3, 3}, 5);
  const ConvGeom g{2, 1};
  const auto r = randn(conv2d(x, w, g).shape(), 6);
  Tape<double> t;
  const Var xv = t.leaf(x, true);
  t.backward(ad::dot_const(t, ad::conv2d(t, xv, t.leaf(w), g), r));
  EXPECT_EQ(t.grad(xv), conv_transpose2d(r, w, g, std::pair<std::size_t, std::size_t>{8, 6}));
}

TEST(Tape, SharedParamAccumulatesAcrossUses) {
  Param<double> w("w", randn({2, 2, 3, 3}, 7));
  const auto x = randn({1, 2, 5, 5}, 8);
  Tape<double> t;
  // The same weight as conv and as conv-transpose, like inside a refinement step.
  const Var wv = t.param(w);
  const Var y = ad::conv2d(t, t.leaf(x), wv, ConvGeom{1, 1});
  const Var z = ad::conv_transpose2d(t, y, wv, ConvGeom{1, 1}, std::pair<std::size_t, std::size_t>{5, 5});
  w.zero_grad();
  t.backward(ad::sum(t, z));
  const std::function<double()> loss = [&] {
    return static_cast<double>(dot(conv_transpose2d(conv2d(x, w.value, {1, 1}), w.value, {1, 1}),
                                   Tensor<double>(x.shape(), 1.0)));
  };
  const auto rep = finite_diff_check<double>(loss, {&w}, 1);
  EXPECT_TRUE(rep.passed(1e-6)) << rep.worst();
}

TEST(Tape, BackwardTwiceIsAnError) {
  Tape<double> t;
  const Var s = ad::sum(t, t.leaf(randn({1, 1, 2, 2}, 9), true));
  t.backward(s);
  EXPECT_THROW(t.backward(s), UsageError);
  Tape<double> empty;
  EXPECT_THROW(empty.backward(Var{0}), UsageError);
}

TEST(Tape, NonScalarTargetIsAnError) {
  Tape<double> t;
  const Var x = t.leaf(randn({1, 1, 2, 2}, 10), true);
  EXPECT_THROW(t.backward(x), UsageError);
}

TEST(Tape, ValueOnlyTapeKeepsNoGradients) {
  Param<double> w("w", randn({1, 1, 3, 3}, 11));
  w.zero_grad();
  Tape<double> t(false);
  const Var y = ad::conv2d(t, t.leaf(randn({1, 1, 4, 4}, 12)), t.param(w), ConvGeom{1, 1});
  EXPECT_FALSE(t.requires_grad(y));
  t.backward(ad::sum(t, y));
  for (double g : w.grad.vec()) EXPECT_EQ(g, 0.0);
}

// Two conv-BN-ReLU stages and a 1x1 head under CE loss: every parameter
// against central differences.
TEST(FiniteDifference, TwoStageMicroNetwork) {
  SplitMix64 rng(13);
  Param<double> w1("w1", kaiming_uniform<double>(4, 2, 3, rng));
  Param<double> w2("w2", kaiming_uniform<double>(3, 4, 3, rng));
  Param<double> head("head", kaiming_uniform<double>(3, 3, 1, rng));
  BatchNormLayer<double> bn1("bn1", 4), bn2("bn2", 3);
  bn1.beta.value = randn({1, 4, 1, 1}, 14);
  bn2.gamma.value = randn({1, 3, 1, 1}, 15);
  const auto x = randn({2, 2, 6, 6}, 16);
  LabelMap y(Shape{2, 1, 3, 3});
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::uint8_t>(i * 7 % 3);

  auto build = [&](Tape<double>& t) {
    Var h = ad::relu(t, bn1(t, ad::conv2d(t, t.leaf(x), t.param(w1), ConvGeom{1, 1}), Mode::Train));
    h = ad::relu(t, bn2(t, ad::conv2d(t, h, t.param(w2), ConvGeom{2, 1}), Mode::Train));
    return cross_entropy_loss(t, ad::conv2d(t, h, t.param(head), ConvGeom{1, 0}), y);
  };
  std::vector<Param<double>*> ps{&w1, &w2, &head, &bn1.gamma, &bn1.beta, &bn2.gamma, &bn2.beta};
  for (auto* p : ps) p->zero_grad();
  {
    Tape<double> t;
    t.backward(build(t));
  }
  const std::function<LossProbe()> probe = [&] {
    Tape<double> t(false);
    t.watch_kinks(true);
    const double l = t.value(build(t))[0];
    return LossProbe{l, t.kink_signature()};
  };
  const auto rep = finite_diff_check<double>(probe, ps, 17);
  for (const auto& [name, err] : rep.max_rel_err) EXPECT_LE(err, 1e-4) << name;
}

TEST(FiniteDifference, DetectsBrokenReluBackward) {
  Param<double> x("x", randn({1, 2, 4, 4}, 18));
  for (auto& v : x.value.vec()) v += v > 0 ? 0.1 : -0.1;
  const auto r = randn({1, 2, 4, 4}, 19);
  auto build = [&](Tape<double>& t) { return ad::dot_const(t, ad::relu(t, t.param(x)), r); };
  x.zero_grad();
  {
    Tape<double> t;
    t.set_fault(Fault::NegatedReluMask);
    t.backward(build(t));
  }
  const std::function<double()> loss = [&] {
    Tape<double> t(false);
    return static_cast<double>(t.value(build(t))[0]);
  };
  EXPECT_FALSE(finite_diff_check<double>(loss, {&x}, 1).passed(1e-4));
}

TEST(FiniteDifference, KinkCrossingsAreSkipped) {
  // One entry sits within the step of the ReLU kink.
  Param<double> x("x", Tensor<double>(Shape{1, 1, 1, 3}, std::vector<double>{1.0, 3e-6, -2.0}));
  auto build = [&](Tape<double>& t) { return ad::sum(t, ad::relu(t, t.param(x))); };
  x.zero_grad();
  {
    Tape<double> t;
    t.backward(build(t));
  }
  const std::function<LossProbe()> probe = [&] {
    Tape<double> t(false);
    t.watch_kinks(true);
    const double l = t.value(build(t))[0];
    return LossProbe{l, t.kink_signature()};
  };
  const auto rep = finite_diff_check<double>(probe, {&x}, 1);
  EXPECT_EQ(rep.skipped.at("x"), 1u);
  EXPECT_TRUE(rep.passed(1e-8));
}

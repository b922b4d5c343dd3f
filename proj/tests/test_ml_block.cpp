#include <gtest/gtest.h>

#include <sstream>

#include "cscde/ml_block.hpp"
#include "cscde/oracles.hpp"

using namespace cscde;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return random_normal<double>(s, rng);
}

MLBlock<double> make_block(std::size_t in, std::size_t d1, std::size_t d2, std::size_t k,
                           std::size_t stride, std::size_t pad, std::size_t T,
                           std::uint64_t seed = 1) {
  SplitMix64 rng(seed);
  return MLBlock<double>::create("ml", in, d1, d2, k, stride, pad, T, rng);
}

// Eval-mode batch norm that returns its input unchanged.
void bypass_bn(BatchNormLayer<double>& bn) {
  bn.running_mean.fill(0.0);
  bn.running_var.fill(1.0 - BNState<double>::eps);
}

}  // namespace

TEST(MLBlock, CreateDefaults) {
  const auto p = make_block(5, 4, 3, 3, 1, 1, 2);
  EXPECT_EQ(p.w1.value.shape(), (Shape{4, 5, 3, 3}));
  EXPECT_EQ(p.w2.value.shape(), (Shape{3, 4, 3, 3}));
  EXPECT_EQ(p.c1.value[0], 1.0);
  EXPECT_EQ(p.c2.value[0], 1.0);
  EXPECT_EQ(p.b1.value.size(), 4u);
  EXPECT_EQ(p.b2.value.size(), 3u);
  for (double v : p.b1.value.vec()) EXPECT_EQ(v, 0.0);
}

TEST(MLBlock, ValidateRejectsMismatchedShapes) {
  auto p = make_block(3, 4, 4, 3, 1, 1, 1);
  p.b1.value = Tensor<double>(Shape{1, 3, 1, 1});
  EXPECT_THROW(p.validate(), ShapeError);
  auto q = make_block(3, 4, 4, 3, 1, 1, 1);
  q.w2.value = Tensor<double>(Shape{4, 5, 3, 3});
  EXPECT_THROW(q.validate(), ShapeError);
}

TEST(MLEncode, ZeroInputIsZeroFixedPoint) {
  auto p = make_block(2, 3, 3, 3, 1, 1, 0);
  bypass_bn(p.bn1);
  bypass_bn(p.bn2);
  const auto [g1, g2] = ml_encode(Tensor<double>(Shape{1, 2, 5, 5}), p, Mode::Eval);
  for (double v : g1.vec()) EXPECT_EQ(v, 0.0);
  for (double v : g2.vec()) EXPECT_EQ(v, 0.0);
}

TEST(MLEncode, ScalarNetworkOracle) {
  auto p = make_block(1, 1, 1, 1, 1, 0, 0);
  p.w1.value[0] = 0.7;
  p.w2.value[0] = -1.3;
  p.c1.value[0] = 1.5;
  p.c2.value[0] = 0.8;
  p.b1.value[0] = 0.25;
  p.b2.value[0] = 2.0;
  bypass_bn(p.bn1);
  bypass_bn(p.bn2);
  for (double x : {-2.0, -0.1, 0.0, 0.4, 3.0}) {
    const auto [g1, g2] = ml_encode(Tensor<double>(Shape{1, 1, 1, 1}, x), p, Mode::Eval);
    const double e1 = std::max(0.0, 1.5 * (0.7 * x) + 0.25);
    const double e2 = std::max(0.0, 0.8 * (-1.3 * e1) + 2.0);
    // Eval-mode BN divides by sqrt(var + eps) == 1 up to rounding.
    EXPECT_DOUBLE_EQ(g1[0], e1) << x;
    EXPECT_DOUBLE_EQ(g2[0], e2) << x;
  }
}

TEST(MLEncode, OutputsAreNonnegative) {
  auto p = make_block(3, 4, 5, 3, 2, 1, 0);
  const auto [g1, g2] = ml_encode(randn({2, 3, 9, 9}, 2), p, Mode::Train);
  for (double v : g1.vec()) EXPECT_GE(v, 0.0);
  for (double v : g2.vec()) EXPECT_GE(v, 0.0);
}

TEST(MLEncode, IdentityKernelsGiveSoftThreshold) {
  const std::size_t C = 2;
  const double lambda = 0.3;
  auto p = make_block(C, C, C, 1, 1, 0, 0);
  for (Param<double>* w : {&p.w1, &p.w2}) {
    w->value.fill(0.0);
    for (std::size_t c = 0; c < C; ++c) w->value.at(c, c, 0, 0) = 1.0;
  }
  p.b1.value.fill(-lambda);
  p.b2.value.fill(-lambda);
  bypass_bn(p.bn1);
  bypass_bn(p.bn2);
  const auto x = randn({1, C, 3, 3}, 3);
  const auto [g1, g2] = ml_encode(x, p, Mode::Eval);
  EXPECT_EQ(g1.vec(), oracle::nonneg_soft_threshold(x.vec(), lambda));
  EXPECT_EQ(g2.vec(), oracle::nonneg_soft_threshold(g1.vec(), lambda));
}

TEST(SoftThresholdOracle, Examples) {
  EXPECT_EQ(oracle::nonneg_soft_threshold({3, 0.5, -2}, 1), (std::vector<double>{2, 0, 0}));
  EXPECT_EQ(oracle::nonneg_soft_threshold({-1, 0, 2.5}, 0), (std::vector<double>{0, 0, 2.5}));
}

TEST(MLRefine, ZeroStateStaysZero) {
  const auto p = make_block(2, 3, 3, 3, 1, 1, 1);
  const auto [g1, g2] =
      ml_refine(Tensor<double>(Shape{1, 3, 4, 4}), Tensor<double>(Shape{1, 2, 4, 4}), p);
  for (double v : g1.vec()) EXPECT_EQ(v, 0.0);
  for (double v : g2.vec()) EXPECT_EQ(v, 0.0);
}

TEST(MLRefine, ScalarRecursion) {
  auto p = make_block(1, 1, 1, 1, 1, 0, 1);
  p.w1.value[0] = 1.0;
  p.w2.value[0] = 1.0;
  p.c1.value[0] = 0.5;
  p.c2.value[0] = 0.25;
  p.b1.value[0] = -0.1;
  p.b2.value[0] = 0.05;
  const double x = 2.0, gamma2 = 0.75;
  // Unit weights: conv and its transpose are the identity on a 1x1 plane.
  double g1 = gamma2;
  const double t1 = g1 - x, t2 = t1;
  g1 = std::max(0.0, g1 - 0.5 * t2 + -0.1);
  const double t3 = gamma2 - g1, t4 = t3;
  const double next = std::max(0.0, gamma2 - 0.25 * t4 + 0.05);
  const auto [r1, r2] = ml_refine(Tensor<double>(Shape{1, 1, 1, 1}, gamma2),
                                  Tensor<double>(Shape{1, 1, 1, 1}, x), p);
  EXPECT_EQ(r1[0], g1);
  EXPECT_EQ(r2[0], next);
}

class FixedPoint : public ::testing::TestWithParam<std::size_t> {};

TEST_P(FixedPoint, ExactReconstructionIsInvariant) {
  const std::size_t stride = GetParam();
  auto p = make_block(2, 3, 4, 3, stride, 1, 0, 7);
  SplitMix64 rng(8);
  p.w1.value = random_uniform<double>(p.w1.value.shape(), rng, 0, 1);
  p.w2.value = random_uniform<double>(p.w2.value.shape(), rng, 0, 1);
  p.c1.value[0] = 0.9;
  p.c2.value[0] = 1.7;
  const std::size_t H = stride == 1 ? 8 : 13;
  const ConvGeom g = p.geom();
  const std::size_t h1 = conv_out_size(H, 3, g), h2 = conv_out_size(h1, 3, g);
  const auto star = relu(randn({2, 4, h2, h2}, 9));
  const auto x = conv_transpose2d(conv_transpose2d(star, p.w2.value, g, std::pair{h1, h1}),
                                  p.w1.value, g, std::pair{H, H});
  auto g2 = star;
  for (int t = 1; t <= 5; ++t) {
    g2 = ml_refine(g2, x, p).second;
    EXPECT_EQ(g2, star) << "iteration " << t;
  }
}

INSTANTIATE_TEST_SUITE_P(Strides, FixedPoint, ::testing::Values(1, 2));

TEST(MLForward, ZeroIterationsEqualsEncode) {
  auto a = make_block(3, 4, 4, 3, 1, 1, 0);
  auto b = a;
  const auto x = randn({2, 3, 6, 6}, 10);
  EXPECT_EQ(ml_forward(x, a, Mode::Train), ml_encode(x, b, Mode::Train).second);
}

TEST(MLForward, TapeMatchesDirect) {
  auto a = make_block(3, 4, 5, 3, 1, 1, 2);
  a.c1.value[0] = 0.3;
  auto b = a;
  const auto x = randn({2, 3, 6, 6}, 11);
  Tape<double> t;
  EXPECT_EQ(t.value(ml_forward(t, t.leaf(x), b, Mode::Train)), ml_forward(x, a, Mode::Train));
}

TEST(MLForward, TraceContract) {
  auto p = make_block(3, 4, 4, 3, 1, 1, 2);
  MLBlockTrace<double> trace;
  ml_forward(randn({1, 3, 6, 6}, 12), p, Mode::Train, &trace);
  ASSERT_EQ(trace.snapshots.size(), 3u);
  for (const auto& s : trace.snapshots) {
    EXPECT_GE(s.sparsity_gamma1, 0.0);
    EXPECT_LE(s.sparsity_gamma1, 1.0);
    EXPECT_GE(s.sparsity_gamma2, 0.0);
    EXPECT_LE(s.sparsity_gamma2, 1.0);
    EXPECT_GE(s.residual_norm, 0.0);
  }
  std::ostringstream os;
  write_trace_csv(os, trace);
  EXPECT_EQ(os.str().rfind("iteration,sparsity_gamma1,sparsity_gamma2,residual_norm\n", 0), 0u);
}

TEST(Sparsity, Fractions) {
  EXPECT_EQ(sparsity(Tensor<double>(Shape{1, 1, 2, 2})), 1.0);
  EXPECT_EQ(sparsity(Tensor<double>(Shape{1, 1, 2, 2}, 1.0)), 0.0);
  EXPECT_EQ(sparsity(Tensor<double>(Shape{1, 1, 1, 4}, std::vector<double>{0, 1, 0, 2})), 0.5);
  EXPECT_EQ(sparsity(Tensor<double>(Shape{1, 1, 1, 2}, std::vector<double>{1e-9, 1}), 1e-6), 0.5);
}

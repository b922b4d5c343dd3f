#include <gtest/gtest.h>

#include "cscde/ops.hpp"
#include "cscde/oracles.hpp"
#include "cscde/rng.hpp"

using namespace cscde;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return random_normal<double>(s, rng);
}

}  // namespace

TEST(Shape, ConvOutputSizeFormula) {
  EXPECT_EQ(conv_out_size(5, 3, {2, 1}), 3u);
  EXPECT_EQ(conv_out_size(96, 3, {1, 1}), 96u);
  EXPECT_EQ(conv_out_size(4, 4, {1, 0}), 1u);
  EXPECT_THROW(conv_out_size(2, 5, {1, 1}), ShapeError);
  EXPECT_THROW(conv_out_size(5, 3, {0, 1}), ShapeError);
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>(3)), ShapeError);
  Tensor<double> a(Shape{1, 1, 2, 2}), b(Shape{1, 2, 2, 1});
  EXPECT_THROW(a += b, ShapeError);
}

TEST(Conv2d, ZeroInputGivesZeros) {
  const auto k = randn({2, 1, 3, 3}, 1);
  const Tensor<double> y = conv2d(Tensor<double>(Shape{1, 1, 4, 4}), k, {1, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 4, 4}));
  for (double v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, ImpulseRevealsCrossCorrelation) {
  Tensor<double> x(Shape{1, 1, 3, 3});
  x.at(0, 0, 1, 1) = 1;
  const auto k = randn({1, 1, 3, 3}, 2);
  const Tensor<double> y = conv2d(x, k, {1, 1});
  // y(i,j) = sum k(a,b) x(i+a-1, j+b-1) picks k(2-i, 2-j).
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y.at(0, 0, i, j), k.at(0, 0, 2 - i, 2 - j));
  const Tensor<double> yd = oracle::conv2d_direct(x, k, 1, 1);
  EXPECT_EQ(max_abs_diff(y, yd), 0.0);
}

TEST(Conv2d, StrideTwoShape) {
  const Tensor<double> y = conv2d(randn({1, 1, 5, 5}, 3), randn({1, 1, 3, 3}, 4), {2, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
}

TEST(Conv2d, AllCodePathsMatchDirectSum) {
  // Channel mixes chosen to hit both the im2col and the shifted-window paths.
  const std::vector<std::array<std::size_t, 4>> cases{
      {1, 4, 1, 1}, {4, 4, 1, 1}, {8, 4, 1, 1}, {16, 8, 1, 1}, {24, 8, 1, 1},
      {8, 24, 1, 1}, {3, 5, 2, 1}, {8, 4, 2, 2}, {4, 2, 1, 0}, {16, 8, 1, 2}};
  std::uint64_t seed = 10;
  for (const auto& [cin, cout, stride, pad] : cases) {
    const auto x = randn({2, cin, 9, 7}, seed++);
    const auto k = randn({cout, cin, 3, 3}, seed++);
    const auto y = conv2d(x, k, {stride, pad});
    const auto yd = oracle::conv2d_direct(x, k, stride, pad);
    EXPECT_LE(max_abs_diff(y, yd), 1e-12 * (1 + l2_norm(yd))) << cin << "->" << cout;
  }
}

TEST(Conv2d, WeightGradientMatchesDirectSum) {
  std::uint64_t seed = 40;
  for (const auto& [cin, cout, stride] :
       std::vector<std::array<std::size_t, 3>>{{16, 4, 1}, {4, 4, 1}, {3, 2, 2}, {24, 8, 1}}) {
    const auto x = randn({2, cin, 8, 6}, seed++);
    const ConvGeom g{stride, 1};
    const std::size_t oh = conv_out_size(8, 3, g), ow = conv_out_size(6, 3, g);
    const auto gy = randn({2, cout, oh, ow}, seed++);
    const auto gw = conv2d_weight_grad(x, gy, g, 3, 3);
    Tensor<double> ref(Shape{cout, cin, 3, 3});
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t a = 0; a < 3; ++a)
          for (std::size_t b = 0; b < 3; ++b) {
            long double s = 0;
            for (std::size_t n = 0; n < 2; ++n)
              for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                  const long yy = long(i * stride + a) - 1, xx = long(j * stride + b) - 1;
                  if (yy < 0 || xx < 0 || yy >= 8 || xx >= 6) continue;
                  s += x.at(n, c, yy, xx) * gy.at(n, o, i, j);
                }
            ref.at(o, c, a, b) = static_cast<double>(s);
          }
    EXPECT_LE(max_abs_diff(gw, ref), 1e-12 * (1 + l2_norm(ref)));
  }
}

TEST(ConvTranspose2d, ZeroInGivesZeroOut) {
  const auto out = conv_transpose2d(Tensor<double>(Shape{1, 3, 3, 3}), randn({3, 2, 3, 3}, 5),
                                    {2, 1}, std::pair<std::size_t, std::size_t>{6, 6});
  EXPECT_EQ(out.shape(), (Shape{1, 2, 6, 6}));
  for (double v : out.vec()) EXPECT_EQ(v, 0.0);
}

TEST(ConvTranspose2d, AdjointOfConv) {
  const auto x = randn({1, 2, 6, 6}, 6);
  const auto w = randn({3, 2, 3, 3}, 7);
  const ConvGeom g{2, 1};
  const auto y = randn(conv2d(x, w, g).shape(), 8);
  const long double lhs = dot(conv2d(x, w, g), y);
  const long double rhs = dot(x, conv_transpose2d(y, w, g, std::pair<std::size_t, std::size_t>{6, 6}));
  EXPECT_LE(std::fabs(static_cast<double>(lhs - rhs)) / std::fabs(static_cast<double>(lhs)), 1e-10);
}

TEST(ConvTranspose2d, ScalarKernelScales) {
  const auto y = randn({2, 1, 4, 5}, 9);
  const auto out = conv_transpose2d(y, Tensor<double>(Shape{1, 1, 1, 1}, 2.5), {1, 0});
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(out[i], 2.5 * y[i]);
}

TEST(ConvTranspose2d, RejectsInconsistentOutputSize) {
  const auto y = randn({1, 1, 3, 3}, 11);
  EXPECT_THROW(conv_transpose2d(y, randn({1, 1, 3, 3}, 12), {2, 1},
                                std::pair<std::size_t, std::size_t>{9, 9}),
               ShapeError);
}

TEST(Relu, Basics) {
  Tensor<double> x(Shape{1, 1, 1, 3}, std::vector<double>{-1, 0, 2});
  EXPECT_EQ(relu(x).vec(), (std::vector<double>{0, 0, 2}));
  const auto r = randn({2, 3, 4, 4}, 13);
  EXPECT_EQ(relu(relu(r)), relu(r));
  const auto zeroed = relu(Tensor<double>(Shape{1, 2, 2, 2}, -0.5));
  for (double v : zeroed.vec()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, TrainModeStandardizes) {
  auto x = randn({4, 3, 5, 5}, 14);
  for (auto& v : x.vec()) v = 3 * v + 7;
  BNState<double> st(3);
  const auto y = batch_norm(x, st, Mode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    const double n = 4 * 25;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) m += y.plane(b, c)[i] / n;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) v += (y.plane(b, c)[i] - m) * (y.plane(b, c)[i] - m) / n;
    EXPECT_NEAR(m, 0.0, 1e-6);
    // eps = 1e-5 shrinks the variance by var / (var + eps).
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(BatchNorm, EvalWithUnitStatisticsIsNearIdentity) {
  const auto x = randn({2, 2, 3, 3}, 15);
  BNState<double> st(2);
  const auto y = batch_norm(x, st, Mode::Eval);
  EXPECT_LE(max_abs_diff(x, y), 1e-5 * (1 + l2_norm(x)));
  // Identity bit for bit once var + eps rounds to one.
  st.running_var.fill(1.0 - BNState<double>::eps);
  EXPECT_EQ(batch_norm(x, st, Mode::Eval), x);
}

TEST(BatchNorm, ConstantChannelGoesToZero) {
  Tensor<double> x(Shape{2, 1, 3, 3}, 4.0);
  BNState<double> st(1);
  const auto y = batch_norm(x, st, Mode::Train);
  for (double v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Upsample2x, ConstantStaysConstant) {
  const auto y = upsample2x(Tensor<double>(Shape{1, 2, 3, 4}, 3.0));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 6, 8}));
  for (double v : y.vec()) EXPECT_EQ(v, 3.0);
}

TEST(Upsample2x, HandEvaluatedBilinear) {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  // Half-pixel centres: source coordinate (o + 0.5) / 2 - 0.5, clamped.
  const std::vector<double> want{1.0, 1.25, 1.75, 2.0,  //
                                 1.5, 1.75, 2.25, 2.5,  //
                                 2.5, 2.75, 3.25, 3.5,  //
                                 3.0, 3.25, 3.75, 4.0};
  const auto y = upsample2x(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(y[i], want[i]) << i;
}

TEST(Upsample2x, ShapeContract) {
  EXPECT_EQ(upsample2x(Tensor<double>(Shape{1, 4, 7, 5})).shape(), (Shape{1, 4, 14, 10}));
}

TEST(AvgPool2x, AveragesBlocks) {
  Tensor<double> x(Shape{1, 1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  const auto y = avg_pool2x(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(y[0], 3.5);
  EXPECT_EQ(y[1], 5.5);
}

TEST(ConcatChannels, ShapeAndRoundTrip) {
  const auto a = randn({1, 3, 8, 8}, 16), b = randn({1, 5, 8, 8}, 17);
  const auto c = concat_channels(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 8, 8, 8}));
  const auto [a2, b2] = split_channels(c, 3);
  EXPECT_EQ(a2, a);
  EXPECT_EQ(b2, b);
  EXPECT_EQ(concat_channels(a, Tensor<double>(Shape{1, 0, 8, 8})), a);
  EXPECT_THROW(concat_channels(a, randn({1, 1, 4, 8}, 18)), ShapeError);
}

TEST(Softmax, RowsSumToOne) {
  const auto p = softmax_channels(randn({2, 4, 3, 3}, 19));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += p.plane(n, c)[i];
      EXPECT_NEAR(s, 1.0, 1e-15);
    }
}

TEST(Tensor, OpsKeepFiniteInputsFinite) {
  const auto x = randn({2, 4, 8, 8}, 20);
  const auto k = randn({4, 4, 3, 3}, 21);
  BNState<double> st(4);
  EXPECT_TRUE(conv2d(x, k, {1, 1}).all_finite());
  EXPECT_TRUE(conv_transpose2d(x, k, {1, 1}).all_finite());
  EXPECT_TRUE(batch_norm(x, st, Mode::Train).all_finite());
  EXPECT_TRUE(upsample2x(x).all_finite());
  EXPECT_TRUE(softmax_channels(scale(x, 1e3)).all_finite());
}

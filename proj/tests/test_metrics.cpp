#include <gtest/gtest.h>

#include <cmath>

#include "cscde/metrics.hpp"
#include "cscde/oracles.hpp"
#include "cscde/rng.hpp"

using namespace cscde;

namespace {

LabelMap blank(std::size_t h, std::size_t w) { return LabelMap(Shape{1, 1, h, w}); }

void fill_rect(LabelMap& m, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1,
               std::uint8_t cls) {
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) m.at(0, 0, y, x) = cls;
}

}  // namespace

TEST(Dsc, ClosedForms) {
  auto p = blank(4, 4), g = blank(4, 4);
  EXPECT_EQ(dsc(p, g, 1), 1.0);  // absent from both
  fill_rect(g, 0, 2, 0, 2, 1);
  EXPECT_EQ(dsc(p, g, 1), 0.0);
  p = g;
  EXPECT_EQ(dsc(p, g, 1), 1.0);
  p = blank(4, 4);
  fill_rect(p, 0, 2, 0, 1, 1);  // 2 of the 4 gt pixels
  EXPECT_DOUBLE_EQ(dsc(p, g, 1), 2.0 * 2 / (2 + 4));
  fill_rect(p, 3, 4, 0, 4, 1);  // plus 4 false positives
  EXPECT_DOUBLE_EQ(dsc(p, g, 1), 2.0 * 2 / (6 + 4));
}

TEST(Dsc, ShapeMismatchThrows) {
  EXPECT_THROW(dsc(blank(4, 4), blank(4, 5), 1), ShapeError);
  EXPECT_THROW(hd95(blank(4, 4), blank(5, 4), 1), ShapeError);
}

TEST(Hd95, SinglePixelsThreeFourFive) {
  auto p = blank(8, 8), g = blank(8, 8);
  p.at(0, 0, 0, 0) = 1;
  g.at(0, 0, 3, 4) = 1;
  EXPECT_EQ(hd95(p, g, 1), 5.0);
}

TEST(Hd95, IdenticalMasksGiveZero) {
  auto m = blank(16, 16);
  fill_rect(m, 3, 11, 2, 9, 2);
  EXPECT_EQ(hd95(m, m, 2), 0.0);
}

TEST(Hd95, EmptyConventions) {
  auto g = blank(6, 8);
  EXPECT_EQ(hd95(blank(6, 8), blank(6, 8), 1), 0.0);
  fill_rect(g, 1, 3, 1, 3, 1);
  EXPECT_EQ(hd95(blank(6, 8), g, 1), 10.0);  // image diagonal
  EXPECT_EQ(hd95(g, blank(6, 8), 1), 10.0);
}

TEST(Hd95, ShiftedSquareIsShift) {
  auto p = blank(20, 20), g = blank(20, 20);
  fill_rect(p, 5, 10, 5, 10, 1);
  fill_rect(g, 5, 10, 8, 13, 1);
  // Every boundary point on either side is within 3; the far edges sit at exactly 3.
  const double d = hd95(p, g, 1);
  EXPECT_GT(d, 0.0);
  EXPECT_LE(d, 3.0);
  EXPECT_DOUBLE_EQ(d, oracle::hd95_all_pairs(p, g, 1));
}

TEST(Hd95, MatchesAllPairsOracleOnRandomMasks) {
  SplitMix64 rng(2024);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t h = 4 + rng.below(20), w = 4 + rng.below(20);
    auto a = blank(h, w), b = blank(h, w);
    for (auto* m : {&a, &b}) {
      const std::size_t blobs = rng.below(4);
      for (std::size_t k = 0; k < blobs; ++k) {
        const std::size_t y0 = rng.below(h), x0 = rng.below(w);
        fill_rect(*m, y0, std::min(h, y0 + 1 + rng.below(6)), x0, std::min(w, x0 + 1 + rng.below(6)),
                  1);
      }
      // Sprinkled single pixels exercise one-pixel-thick boundaries.
      for (std::size_t k = rng.below(5); k > 0; --k) m->at(0, 0, rng.below(h), rng.below(w)) = 1;
    }
    const double fast = hd95(a, b, 1);
    EXPECT_NEAR(fast, oracle::hd95_all_pairs(a, b, 1), 1e-12) << "trial " << trial;
    EXPECT_EQ(fast, hd95(b, a, 1));
  }
}

TEST(Percentile95, LinearInterpolation) {
  EXPECT_EQ(oracle::percentile95({}), 0.0);
  EXPECT_EQ(oracle::percentile95({7}), 7.0);
  // pos = 0.95 * 20 = 19 exactly.
  std::vector<double> v;
  for (int i = 0; i <= 20; ++i) v.push_back(i);
  EXPECT_DOUBLE_EQ(oracle::percentile95(v), 19.0);
  // pos = 0.95 * 1 = 0.95.
  EXPECT_DOUBLE_EQ(oracle::percentile95({0, 10}), 9.5);
}

TEST(Evaluate, GroundTruthEchoIsPerfect) {
  SplitMix64 rng(3);
  std::vector<std::pair<LabelMap, LabelMap>> cases;
  for (int i = 0; i < 5; ++i) {
    auto m = blank(12, 12);
    fill_rect(m, rng.below(6), 6 + rng.below(6), rng.below(6), 6 + rng.below(6),
              static_cast<std::uint8_t>(1 + rng.below(3)));
    cases.emplace_back(m, m);
  }
  const auto r = evaluate<LabelMap>(cases, 4, [](const LabelMap& m) { return m; });
  EXPECT_EQ(r.mean_dsc, 1.0);
  EXPECT_EQ(r.mean_hd95, 0.0);
  EXPECT_EQ(r.n_cases, 5u);
}

TEST(Evaluate, ConstantBackgroundScoresZero) {
  auto g = blank(10, 10);
  fill_rect(g, 2, 6, 2, 6, 1);
  fill_rect(g, 6, 9, 6, 9, 3);
  std::vector<std::pair<LabelMap, LabelMap>> cases{{g, g}};
  const auto r = evaluate<LabelMap>(cases, 4, [](const LabelMap& m) { return LabelMap(m.shape()); });
  EXPECT_EQ(r.mean_dsc, 0.0);
  EXPECT_NEAR(r.mean_hd95, std::sqrt(200.0), 1e-12);
}

TEST(Evaluate, HandAveragedTwoCaseReport) {
  // Case A: class 1 half right (dsc 2/3), class 2 perfect. Case B: class 2 missed.
  auto ga = blank(8, 8), pa = blank(8, 8);
  fill_rect(ga, 0, 2, 0, 2, 1);
  fill_rect(pa, 0, 2, 0, 1, 1);
  fill_rect(ga, 5, 7, 5, 7, 2);
  fill_rect(pa, 5, 7, 5, 7, 2);
  auto gb = blank(8, 8), pb = blank(8, 8);
  fill_rect(gb, 3, 5, 3, 5, 2);

  MetricAccumulator acc(3);
  acc.add(pa, ga);
  acc.add(pb, gb);
  const auto r = acc.report();

  const double a1 = 2.0 / 3.0, h1 = hd95(pa, ga, 1);
  const double diag = std::sqrt(128.0);
  EXPECT_DOUBLE_EQ(r.mean_dsc, ((a1 + 1.0) / 2 + 0.0) / 2);
  EXPECT_DOUBLE_EQ(r.mean_hd95, ((h1 + 0.0) / 2 + diag) / 2);
  ASSERT_EQ(r.per_class.size(), 2u);
  EXPECT_EQ(r.per_class[0].cls, 1);
  EXPECT_DOUBLE_EQ(r.per_class[0].dsc, a1);
  EXPECT_EQ(r.per_class[1].cls, 2);
  EXPECT_DOUBLE_EQ(r.per_class[1].dsc, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[1].hd95, diag / 2);
}

TEST(EvalReport, JsonSchemaRoundTrip) {
  EvalReport r;
  r.mean_dsc = 0.75;
  r.mean_hd95 = 3.5;
  r.n_cases = 2;
  r.per_class = {{1, 0.5, 2.0}, {2, 1.0, 5.0}};
  const nlohmann::json j = r;
  for (const char* k : {"mean_dsc", "mean_hd95", "per_class", "n_cases"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["per_class"][1]["class"], 2);
  EXPECT_EQ(nlohmann::json(j.get<EvalReport>()), j);
}

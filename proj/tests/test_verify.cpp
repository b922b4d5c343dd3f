#include <gtest/gtest.h>

#include "cscde/verify.hpp"

using namespace cscde;

namespace {

void expect_all_pass(const verify::SuiteResult& s) {
  EXPECT_FALSE(s.checks.empty()) << s.suite;
  for (const auto& c : s.checks) EXPECT_TRUE(c.passed) << s.suite << "/" << c.name << " " << c.detail.dump();
}

}  // namespace

TEST(Verify, AdjointSuitePasses) { expect_all_pass(verify::adjoint_suite(42)); }

TEST(Verify, AdjointSuiteOtherSeed) { expect_all_pass(verify::adjoint_suite(7, 40)); }

TEST(Verify, MechanicsSuitePasses) { expect_all_pass(verify::mechanics_suite(42)); }

TEST(Verify, MetricsSuitePasses) { expect_all_pass(verify::metrics_suite(42)); }

TEST(Verify, GradSuitePasses) { expect_all_pass(verify::grad_suite(42)); }

TEST(Verify, GradSuiteCatchesBrokenReluBackward) {
  const auto s = verify::grad_suite(42, Fault::NegatedReluMask);
  EXPECT_FALSE(s.passed());
  EXPECT_FALSE(s.failures().empty());
}

TEST(Verify, ReportJsonShape) {
  const auto j = verify::to_json(verify::metrics_suite(1));
  EXPECT_EQ(j["suite"], "metrics");
  ASSERT_TRUE(j["checks"].is_array());
  for (const auto& c : j["checks"]) {
    EXPECT_TRUE(c.contains("name"));
    EXPECT_TRUE(c.contains("passed"));
  }
}

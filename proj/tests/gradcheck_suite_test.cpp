#include <gtest/gtest.h>

#include <chrono>

#include "dinet/gradcheck_suite.hpp"
#include "dinet/ops.hpp"

namespace dinet {
namespace {

TEST(GradCheckSuite, OpsPassWithinBudget) {
  const auto start = std::chrono::steady_clock::now();
  const auto report = run_grad_check(GradCheckScope::ops);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (const auto& r : report.results) {
    EXPECT_TRUE(r.passed) << r.op << " max error " << r.max_error;
    EXPECT_GE(r.configs, 20u) << r.op;
  }
  EXPECT_TRUE(report.passed());
  EXPECT_LE(seconds, 120.0);
}

TEST(GradCheckSuite, ModelStepPasses) {
  const auto report = run_grad_check(GradCheckScope::model);
  ASSERT_EQ(report.results.size(), 1u);
  EXPECT_TRUE(report.passed()) << "max error " << report.results[0].max_error;
}

TEST(GradCheckSuite, InjectedConvFaultFails) {
  GradCheckOptions opts;
  opts.configs_per_op = 3;
  opts.inject_conv_fault = true;
  const auto report = run_grad_check(GradCheckScope::ops, opts);
  EXPECT_FALSE(report.passed());
  const auto bad = report.failing();
  EXPECT_NE(std::ranges::find(bad, "conv3d"), bad.end());
  EXPECT_FALSE(dinet::testing::conv3d_backward_fault());
  // The model step runs through conv3d as well.
  opts.configs_per_op = 1;
  EXPECT_FALSE(run_grad_check(GradCheckScope::model, opts).passed());
}

TEST(GradCheckSuite, ScopeNames) {
  EXPECT_EQ(parse_grad_check_scope("ops"), GradCheckScope::ops);
  EXPECT_EQ(parse_grad_check_scope("model"), GradCheckScope::model);
  EXPECT_THROW(parse_grad_check_scope("all"), Error);
  EXPECT_THROW(run_grad_check(GradCheckScope::ops, GradCheckOptions{.configs_per_op = 0}), Error);
}

}  // namespace
}  // namespace dinet

#pragma once

// Randomized finite-difference suites over every differentiable op and over
// a full training step. Everything runs in double precision.

#include <cstdint>
#include <string>
#include <vector>

#include "dinet/gradcheck.hpp"

namespace dinet {

enum class GradCheckScope { ops, model };
const char* grad_check_scope_name(GradCheckScope scope);
GradCheckScope parse_grad_check_scope(const std::string& name);

struct GradCheckOptions {
  std::size_t configs_per_op = 20;
  std::uint64_t seed = 1;
  GradTolerance tolerance;
  // Sign-flips the conv3d input gradient for the duration of the run.
  bool inject_conv_fault = false;
};

struct OpCheckResult {
  std::string op;
  std::size_t configs = 0;
  double max_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  GradCheckScope scope = GradCheckScope::ops;
  std::vector<OpCheckResult> results;
  bool passed() const;
  std::vector<std::string> failing() const;
};

GradCheckReport run_grad_check(GradCheckScope scope, const GradCheckOptions& options = {});

}  // namespace dinet

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssa/gradcheck.hpp"

namespace ssa {

// One differentiable computation exercised by the suite, checked on fresh random inputs per trial.
struct GradSuiteCase {
  std::string name;
  std::size_t trials = 0;
  double worst_rel_error = 0.0;
  std::string worst_param;  // parameter holding the worst entry
  bool passed = true;
};

struct GradSuiteResult {
  std::vector<GradSuiteCase> cases;
  double worst_rel_error = 0.0;
  double tol = 0.0;
  bool passed = true;
};

// Every tape op plus the full selective-attention forward pass under each temperature kind.
GradSuiteResult run_gradient_suite(std::size_t trials, std::uint64_t seed, double tol = 1e-4);

std::vector<std::string> gradient_suite_case_names();

}  // namespace ssa

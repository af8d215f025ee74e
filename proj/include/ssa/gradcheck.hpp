#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ssa/autodiff.hpp"

namespace ssa {

struct NamedParam {
  std::string name;
  Matrix value;
};

struct GradCheckEntry {
  std::string param;
  std::size_t row = 0;
  std::size_t col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;  // worst relative error first
  double worst_rel_error = 0.0;
  double tol = 0.0;
  bool passed = true;
};

// Builds a 1x1 output on the given tape from one leaf per parameter, in order.
using ScalarFunction = std::function<Var(Tape&, const std::vector<Var>&)>;

// Gradients at or below this magnitude are compared on an absolute scale.
inline constexpr double kGradCheckFloor = 1e-4;

double gradcheck_relative_error(double analytic, double numeric);

// Compares reverse-mode gradients with central differences (f(x+eps) - f(x-eps)) / 2eps.
GradCheckReport finite_difference_check(const ScalarFunction& f, const std::vector<NamedParam>& params,
                                        double eps = 1e-5, double tol = 1e-4);

}  // namespace ssa

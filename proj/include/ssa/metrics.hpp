#pragma once

#include <cstddef>
#include <span>

#include "ssa/matrix.hpp"

namespace ssa {

// ||s||_1 / (||s||_2^2 * L): 1 for uniform rows, 1/L for one-hot rows.
double spikiness(std::span<const double> s, std::size_t L);
// Mean spikiness over the rows of a row-stochastic matrix (row length = L).
double mean_spikiness(const Matrix& rows);

// ||W^T q||.
double specificity(const Matrix& w, std::span<const double> q);

struct PowerIterationOptions {
  double tol = 1e-10;
  std::size_t max_iterations = 10000;
};

// Largest singular value via power iteration on W^T W.
double operator_norm(const Matrix& w, PowerIterationOptions opts = {});

double entropy(std::span<const double> p);
double linf(std::span<const double> p);

}  // namespace ssa

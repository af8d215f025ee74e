#include "ssa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ssa/errors.hpp"

namespace ssa {

double spikiness(std::span<const double> s, std::size_t L) {
  if (s.empty() || L == 0) throw DomainError("spikiness of an empty vector");
  double l1 = 0.0, l2sq = 0.0;
  for (double v : s) {
    if (v < 0.0) throw DomainError("spikiness: negative entry");
    l1 += v;
    l2sq += v * v;
  }
  if (std::abs(l1 - 1.0) > 1e-9) throw DomainError("spikiness: entries sum to " + std::to_string(l1) + ", not 1");
  return l1 / (l2sq * double(L));
}

double mean_spikiness(const Matrix& rows) {
  if (rows.rows() == 0) throw DomainError("mean_spikiness of no rows");
  double acc = 0.0;
  for (std::size_t i = 0; i < rows.rows(); ++i) acc += spikiness(rows.row(i), rows.cols());
  return acc / double(rows.rows());
}

double specificity(const Matrix& w, std::span<const double> q) {
  if (q.size() != w.rows()) {
    throw ShapeError("specificity: query of length " + std::to_string(q.size()) + " against " + w.shape_string());
  }
  return vector_norm(matmul(transpose(w), Matrix::column_vector(q)).data());
}

double operator_norm(const Matrix& w, PowerIterationOptions opts) {
  const std::size_t n = w.cols();
  if (n == 0 || w.rows() == 0 || max_abs(w) == 0.0) return 0.0;
  const Matrix gram = matmul(transpose(w), w);
  // Fixed, non-symmetric start so it is almost surely not orthogonal to the top singular vector.
  Matrix v(n, 1);
  for (std::size_t i = 0; i < n; ++i) v(i, 0) = 1.0 + 0.37 * std::sin(1.0 + 2.3 * double(i));
  v *= 1.0 / frobenius_norm(v);
  double lambda = 0.0;
  for (std::size_t it = 1; it <= opts.max_iterations; ++it) {
    Matrix gv = matmul(gram, v);
    const double next = dot(v.data(), gv.data());
    const double norm = frobenius_norm(gv);
    if (norm == 0.0) return 0.0;
    gv *= 1.0 / norm;
    v = std::move(gv);
    if (it > 1 && std::abs(next - lambda) <= opts.tol * std::max(1.0, std::abs(next))) {
      return std::sqrt(std::max(next, 0.0));
    }
    lambda = next;
  }
  throw ConvergenceError("operator_norm: power iteration did not converge in " +
                             std::to_string(opts.max_iterations) + " iterations",
                         opts.max_iterations);
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double linf(std::span<const double> p) {
  double m = 0.0;
  for (double v : p) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace ssa

#include "ssa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ssa/errors.hpp"

namespace ssa {

namespace {

double evaluate(const ScalarFunction& f, const std::vector<NamedParam>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p.value));
  return f(tape, leaves).value().item();
}

}  // namespace

double gradcheck_relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / scale;
}

GradCheckReport finite_difference_check(const ScalarFunction& f, const std::vector<NamedParam>& params,
                                        double eps, double tol) {
  if (!(eps > 0.0)) throw DomainError("finite_difference_check: eps must be positive");
  GradCheckReport report;
  report.tol = tol;

  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p.value));
    Var out = f(tape, leaves);
    tape.backward(out);
    for (const Var& v : leaves) analytic.push_back(v.grad());
  }

  std::vector<NamedParam> probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    Matrix& m = probe[p].value;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t j = 0; j < m.cols(); ++j) {
        const double orig = m(i, j);
        m(i, j) = orig + eps;
        const double up = evaluate(f, probe);
        m(i, j) = orig - eps;
        const double down = evaluate(f, probe);
        m(i, j) = orig;
        GradCheckEntry e;
        e.param = probe[p].name;
        e.row = i;
        e.col = j;
        e.analytic = analytic[p](i, j);
        e.numeric = (up - down) / (2.0 * eps);
        e.rel_error = gradcheck_relative_error(e.analytic, e.numeric);
        report.entries.push_back(std::move(e));
      }
    }
  }
  std::stable_sort(report.entries.begin(), report.entries.end(),
                   [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.rel_error > b.rel_error; });
  report.worst_rel_error = report.entries.empty() ? 0.0 : report.entries.front().rel_error;
  report.passed = report.worst_rel_error < tol;
  return report;
}

}  // namespace ssa

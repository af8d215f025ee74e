#include "ssa/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ssa/errors.hpp"

namespace ssa {

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

std::vector<double> diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("vectors of different length");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

// Gaussian elimination with partial pivoting; throws DomainError on a (numerically) singular system.
std::vector<double> solve_linear(Matrix a, std::vector<double> rhs) {
  const std::size_t n = a.rows();
  double scale = max_abs(a);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
    if (std::abs(a(piv, col)) <= 1e-12 * scale) throw DomainError("singular linear system");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(piv, j));
      std::swap(rhs[col], rhs[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a(r, j) -= f * a(col, j);
      rhs[r] -= f * rhs[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = rhs[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= a(i, j) * x[j];
    x[i] = s / a(i, i);
  }
  return x;
}

// Minimizes a unimodal function on [lo, hi].
template <class F>
double golden_min(F f, double lo, double hi, int iters = 200) {
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - r * (hi - lo), x2 = lo + r * (hi - lo);
  double f1 = f(x1), f2 = f(x2);
  for (int i = 0; i < iters; ++i) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - r * (hi - lo);
      f1 = f(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + r * (hi - lo);
      f2 = f(x2);
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace

double norm_lower_bound(double logit_a, double logit_b, std::span<const double> a, std::span<const double> b) {
  const double d = vector_norm(diff(a, b));
  if (d == 0.0) throw DomainError("norm_lower_bound: a and b coincide");
  return (logit_a - logit_b) / d;
}

double TwoTokenProblem::rho() const { return dot(e1, e2); }

double TwoTokenProblem::big_gamma() const { return std::abs(std::log((1.0 - gamma) / gamma)); }

void TwoTokenProblem::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw DomainError("gamma must lie in (0, 1)");
  if (!(eps > 0.0 && eps <= 0.5 * std::min(gamma, 1.0 - gamma) * (1.0 + 1e-12))) {
    throw DomainError("eps must lie in (0, min(gamma, 1-gamma)/2]");
  }
  if (std::abs(vector_norm(e1) - 1.0) > 1e-9 || std::abs(vector_norm(e2) - 1.0) > 1e-9) {
    throw DomainError("embeddings must have unit norm");
  }
  if (std::abs(rho()) >= 1.0 - 1e-12) throw DomainError("degenerate embeddings: |rho| = 1");
}

Matrix TwoTokenProblem::target() const { return Matrix::from_rows({{1.0 - gamma, gamma}, {0.0, 1.0}}); }

Matrix TwoTokenProblem::embeddings() const {
  Matrix e(2, e1.size());
  std::copy(e1.begin(), e1.end(), e.row(0).begin());
  std::copy(e2.begin(), e2.end(), e.row(1).begin());
  return e;
}

TwoTokenProblem make_two_token_problem(double gamma, double rho, double eps) {
  if (std::abs(rho) >= 1.0) throw DomainError("degenerate embeddings: |rho| = 1");
  TwoTokenProblem p{gamma, eps, {1.0, 0.0}, {rho, std::sqrt(1.0 - rho * rho)}};
  p.validate();
  return p;
}

double approx_lower_bound(const TwoTokenProblem& p) {
  p.validate();
  const double rho = p.rho();
  const double u = vector_norm(diff(p.e1, p.e2));
  return (std::log(1.0 / (4.0 * p.eps)) - p.big_gamma()) / (u * std::sqrt(2.0 - 2.0 * rho * rho));
}

double approx_upper_bound(const TwoTokenProblem& p) {
  p.validate();
  const double rho = p.rho();
  const double u = vector_norm(diff(p.e1, p.e2));
  return std::max(std::log(1.0 / p.eps), p.big_gamma() / std::sqrt(1.0 - rho * rho)) / u;
}

Matrix two_token_map(const Matrix& w, const TwoTokenProblem& p) {
  const double ones[] = {1.0, 1.0};
  return two_token_map(w, ones, p);
}

Matrix two_token_map(const Matrix& w, std::span<const double> tau, const TwoTokenProblem& p) {
  const Matrix e = p.embeddings();
  Matrix logits = matmul(matmul(e, w), transpose(e));
  Matrix out(2, 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const double l0 = tau[i] * logits(i, 0), l1 = tau[i] * logits(i, 1);
    const double m = std::max(l0, l1);
    const double z = std::exp(l0 - m) + std::exp(l1 - m);
    out(i, 0) = std::exp(l0 - m) / z;
    out(i, 1) = std::exp(l1 - m) / z;
  }
  return out;
}

double approximation_error(const Matrix& map, const TwoTokenProblem& p) { return max_abs_diff(map, p.target()); }

double min_plain_norm(const TwoTokenProblem& p) {
  p.validate();
  const double rho = p.rho();
  const double u = vector_norm(diff(p.e1, p.e2));
  const double lo = logit(1.0 - p.gamma - p.eps), hi = logit(1.0 - p.gamma + p.eps);
  const double d2min = std::log((1.0 - p.eps) / p.eps);
  // ||W u|| with e1.Wu = D1 and e2.Wu = -D2, minimized over the feasible (D1, D2) box.
  auto best_for = [&](double d2) {
    const double d1 = std::clamp(-rho * d2, lo, hi);
    return (d1 * d1 + 2.0 * rho * d1 * d2 + d2 * d2) / (1.0 - rho * rho);
  };
  const double d2 = golden_min(best_for, d2min, d2min + 1e3);
  return std::sqrt(std::min(best_for(d2), best_for(d2min))) / u;
}

SelectiveConstruction selective_construction(const TwoTokenProblem& p) {
  p.validate();
  const std::size_t d = p.e1.size();
  const std::vector<double> u = diff(p.e1, p.e2);
  const double unorm = vector_norm(u);
  const double lo = logit(1.0 - p.gamma - p.eps), hi = logit(1.0 - p.gamma + p.eps);
  const double d1 = (lo <= 0.0 && hi >= 0.0) ? 0.0 : (std::abs(lo) < std::abs(hi) ? lo : hi);
  const double d2 = std::log((1.0 - p.eps) / p.eps);

  // Orthonormal basis (f1, f2) of span(e1, e2); z(theta) = cos f1 + sin f2.
  std::vector<double> f1 = p.e1, f2(d);
  const double rho = p.rho();
  for (std::size_t i = 0; i < d; ++i) f2[i] = p.e2[i] - rho * p.e1[i];
  const double f2n = vector_norm(f2);
  for (double& v : f2) v /= f2n;
  auto z_at = [&](double th) {
    std::vector<double> z(d);
    for (std::size_t i = 0; i < d; ++i) z[i] = std::cos(th) * f1[i] + std::sin(th) * f2[i];
    return z;
  };
  auto cost_at = [&](double th) {
    const auto z = z_at(th);
    const double c1 = std::abs(dot(p.e1, z)), c2 = std::abs(dot(p.e2, z));
    const double t1 = d1 == 0.0 ? 0.0 : (c1 == 0.0 ? INFINITY : std::abs(d1) / c1);
    const double t2 = c2 == 0.0 ? INFINITY : d2 / c2;
    return std::max(t1, t2) / unorm;
  };
  const int grid = 20000;
  double best_th = 0.0, best = INFINITY;
  for (int k = 0; k < grid; ++k) {
    const double th = 2.0 * std::numbers::pi * k / grid;
    const double c = cost_at(th);
    if (c < best) {
      best = c;
      best_th = th;
    }
  }
  const double step = 2.0 * std::numbers::pi / grid;
  best_th = golden_min(cost_at, best_th - step, best_th + step);

  const auto z = z_at(best_th);
  SelectiveConstruction out;
  out.w = Matrix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out.w(i, j) = z[i] * u[j] / unorm;
  // Row 1 logit gap tau1 * e1.W u = d1, row 2 gap -tau2 * e2.W u = d2, with W u = z ||u||.
  const double t1 = d1 == 0.0 ? 0.0 : d1 / (dot(p.e1, z) * unorm);
  const double t2 = -d2 / (dot(p.e2, z) * unorm);
  out.tau = {t1, t2};
  out.cost = std::max(std::abs(t1), std::abs(t2));
  out.error = approximation_error(two_token_map(out.w, out.tau, p), p);
  return out;
}

Matrix ImbalancedInstance::sequence() const {
  Matrix x(length(), dim());
  for (std::size_t n = 0; n < length(); ++n) {
    const auto& src = is_a[n] ? a : b;
    std::copy(src.begin(), src.end(), x.row(n).begin());
  }
  return x;
}

std::vector<double> ImbalancedInstance::target() const {
  std::vector<double> y(dim());
  for (std::size_t i = 0; i < dim(); ++i) y[i] = alpha * a[i] + (1.0 - alpha) * b[i];
  return y;
}

void finalize_instance(ImbalancedInstance& inst) {
  const std::size_t L = inst.length();
  inst.kappa.assign(L, 0.0);
  inst.n0 = 0;
  std::size_t na = 0;
  for (std::size_t n = 1; n <= L; ++n) {
    if (inst.is_a[n - 1]) ++na;
    inst.kappa[n - 1] = na == 0 ? std::numeric_limits<double>::infinity() : double(n - na) / double(na);
    if (inst.n0 == 0 && na > 0 && na < n) inst.n0 = n;
  }
  if (na == 0) throw DomainError("imbalanced instance never contains the minority token");
  if (inst.n0 == 0) throw DomainError("imbalanced instance never contains the majority token");
}

double optimal_position_temperature(double kappa, double alpha) {
  if (!(kappa > 0.0) || !std::isfinite(kappa)) throw DomainError("optimal temperature needs 0 < kappa < inf");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("optimal temperature needs alpha in (0, 1)");
  return std::log(kappa) + std::log(alpha / (1.0 - alpha));
}

std::vector<double> optimal_position_temperatures(const ImbalancedInstance& inst) {
  std::vector<double> tau(inst.length(), 0.0);
  for (std::size_t n = inst.n0; n <= inst.length(); ++n)
    tau[n - 1] = optimal_position_temperature(inst.kappa[n - 1], inst.alpha);
  return tau;
}

Matrix construct_optimal_w(std::span<const double> a, std::span<const double> b) {
  const std::size_t d = a.size();
  if (b.size() != d || d < 2) throw ShapeError("construct_optimal_w: a and b need equal length >= 2");
  // Constraints <u_k v_k^T, W> = c_k; the least-norm W is sum_k lambda_k u_k v_k^T.
  std::vector<std::vector<double>> us, vs;
  std::vector<double> rhs;
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> ej(d, 0.0);
    ej[j] = 1.0;
    us.emplace_back(b.begin(), b.end());
    vs.push_back(ej);
    rhs.push_back(0.0);
  }
  us.emplace_back(a.begin(), a.end());
  vs.emplace_back(a.begin(), a.end());
  rhs.push_back(1.0);
  us.emplace_back(a.begin(), a.end());
  vs.emplace_back(b.begin(), b.end());
  rhs.push_back(1.0);

  const std::size_t m = rhs.size();
  Matrix gram(m, m);
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t l = 0; l < m; ++l) gram(k, l) = dot(us[k], us[l]) * dot(vs[k], vs[l]);
  std::vector<double> lambda;
  try {
    lambda = solve_linear(gram, rhs);
  } catch (const DomainError&) {
    throw DomainError("construct_optimal_w: a and b are linearly dependent");
  }
  Matrix w(d, d);
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) w(i, j) += lambda[k] * us[k][i] * vs[k][j];
  return w;
}

double imbalanced_risk(const Matrix& w, const ImbalancedInstance& inst, std::span<const double> temps) {
  const std::size_t L = inst.length(), d = inst.dim();
  if (temps.size() != L) throw ShapeError("imbalanced_risk: need one temperature per position");
  if (w.rows() != d || w.cols() != d) throw ShapeError("imbalanced_risk: W must be d x d");
  const Matrix x = inst.sequence();
  const std::vector<double> y = inst.target();
  double total = 0.0;
  std::vector<double> logits(L), out(d);
  for (std::size_t n = inst.n0; n <= L; ++n) {
    const auto xn = x.row(n - 1);
    double mx = -INFINITY;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) s += x(i, r) * w(r, c) * xn[c];
      logits[i] = temps[n - 1] * s;
      mx = std::max(mx, logits[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(logits[i] - mx);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double pi = std::exp(logits[i] - mx) / z;
      for (std::size_t c = 0; c < d; ++c) out[c] += pi * x(i, c);
    }
    for (std::size_t c = 0; c < d; ++c) total += (y[c] - out[c]) * (y[c] - out[c]);
  }
  return total / double(L);
}

QuadrantCheck check_quadrant_conditions(const ImbalancedInstance& inst) {
  const std::size_t L = inst.length();
  if (L == 0 || L % 8 != 0) return {false, "length must be a positive multiple of 8"};
  if (std::abs(inst.alpha - 0.5) > 1e-12) return {false, "alpha must be 1/2"};
  for (std::size_t n = L / 4; n <= L / 2; ++n) {
    const double k = inst.kappa[n - 1];
    if (!(k >= 1.0 && k <= 2.0)) {
      return {false, "kappa_" + std::to_string(n) + " = " + std::to_string(k) + " outside [1, 2]"};
    }
  }
  for (std::size_t n = 7 * L / 8; n <= L; ++n) {
    const double k = inst.kappa[n - 1];
    if (!(k >= 4.0)) return {false, "kappa_" + std::to_string(n) + " = " + std::to_string(k) + " below 4"};
  }
  return {};
}

double flat_temperature_floor(const ImbalancedInstance& inst) {
  const QuadrantCheck check = check_quadrant_conditions(inst);
  if (!check.ok) throw DomainError("flat_temperature_floor: " + check.reason);
  const std::size_t L = inst.length();
  double best = INFINITY;
  const int points = 1000;
  for (int k = 0; k < points; ++k) {
    const double m = std::pow(10.0, -3.0 + 6.0 * k / (points - 1));
    double s = 0.0;
    for (std::size_t n = inst.n0; n <= L; ++n) {
      if (inst.is_a[n - 1]) continue;
      const double t = 0.5 - 1.0 / (1.0 + m * inst.kappa[n - 1]);
      s += 2.0 * t * t;
    }
    best = std::min(best, s / double(L));
  }
  if (best < kFlatTemperatureFloor) {
    throw TheoryViolation("flat_temperature_floor: bound " + std::to_string(best) + " is below 1/500");
  }
  return best;
}

double PowerLawScores::salient_fraction() const { return std::pow(double(n), -pow); }

std::size_t PowerLawScores::salient_count() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(std::pow(double(n), 1.0 - pow))));
}

std::vector<double> PowerLawScores::scores() const {
  std::vector<double> s(n, c);
  const std::size_t k = std::min(salient_count(), n);
  for (std::size_t i = 0; i < k; ++i) s[i] = c + gamma;
  return s;
}

namespace {

void check_power_law(std::size_t n, double pow, double gamma) {
  if (n < 2) throw DomainError("power-law scores need n >= 2");
  if (!(pow > 0.0)) throw DomainError("power-law exponent must be positive");
  if (!(gamma > 0.0)) throw DomainError("score advantage gamma must be positive");
}

}  // namespace

double sparsity_for_temperature(double tau, std::size_t n, double pow, double gamma) {
  check_power_law(n, pow, gamma);
  if (!(tau > 0.0)) throw DomainError("sparsity_for_temperature: tau must be positive");
  const double f = std::pow(double(n), -pow);
  return f + (1.0 - f) * std::exp(-gamma * (tau - 1.0));
}

double temperature_for_sparsity(double kappa, std::size_t n, double pow, double gamma) {
  check_power_law(n, pow, gamma);
  const double f = std::pow(double(n), -pow);
  if (!(kappa > f && kappa <= 1.0)) throw DomainError("temperature_for_sparsity: kappa must lie in (n^-pow, 1]");
  return 1.0 - std::log((kappa - f) / (1.0 - f)) / gamma;
}

double top_entry_scaled(std::size_t n, double pow, double gamma, double tau) {
  check_power_law(n, pow, gamma);
  const double nd = double(n);
  return 1.0 / (std::pow(nd, 1.0 - pow) + nd * (1.0 - std::pow(nd, -pow)) * std::exp(-gamma * tau));
}

double top_entry_sparse(std::size_t n, double pow, double gamma, double kappa) {
  check_power_law(n, pow, gamma);
  const double nd = double(n);
  const double f = std::pow(nd, -pow);
  if (kappa < f * (1.0 - 1e-12)) throw DomainError("top_entry_sparse: kappa below the salient fraction");
  return 1.0 / (std::pow(nd, 1.0 - pow) + (kappa - f) * nd * std::exp(-gamma));
}

}  // namespace ssa

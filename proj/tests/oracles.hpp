#pragma once

// Independent reference implementations used only by the tests. They share no code
// with the library beyond the Matrix container.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ssa/matrix.hpp"

namespace oracle {

inline std::vector<double> softmax(const std::vector<double>& logits) {
  double m = -INFINITY;
  for (double v : logits) m = std::max(m, v);
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += out[i] = std::exp(logits[i] - m);
  for (double& v : out) v /= z;
  return out;
}

// Triple-loop attention with per-row scalings of Q, K and V.
inline ssa::Matrix attention(const ssa::Matrix& x, const ssa::Matrix& wq, const ssa::Matrix& wk,
                             const ssa::Matrix& wv, const std::vector<double>& tq, const std::vector<double>& tk,
                             const std::vector<double>& tv, bool causal = true) {
  const std::size_t L = x.rows(), d = x.cols();
  auto project = [&](const ssa::Matrix& w, const std::vector<double>& t) {
    ssa::Matrix out(L, d);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t m = 0; m < d; ++m) acc += x(i, m) * w(m, j);
        out(i, j) = t[i] * acc;
      }
    return out;
  };
  const ssa::Matrix q = project(wq, tq), k = project(wk, tk), v = project(wv, tv);
  ssa::Matrix out(L, d);
  for (std::size_t n = 0; n < L; ++n) {
    const std::size_t visible = causal ? n + 1 : L;
    std::vector<double> logits(visible);
    for (std::size_t i = 0; i < visible; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += q(n, j) * k(i, j);
      logits[i] = acc / std::sqrt(double(d));
    }
    const auto p = softmax(logits);
    for (std::size_t i = 0; i < visible; ++i)
      for (std::size_t j = 0; j < d; ++j) out(n, j) += p[i] * v(i, j);
  }
  return out;
}

inline ssa::Matrix attention(const ssa::Matrix& x, const ssa::Matrix& wq, const ssa::Matrix& wk,
                             const ssa::Matrix& wv) {
  const std::vector<double> ones(x.rows(), 1.0);
  return attention(x, wq, wk, wv, ones, ones, ones);
}

// One-sided Jacobi: orthogonalizes the columns of A; singular values are the column norms.
inline std::vector<double> singular_values(ssa::Matrix a) {
  const std::size_t m = a.rows(), n = a.cols();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a(i, p) * a(i, p);
          beta += a(i, q) * a(i, q);
          gamma += a(i, p) * a(i, q);
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
      }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += a(i, j) * a(i, j);
    sv[j] = std::sqrt(acc);
  }
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

// Nelder-Mead simplex minimizer with restarts from the best point found.
template <class F>
std::vector<double> nelder_mead(F f, std::vector<double> x0, double step, int iterations = 4000, int restarts = 4) {
  const std::size_t n = x0.size();
  for (int restart = 0; restart < restarts; ++restart) {
    std::vector<std::vector<double>> pts(n + 1, x0);
    for (std::size_t i = 0; i < n; ++i) pts[i + 1][i] += step;
    std::vector<double> val(n + 1);
    for (std::size_t i = 0; i <= n; ++i) val[i] = f(pts[i]);
    for (int it = 0; it < iterations; ++it) {
      std::vector<std::size_t> order(n + 1);
      for (std::size_t i = 0; i <= n; ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return val[a] < val[b]; });
      const std::size_t best = order[0], worst = order[n], second = order[n - 1];
      std::vector<double> centroid(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) centroid[j] += pts[order[i]][j] / double(n);
      auto along = [&](double t) {
        std::vector<double> p(n);
        for (std::size_t j = 0; j < n; ++j) p[j] = centroid[j] + t * (pts[worst][j] - centroid[j]);
        return p;
      };
      const auto xr = along(-1.0);
      const double fr = f(xr);
      if (fr < val[best]) {
        const auto xe = along(-2.0);
        const double fe = f(xe);
        if (fe < fr) {
          pts[worst] = xe;
          val[worst] = fe;
        } else {
          pts[worst] = xr;
          val[worst] = fr;
        }
      } else if (fr < val[second]) {
        pts[worst] = xr;
        val[worst] = fr;
      } else {
        const auto xc = along(0.5);
        const double fc = f(xc);
        if (fc < val[worst]) {
          pts[worst] = xc;
          val[worst] = fc;
        } else {
          for (std::size_t i = 0; i <= n; ++i) {
            if (i == best) continue;
            for (std::size_t j = 0; j < n; ++j) pts[i][j] = pts[best][j] + 0.5 * (pts[i][j] - pts[best][j]);
            val[i] = f(pts[i]);
          }
        }
      }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i <= n; ++i)
      if (val[i] < val[best]) best = i;
    x0 = pts[best];
    step *= 0.1;
  }
  return x0;
}

struct PlainApproximation {
  ssa::Matrix w;
  double norm;
  double error;  // max-entry error of softmax(E W E^T) against [[1-g, g], [0, 1]]
};

// Smallest-operator-norm 2x2 W whose plain map approximates the two-token target to
// within eps. E has unit rows e1, e2. Every logit matrix G is reachable through
// W = E^-1 G E^-T, and the feasible set is convex in G, so a simplex search over G is
// global. The search runs on a slightly tightened eps so the returned W is feasible.
inline PlainApproximation min_norm_plain_w(const ssa::Matrix& e, double gamma, double eps) {
  const double det = e(0, 0) * e(1, 1) - e(0, 1) * e(1, 0);
  const ssa::Matrix einv = ssa::Matrix::from_rows({{e(1, 1) / det, -e(0, 1) / det}, {-e(1, 0) / det, e(0, 0) / det}});
  const double margin = 1e-9;
  auto lgt = [](double p) { return std::log(p / (1.0 - p)); };
  const double lo = lgt(1.0 - gamma - eps + margin), hi = lgt(1.0 - gamma + eps - margin);
  const double d2min = std::log((1.0 - eps + margin) / (eps - margin));
  // Row 1 needs g11 - g12 in [lo, hi]; row 2 needs g22 - g21 >= d2min.
  auto w_of = [&](const std::vector<double>& z) {
    const double d1 = std::clamp(z[0], lo, hi), d2 = std::max(z[1], d2min);
    const ssa::Matrix g = ssa::Matrix::from_rows({{z[2] + d1, z[2]}, {z[3], z[3] + d2}});
    return ssa::matmul(ssa::matmul(einv, g), ssa::transpose(einv));
  };
  auto objective = [&](const std::vector<double>& z) {
    // Penalize leaving the box so the simplex does not drift along flat directions.
    const double out = std::max(0.0, lo - z[0]) + std::max(0.0, z[0] - hi) + std::max(0.0, d2min - z[1]);
    return singular_values(w_of(z)).front() + out;
  };
  const auto z = nelder_mead(objective, {0.5 * (lo + hi), d2min, 0.0, -0.5 * d2min}, 1.0);
  PlainApproximation out{w_of(z), 0.0, 0.0};
  out.norm = singular_values(out.w).front();
  const ssa::Matrix logits = ssa::matmul(ssa::matmul(e, out.w), ssa::transpose(e));
  const double target[2][2] = {{1.0 - gamma, gamma}, {0.0, 1.0}};
  for (std::size_t i = 0; i < 2; ++i) {
    const auto p = softmax({logits(i, 0), logits(i, 1)});
    for (std::size_t j = 0; j < 2; ++j) out.error = std::max(out.error, std::abs(p[j] - target[i][j]));
  }
  return out;
}

}  // namespace oracle

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ssa/matrix.hpp"

namespace ssa {

// ---- Norm lower bound for plain attention -------------------------------------------------

// (L_a - L_b) / ||a - b||: minimum ||W|| for logits a^T W q = L_a, b^T W q = L_b with a unit query.
double norm_lower_bound(double logit_a, double logit_b, std::span<const double> a, std::span<const double> b);

// ---- Two-token approximation of P* = [[1-g, g], [0, 1]] ----------------------------------

struct TwoTokenProblem {
  double gamma;  // off-diagonal mass of the first row
  double eps;    // allowed max-entry error
  std::vector<double> e1, e2;  // unit embeddings

  double rho() const;
  // |log((1 - gamma) / gamma)|
  double big_gamma() const;
  // Throws DomainError unless 0 < eps <= min(gamma, 1-gamma)/2, |rho| < 1 and unit e1, e2.
  void validate() const;
  Matrix target() const;
  Matrix embeddings() const;  // 2 x d
};

// Unit e1, e2 in R^2 with correlation rho.
TwoTokenProblem make_two_token_problem(double gamma, double rho, double eps);

// ||e1-e2||^{-1} / sqrt(2 - 2 rho^2) * (log(1/(4 eps)) - Gamma)
double approx_lower_bound(const TwoTokenProblem& p);
// ||e1-e2||^{-1} * max(log(1/eps), Gamma / sqrt(1 - rho^2))
double approx_upper_bound(const TwoTokenProblem& p);

// softmax(E W E^T) row-wise, no scaling.
Matrix two_token_map(const Matrix& w, const TwoTokenProblem& p);
// Same with row i of the logits multiplied by tau[i].
Matrix two_token_map(const Matrix& w, std::span<const double> tau, const TwoTokenProblem& p);
double approximation_error(const Matrix& map, const TwoTokenProblem& p);

// Exact smallest ||W|| over all W whose plain map is eps-close to the target.
double min_plain_norm(const TwoTokenProblem& p);

struct SelectiveConstruction {
  Matrix w;                 // d x d, rank one, unit operator norm
  std::vector<double> tau;  // one inverse temperature per token
  double cost;              // max_i |tau_i| * ||W||
  double error;             // achieved max-entry error
};
// Cheapest (W, tau) pair whose map is within eps of the target; the row gaps sit on the
// eps boundary nearest zero.
SelectiveConstruction selective_construction(const TwoTokenProblem& p);

// ---- Imbalanced two-token mixture -------------------------------------------------------

struct ImbalancedInstance {
  std::vector<double> a, b;  // unit, linearly independent
  std::vector<bool> is_a;    // token at each position, index n-1
  double alpha = 0.5;        // target weight on a
  std::size_t n0 = 0;        // first 1-indexed position where both tokens were seen
  std::vector<double> kappa; // (n - n_a) / n_a at index n-1; infinity while n_a = 0

  std::size_t length() const { return is_a.size(); }
  std::size_t dim() const { return a.size(); }
  Matrix sequence() const;            // L x d
  std::vector<double> target() const; // alpha a + (1 - alpha) b
};

// Recomputes n0 and kappa from the assignment; throws DomainError when a never occurs.
void finalize_instance(ImbalancedInstance& inst);

// log(kappa) + log(alpha / (1 - alpha))
double optimal_position_temperature(double kappa, double alpha);
std::vector<double> optimal_position_temperatures(const ImbalancedInstance& inst);

// Least-norm W with b^T W = 0 and a^T W a = a^T W b = 1.
Matrix construct_optimal_w(std::span<const double> a, std::span<const double> b);

// (1/L) sum_{n >= n0} || y - X^T causal_softmax_n(tau_n X W x_n) ||^2, key i scored x_i^T W x_n.
double imbalanced_risk(const Matrix& w, const ImbalancedInstance& inst, std::span<const double> temps);

struct QuadrantCheck {
  bool ok = true;
  std::string reason;
};
// alpha = 1/2, kappa_n in [1, 2] for L/4 <= n <= L/2, kappa_n >= 4 for n >= 7L/8.
QuadrantCheck check_quadrant_conditions(const ImbalancedInstance& inst);

// min over M on a log grid [1e-3, 1e3] (1000 points) of (1/L) sum_{n >= n0, x_n = b} 2 (1/2 - 1/(1 + M kappa_n))^2.
// Throws DomainError when the quadrant conditions fail; TheoryViolation when the result is below 1/500.
double flat_temperature_floor(const ImbalancedInstance& inst);
inline constexpr double kFlatTemperatureFloor = 0.002;

// ---- Temperature versus sparsity ------------------------------------------------------

// n entries of which a n^{-pow} fraction score c + gamma and the rest score c.
struct PowerLawScores {
  std::size_t n;
  double pow;
  double gamma;
  double c = 0.0;

  double salient_fraction() const;   // n^{-pow}
  std::size_t salient_count() const; // round(n^{1-pow}), at least 1
  std::vector<double> scores() const;  // salient entries first
};

// kappa = n^{-pow} + (1 - n^{-pow}) e^{-gamma (tau - 1)}; kappa = 1 at tau = 1.
double sparsity_for_temperature(double tau, std::size_t n, double pow, double gamma);
// Inverse of the above for n^{-pow} < kappa <= 1.
double temperature_for_sparsity(double kappa, std::size_t n, double pow, double gamma);
// 1 / (n^{1-pow} + n (1 - n^{-pow}) e^{-gamma tau})
double top_entry_scaled(std::size_t n, double pow, double gamma, double tau);
// 1 / (n^{1-pow} + (kappa - n^{-pow}) n e^{-gamma})
double top_entry_sparse(std::size_t n, double pow, double gamma, double kappa);

}  // namespace ssa

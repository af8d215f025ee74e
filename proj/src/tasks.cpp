#include "ssa/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ssa/errors.hpp"

namespace ssa {

std::size_t Graph::degree(std::size_t i) const {
  return static_cast<std::size_t>(std::count(adjacency.at(i).begin(), adjacency.at(i).end(), true));
}

std::size_t Graph::closed_neighborhood(std::size_t i) const { return degree(i) + 1; }

Graph make_graph(std::size_t k, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  Graph g{k, std::vector<std::vector<bool>>(k, std::vector<bool>(k, false))};
  for (auto [u, v] : edges) {
    if (u >= k || v >= k) throw LookupError("edge endpoint outside the graph");
    if (u == v) throw DomainError("self-loops are implied, not stored");
    g.adjacency[u][v] = g.adjacency[v][u] = true;
  }
  return g;
}

Graph reference_graph() { return make_graph(8, {{0, 1}, {0, 2}, {0, 3}, {1, 4}, {2, 5}, {3, 6}}); }

NeighborGroups neighbor_groups(const Graph& g) {
  std::map<std::size_t, std::size_t> index;
  for (std::size_t i = 0; i < g.k; ++i) index[g.closed_neighborhood(i)] = 0;
  NeighborGroups out;
  for (auto& [size, id] : index) {
    id = out.size_of_group.size();
    out.size_of_group.push_back(size);
  }
  for (std::size_t i = 0; i < g.k; ++i) out.group_of_node.push_back(index[g.closed_neighborhood(i)]);
  return out;
}

void TransitionMatrix::validate() const {
  if (p.rows() != p.cols()) throw ShapeError("transition matrix must be square, got " + p.shape_string());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (double v : p.row(i)) {
      if (v < 0.0) throw DomainError("transition matrix has a negative entry");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw DomainError("transition matrix row " + std::to_string(i) + " sums to " +
                                                     std::to_string(s));
  }
}

TransitionMatrix transition_matrix(const Graph& g) {
  Matrix p(g.k, g.k);
  for (std::size_t i = 0; i < g.k; ++i) {
    const double w = 1.0 / double(g.closed_neighborhood(i));
    for (std::size_t j = 0; j < g.k; ++j)
      if (i == j || g.adjacency[i][j]) p(i, j) = w;
  }
  return {std::move(p)};
}

Matrix GraphBatch::counts(std::size_t k) const {
  Matrix c(k, k);
  for (std::size_t b = 0; b < sequences.size(); ++b) c(sequences[b].back(), labels[b]) += 1.0;
  return c;
}

GraphBatch sample_graph_batch(const TransitionMatrix& p_star, std::size_t batch, Rng& rng) {
  if (batch == 0) throw DomainError("batch must be at least 1");
  const std::size_t k = p_star.k();
  GraphBatch out;
  out.sequences.reserve(batch);
  out.labels.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    out.sequences.push_back(rng.permutation(k));
    out.labels.push_back(rng.categorical(p_star.p.row(out.sequences.back().back())));
  }
  return out;
}

GraphBatch sample_graph_batch(const TransitionMatrix& p_star, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed, "graph-batch");
  return sample_graph_batch(p_star, batch, rng);
}

double err_map(const Matrix& p_hat, const Matrix& p_star) {
  require_same_shape(p_hat, p_star, "err_map");
  if (p_hat.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < p_hat.size(); ++i) s += std::abs(p_hat.data()[i] - p_star.data()[i]);
  return s / double(p_hat.rows());
}

ImbalancedInstance make_imbalanced_instance(std::size_t L, const std::string& pattern, double alpha,
                                            std::uint64_t seed, std::size_t d) {
  if (L == 0 || L % 8 != 0) throw DomainError("imbalanced instance length must be a positive multiple of 8");
  if (d < 2) throw DomainError("imbalanced instance needs d >= 2");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
  ImbalancedInstance inst;
  inst.alpha = alpha;
  inst.is_a.assign(L, false);
  if (pattern == "conforming") {
    for (std::size_t n = 0; n < L / 2; ++n) inst.is_a[n] = n % 3 == 0;
  } else if (pattern == "alternating") {
    for (std::size_t n = 0; n < L; ++n) inst.is_a[n] = n % 2 == 0;
  } else if (pattern == "leading-a") {
    inst.is_a[0] = true;
  } else if (pattern.size() == L && pattern.find_first_not_of("ab") == std::string::npos) {
    for (std::size_t n = 0; n < L; ++n) inst.is_a[n] = pattern[n] == 'a';
  } else {
    throw DomainError("unknown imbalanced pattern '" + pattern + "'");
  }

  // Random orthonormal pair via Gram-Schmidt on Gaussian draws.
  Rng rng(seed, "imbalanced-embeddings");
  auto draw = [&] {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    return v;
  };
  inst.a = draw();
  const double an = vector_norm(inst.a);
  for (double& x : inst.a) x /= an;
  for (;;) {
    inst.b = draw();
    const double p = dot(inst.a, inst.b);
    for (std::size_t i = 0; i < d; ++i) inst.b[i] -= p * inst.a[i];
    const double bn = vector_norm(inst.b);
    if (bn > 1e-6) {
      for (double& x : inst.b) x /= bn;
      break;
    }
  }
  finalize_instance(inst);
  return inst;
}

std::vector<DenoisingSample> make_denoising_batch(std::size_t k, std::size_t L, double sigma, double alpha_frac,
                                                  std::size_t batch, Rng& rng) {
  if (k == 0 || L == 0) throw DomainError("denoising needs k >= 1 and L >= 1");
  if (!(alpha_frac > 0.0 && alpha_frac < 1.0)) throw DomainError("alpha_frac must lie in (0, 1)");
  if (sigma < 0.0) throw DomainError("sigma must be non-negative");
  std::vector<DenoisingSample> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    DenoisingSample s;
    s.sigma = sigma;
    s.alpha_frac = alpha_frac;
    s.q = rng.index(k);
    s.y.assign(k, 0.0);
    s.y[s.q] = 1.0;
    s.x = Matrix(L, k);
    for (std::size_t i = 0; i < L; ++i) {
      const bool signal = i + 1 == L || rng.bernoulli(alpha_frac);
      if (signal) {
        s.signal_set.push_back(i);
        s.x(i, s.q) = 1.0;
      }
      for (std::size_t j = 0; j < k; ++j) s.x(i, j) += sigma * rng.normal();
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<DenoisingSample> make_denoising_batch(std::size_t k, std::size_t L, double sigma, double alpha_frac,
                                                  std::size_t batch, std::uint64_t seed) {
  Rng rng(seed, "denoise-batch");
  return make_denoising_batch(k, L, sigma, alpha_frac, batch, rng);
}

std::vector<double> naive_average(const Matrix& x) {
  return masked_average(x, std::vector<bool>(x.rows(), true));
}

std::vector<double> bayes_optimal(const DenoisingSample& s) {
  std::vector<bool> mask(s.x.rows(), false);
  for (std::size_t i : s.signal_set) mask.at(i) = true;
  return masked_average(s.x, mask);
}

std::vector<bool> threshold_mask(const Matrix& x, double level) {
  std::vector<bool> mask(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    mask[i] = !r.empty() && *std::max_element(r.begin(), r.end()) >= level;
  }
  return mask;
}

std::vector<double> masked_average(const Matrix& x, const std::vector<bool>& mask) {
  if (mask.size() != x.rows()) throw ShapeError("mask length does not match the sequence");
  std::vector<double> out(x.cols(), 0.0);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (!mask[i]) continue;
    ++kept;
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  }
  if (kept > 0)
    for (double& v : out) v /= double(kept);
  return out;
}

}  // namespace ssa

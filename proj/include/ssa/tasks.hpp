#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ssa/matrix.hpp"
#include "ssa/rng.hpp"
#include "ssa/theory.hpp"

namespace ssa {

// ---- Graph next-token task --------------------------------------------------------------

struct Graph {
  std::size_t k = 0;
  std::vector<std::vector<bool>> adjacency;  // symmetric, no self-loops

  std::size_t degree(std::size_t i) const;
  // Node plus its neighbours.
  std::size_t closed_neighborhood(std::size_t i) const;
};

Graph make_graph(std::size_t k, const std::vector<std::pair<std::size_t, std::size_t>>& edges);

// 8 nodes: edges 0-1, 0-2, 0-3, 1-4, 2-5, 3-6 and node 7 isolated, giving closed
// neighbourhoods of size 4 (node 0), 3 (1-3), 2 (4-6) and 1 (7).
Graph reference_graph();

// Group id per node, ordered by closed-neighbourhood size (group 0 = smallest).
struct NeighborGroups {
  std::vector<std::size_t> group_of_node;
  std::vector<std::size_t> size_of_group;  // closed-neighbourhood size of each group
  std::size_t count() const { return size_of_group.size(); }
};
NeighborGroups neighbor_groups(const Graph& g);

struct TransitionMatrix {
  Matrix p;  // row-stochastic K x K
  void validate() const;
  std::size_t k() const { return p.rows(); }
};

// Row i uniform over {i} and the neighbours of i.
TransitionMatrix transition_matrix(const Graph& g);

struct GraphBatch {
  std::vector<std::vector<std::size_t>> sequences;  // each a permutation of [K]
  std::vector<std::size_t> labels;                  // next token, drawn from P*[last token]
  // counts(q, y): number of sequences ending in q with label y.
  Matrix counts(std::size_t k) const;
};

GraphBatch sample_graph_batch(const TransitionMatrix& p_star, std::size_t batch, Rng& rng);
GraphBatch sample_graph_batch(const TransitionMatrix& p_star, std::size_t batch, std::uint64_t seed);

// Entrywise l1 distance divided by the row count.
double err_map(const Matrix& p_hat, const Matrix& p_star);

// ---- Imbalanced token mixture -----------------------------------------------------------

// pattern: "conforming" (a b b repeated over the first half, then b only), "alternating",
// "leading-a" (one a then b only), or a literal string of L characters from {a, b}.
ImbalancedInstance make_imbalanced_instance(std::size_t L, const std::string& pattern, double alpha,
                                            std::uint64_t seed, std::size_t d = 4);

// ---- Denoising ------------------------------------------------------------------------

struct DenoisingSample {
  Matrix x;                             // L x d
  std::vector<double> y;                // e_q
  std::vector<std::size_t> signal_set;  // 0-indexed positions, always contains L-1
  std::size_t q = 0;
  double sigma = 0.0;
  double alpha_frac = 0.0;
};

std::vector<DenoisingSample> make_denoising_batch(std::size_t k, std::size_t L, double sigma, double alpha_frac,
                                                  std::size_t batch, Rng& rng);
std::vector<DenoisingSample> make_denoising_batch(std::size_t k, std::size_t L, double sigma, double alpha_frac,
                                                  std::size_t batch, std::uint64_t seed);

std::vector<double> naive_average(const Matrix& x);
std::vector<double> bayes_optimal(const DenoisingSample& s);
// Token i is kept iff its largest coordinate is at least `level`.
std::vector<bool> threshold_mask(const Matrix& x, double level = 0.5);
// Mean of the kept rows; zero vector when nothing is kept.
std::vector<double> masked_average(const Matrix& x, const std::vector<bool>& mask);

}  // namespace ssa

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ssa/matrix.hpp"

namespace ssa {

// Counter-based generator: draw i is a hash of (key, i). Streams are keyed by
// (seed, name) so that adding draws to one stream never shifts another.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream);

  // Independent child stream; same (parent, name) always gives the same child.
  Rng split(std::string_view name) const;

  std::uint64_t next_u64();
  double uniform();                    // [0, 1)
  double uniform(double lo, double hi);
  double normal();                     // standard Gaussian
  std::size_t index(std::size_t n);    // uniform in [0, n)
  bool bernoulli(double p);

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0);
  std::vector<std::size_t> permutation(std::size_t n);
  // Draws from a discrete distribution given by nonnegative weights summing to ~1.
  std::size_t categorical(std::span<const double> probs);

  std::uint64_t key() const { return key_; }

 private:
  explicit Rng(std::uint64_t key) : key_(key) {}
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t hash_name(std::string_view name);

}  // namespace ssa

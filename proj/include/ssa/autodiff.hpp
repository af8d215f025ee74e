#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ssa/matrix.hpp"

namespace ssa {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  // Zero matrix of the value's shape when backward never reached this node.
  Matrix grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records operations in execution order; backward walks them in reverse.
class Tape {
 public:
  // Receives the output adjoint and pushes contributions to parents through accumulate().
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(Matrix value);
  // Input that never needs a gradient; ops depending only on constants skip backward work.
  Var constant(Matrix value);

  // Adds a node computed from parents. Throws NonFiniteError when value holds NaN or Inf.
  Var record(Matrix value, std::span<const Var> parents, Backward backward, const char* op);

  // Seeds d(output)/d(output) = 1 and propagates. Output must be 1x1.
  void backward(Var output);
  void zero_grad();

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  Matrix grad(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  void accumulate(std::size_t id, const Matrix& g);
  // Adds g to a single entry of node id's gradient.
  void accumulate_entry(std::size_t id, std::size_t i, std::size_t j, double g);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };
  void ensure_grad(std::size_t id);
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var add_constant(Var a, double c);
// Multiplies every entry of m by the 1x1 value s.
Var scalar_mul(Var m, Var s);
// Divides every entry of m by the 1x1 value s.
Var scalar_div(Var m, Var s);
// Row i of the result is s_i times row i of m; s is rows x 1 or 1 x rows.
Var row_scale(Var m, Var s);
// Row n keeps columns 0..n (0-indexed); later columns get exactly zero probability.
Var causal_softmax(Var logits);
Var softmax_rows(Var logits);
Var log_softmax_rows(Var logits);

Var tanh(Var v);
Var sigmoid(Var v);
Var gelu(Var v);
Var log(Var v);
Var exp(Var v);
Var square(Var v);
// Frobenius norm, 1x1.
Var l2_norm(Var v);
Var sum(Var v);
Var mean(Var v);
Var sum_rows(Var v);  // column sums, 1 x cols
Var gather_rows(Var v, std::span<const std::size_t> rows);
Var entry(Var v, std::size_t i, std::size_t j);
// Same data, new shape (row-major order preserved).
Var reshape(Var v, std::size_t rows, std::size_t cols);
// Each row divided by its l2 norm; a zero row is a DomainError.
Var normalize_rows(Var v);
// x stacks B blocks of L rows; u is B x d. Result (b, i) = x[b*L + i] . u[b], shape B x L.
Var blockwise_scores(Var x, Var u, std::size_t block_rows);
// p is B x L; result row b = sum_i p(b, i) x[b*L + i], shape B x d.
Var blockwise_mix(Var p, Var x);
// Sum of 1x1 Vars.
Var add_all(std::span<const Var> terms);

double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace ssa

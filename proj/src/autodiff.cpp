#include "ssa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ssa/errors.hpp"

namespace ssa {

const Matrix& Var::value() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return tape_->value(id_);
}

Matrix Var::grad() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return tape_->grad(id_);
}

Var Tape::leaf(Matrix value) {
  if (!all_finite(value)) throw NonFiniteError("leaf value is not finite");
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  if (!all_finite(value)) throw NonFiniteError("constant value is not finite");
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward, const char* op) {
  if (!all_finite(value)) throw NonFiniteError(std::string(op) + " produced a non-finite value");
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::logic_error(std::string(op) + ": operand from another tape");
    needs = needs || nodes_[p.id()].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

void Tape::ensure_grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  if (!nodes_[id].needs_grad) return;
  ensure_grad(id);
  nodes_[id].grad += g;
}

void Tape::accumulate_entry(std::size_t id, std::size_t i, std::size_t j, double g) {
  if (!nodes_[id].needs_grad) return;
  ensure_grad(id);
  nodes_[id].grad(i, j) += g;
}

Matrix Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad = Matrix();
}

void Tape::backward(Var output) {
  if (output.tape() != this) throw std::logic_error("backward: output from another tape");
  const Matrix& out = nodes_[output.id()].value;
  if (out.rows() != 1 || out.cols() != 1) {
    throw ShapeError("backward needs a 1x1 output, got " + out.shape_string());
  }
  zero_grad();
  if (!nodes_[output.id()].needs_grad) return;
  nodes_[output.id()].grad = Matrix(1, 1, 1.0);
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    // Callbacks only touch parents, which have smaller ids, so n.grad stays put.
    n.backward(*this, n.grad);
  }
}

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::logic_error("use of an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw std::logic_error("operands live on different tapes");
  return t;
}

template <class F>
Matrix map(const Matrix& m, F f) {
  Matrix out = m;
  for (double& v : out.data()) v = f(v);
  return out;
}

// Elementwise op whose derivative is expressed through the input x and output y.
template <class F, class D>
Var unary(Var a, F f, D dfdx, const char* op) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  const std::size_t self = t.size();
  Var parents[] = {a};
  return t.record(
      map(a.value(), f), parents,
      [ia, self, dfdx](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(ia);
        const Matrix& y = tp.value(self);
        Matrix d(g.rows(), g.cols());
        for (std::size_t k = 0; k < g.size(); ++k) d.data()[k] = g.data()[k] * dfdx(x.data()[k], y.data()[k]);
        tp.accumulate(ia, d);
      },
      op);
}

void softmax_row(std::span<const double> in, std::span<double> out, std::size_t visible) {
  double mx = in[0];
  for (std::size_t j = 1; j < visible; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < visible; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < visible; ++j) out[j] /= z;
  for (std::size_t j = visible; j < out.size(); ++j) out[j] = 0.0;
}

Var softmax_impl(Var logits, bool causal, const char* op) {
  Tape& t = tape_of(logits);
  const Matrix& x = logits.value();
  if (!all_finite(x)) throw NonFiniteError(std::string(op) + ": non-finite logit");
  Matrix p(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::size_t visible = causal ? std::min(i + 1, x.cols()) : x.cols();
    if (visible == 0) continue;
    softmax_row(x.row(i), p.row(i), visible);
  }
  const std::size_t ia = logits.id();
  const std::size_t self = t.size();
  Var parents[] = {logits};
  return t.record(
      std::move(p), parents,
      [ia, self](Tape& tp, const Matrix& g) {
        const Matrix& p = tp.value(self);
        Matrix d(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double s = dot(p.row(i), g.row(i));
          for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = p(i, j) * (g(i, j) - s);
        }
        tp.accumulate(ia, d);
      },
      op);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  Var parents[] = {a, b};
  return t.record(
      matmul(a.value(), b.value()), parents,
      [ia, ib](Tape& tp, const Matrix& g) {
        if (tp.needs_grad(ia)) tp.accumulate(ia, matmul(g, transpose(tp.value(ib))));
        if (tp.needs_grad(ib)) tp.accumulate(ib, matmul(transpose(tp.value(ia)), g));
      },
      "matmul");
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return t.record(
      transpose(a.value()), parents,
      [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, transpose(g)); }, "transpose");
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  Var parents[] = {a, b};
  return t.record(
      a.value() + b.value(), parents,
      [ia, ib](Tape& tp, const Matrix& g) {
        tp.accumulate(ia, g);
        tp.accumulate(ib, g);
      },
      "add");
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  Var parents[] = {a, b};
  return t.record(
      a.value() - b.value(), parents,
      [ia, ib](Tape& tp, const Matrix& g) {
        tp.accumulate(ia, g);
        if (tp.needs_grad(ib)) tp.accumulate(ib, g * -1.0);
      },
      "sub");
}

Var hadamard(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  Var parents[] = {a, b};
  return t.record(
      hadamard(a.value(), b.value()), parents,
      [ia, ib](Tape& tp, const Matrix& g) {
        if (tp.needs_grad(ia)) tp.accumulate(ia, hadamard(g, tp.value(ib)));
        if (tp.needs_grad(ib)) tp.accumulate(ib, hadamard(g, tp.value(ia)));
      },
      "hadamard");
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return t.record(
      a.value() * s, parents, [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * s); },
      "scale");
}

Var add_constant(Var a, double c) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return t.record(
      map(a.value(), [c](double v) { return v + c; }), parents,
      [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); }, "add_constant");
}

Var scalar_mul(Var m, Var s) {
  Tape& t = tape_of(m, s);
  const double sv = s.value().item();
  const std::size_t im = m.id(), is = s.id();
  Var parents[] = {m, s};
  return t.record(
      m.value() * sv, parents,
      [im, is, sv](Tape& tp, const Matrix& g) {
        if (tp.needs_grad(im)) tp.accumulate(im, g * sv);
        if (tp.needs_grad(is)) tp.accumulate_entry(is, 0, 0, dot(g.data(), tp.value(im).data()));
      },
      "scalar_mul");
}

Var scalar_div(Var m, Var s) {
  Tape& t = tape_of(m, s);
  const double sv = s.value().item();
  if (sv == 0.0) throw DomainError("scalar_div: division by zero");
  const std::size_t im = m.id(), is = s.id();
  Var parents[] = {m, s};
  return t.record(
      m.value() * (1.0 / sv), parents,
      [im, is, sv](Tape& tp, const Matrix& g) {
        if (tp.needs_grad(im)) tp.accumulate(im, g * (1.0 / sv));
        if (tp.needs_grad(is)) {
          tp.accumulate_entry(is, 0, 0, -dot(g.data(), tp.value(im).data()) / (sv * sv));
        }
      },
      "scalar_div");
}

Var row_scale(Var m, Var s) {
  Tape& t = tape_of(m, s);
  const Matrix& mv = m.value();
  const Matrix& sv = s.value();
  if (sv.size() != mv.rows() || (sv.rows() != 1 && sv.cols() != 1)) {
    throw ShapeError("row_scale: scale " + sv.shape_string() + " does not match " +
                     std::to_string(mv.rows()) + " rows of " + mv.shape_string());
  }
  Matrix out = mv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& v : out.row(i)) v *= sv.data()[i];
  const std::size_t im = m.id(), is = s.id();
  Var parents[] = {m, s};
  return t.record(
      std::move(out), parents,
      [im, is](Tape& tp, const Matrix& g) {
        const Matrix& mv = tp.value(im);
        const Matrix& sv = tp.value(is);
        if (tp.needs_grad(im)) {
          Matrix d = g;
          for (std::size_t i = 0; i < d.rows(); ++i)
            for (double& v : d.row(i)) v *= sv.data()[i];
          tp.accumulate(im, d);
        }
        if (tp.needs_grad(is)) {
          Matrix d(sv.rows(), sv.cols());
          for (std::size_t i = 0; i < g.rows(); ++i) d.data()[i] = dot(g.row(i), mv.row(i));
          tp.accumulate(is, d);
        }
      },
      "row_scale");
}

Var causal_softmax(Var logits) { return softmax_impl(logits, true, "causal_softmax"); }
Var softmax_rows(Var logits) { return softmax_impl(logits, false, "softmax_rows"); }

Var log_softmax_rows(Var logits) {
  Tape& t = tape_of(logits);
  const Matrix& x = logits.value();
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    double lse = mx + std::log(z);
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) = r[j] - lse;
  }
  const std::size_t ia = logits.id();
  const std::size_t self = t.size();
  Var parents[] = {logits};
  return t.record(
      std::move(out), parents,
      [ia, self](Tape& tp, const Matrix& g) {
        const Matrix& y = tp.value(self);
        Matrix d(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double gs = 0.0;
          for (double v : g.row(i)) gs += v;
          for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = g(i, j) - std::exp(y(i, j)) * gs;
        }
        tp.accumulate(ia, d);
      },
      "log_softmax_rows");
}

double gelu_value(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Var tanh(Var v) {
  return unary(
      v, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; },
      "tanh");
}

Var sigmoid(Var v) {
  return unary(
      v,
      [](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var gelu(Var v) {
  return unary(v, gelu_value, [](double x, double) { return gelu_derivative(x); }, "gelu");
}

Var log(Var v) {
  for (double x : v.value().data()) {
    if (!(x > 0.0)) throw DomainError("log of non-positive entry " + std::to_string(x));
  }
  return unary(
      v, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

Var exp(Var v) {
  return unary(
      v, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

Var square(Var v) {
  return unary(
      v, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, "square");
}

Var l2_norm(Var v) {
  Tape& t = tape_of(v);
  const double n = frobenius_norm(v.value());
  const std::size_t ia = v.id();
  Var parents[] = {v};
  return t.record(
      Matrix(1, 1, n), parents,
      [ia, n](Tape& tp, const Matrix& g) {
        if (n == 0.0) return;  // subgradient 0 at the origin
        tp.accumulate(ia, tp.value(ia) * (g.item() / n));
      },
      "l2_norm");
}

Var sum(Var v) {
  Tape& t = tape_of(v);
  const std::size_t ia = v.id();
  const std::size_t r = v.rows(), c = v.cols();
  Var parents[] = {v};
  return t.record(
      Matrix(1, 1, sum(v.value())), parents,
      [ia, r, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, Matrix(r, c, g.item())); }, "sum");
}

Var mean(Var v) {
  const std::size_t n = v.value().size();
  if (n == 0) throw ShapeError("mean of an empty matrix");
  return scale(sum(v), 1.0 / static_cast<double>(n));
}

Var sum_rows(Var v) {
  Tape& t = tape_of(v);
  const Matrix& x = v.value();
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  const std::size_t ia = v.id();
  const std::size_t r = x.rows();
  Var parents[] = {v};
  return t.record(
      std::move(out), parents,
      [ia, r](Tape& tp, const Matrix& g) {
        Matrix d(r, g.cols());
        for (std::size_t i = 0; i < r; ++i) std::copy(g.row(0).begin(), g.row(0).end(), d.row(i).begin());
        tp.accumulate(ia, d);
      },
      "sum_rows");
}

Var gather_rows(Var v, std::span<const std::size_t> rows) {
  Tape& t = tape_of(v);
  Matrix out = select_rows(v.value(), rows);
  const std::size_t ia = v.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Var parents[] = {v};
  return t.record(
      std::move(out), parents,
      [ia, idx = std::move(idx)](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(ia);
        Matrix d(x.rows(), x.cols());
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < g.cols(); ++j) d(idx[r], j) += g(r, j);
        tp.accumulate(ia, d);
      },
      "gather_rows");
}

Var entry(Var v, std::size_t i, std::size_t j) {
  Tape& t = tape_of(v);
  const double x = v.value().at(i, j);
  const std::size_t ia = v.id();
  Var parents[] = {v};
  return t.record(
      Matrix(1, 1, x), parents,
      [ia, i, j](Tape& tp, const Matrix& g) { tp.accumulate_entry(ia, i, j, g.item()); }, "entry");
}

Var reshape(Var v, std::size_t rows, std::size_t cols) {
  Tape& t = tape_of(v);
  const Matrix& x = v.value();
  if (rows * cols != x.size()) {
    throw ShapeError("reshape: " + x.shape_string() + " cannot become " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  const std::size_t ia = v.id();
  const std::size_t r0 = x.rows(), c0 = x.cols();
  Var parents[] = {v};
  return t.record(
      Matrix(rows, cols, std::vector<double>(x.data().begin(), x.data().end())), parents,
      [ia, r0, c0](Tape& tp, const Matrix& g) {
        tp.accumulate(ia, Matrix(r0, c0, std::vector<double>(g.data().begin(), g.data().end())));
      },
      "reshape");
}

Var normalize_rows(Var v) {
  Tape& t = tape_of(v);
  const Matrix& x = v.value();
  Matrix out = x;
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    norms[i] = vector_norm(x.row(i));
    if (norms[i] == 0.0) throw DomainError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    for (double& e : out.row(i)) e /= norms[i];
  }
  const std::size_t ia = v.id();
  const std::size_t self = t.size();
  Var parents[] = {v};
  return t.record(
      std::move(out), parents,
      [ia, self, norms = std::move(norms)](Tape& tp, const Matrix& g) {
        const Matrix& y = tp.value(self);
        Matrix d(g.rows(), g.cols());
        // d(x/|x|) = (g - y (y.g)) / |x|
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const double yg = dot(y.row(i), g.row(i));
          for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = (g(i, j) - y(i, j) * yg) / norms[i];
        }
        tp.accumulate(ia, d);
      },
      "normalize_rows");
}

Var blockwise_scores(Var x, Var u, std::size_t block_rows) {
  Tape& t = tape_of(x, u);
  const Matrix& xv = x.value();
  const Matrix& uv = u.value();
  if (block_rows == 0 || xv.rows() != uv.rows() * block_rows || xv.cols() != uv.cols()) {
    throw ShapeError("blockwise_scores: " + xv.shape_string() + " is not " + std::to_string(uv.rows()) +
                     " blocks of " + std::to_string(block_rows) + " rows matching " + uv.shape_string());
  }
  const std::size_t B = uv.rows(), L = block_rows;
  Matrix out(B, L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i) out(b, i) = dot(xv.row(b * L + i), uv.row(b));
  const std::size_t ix = x.id(), iu = u.id();
  Var parents[] = {x, u};
  return t.record(
      std::move(out), parents,
      [ix, iu, B, L](Tape& tp, const Matrix& g) {
        const Matrix& xv = tp.value(ix);
        const Matrix& uv = tp.value(iu);
        const std::size_t d = uv.cols();
        if (tp.needs_grad(iu)) {
          Matrix du(B, d);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < L; ++i) {
              const double gi = g(b, i);
              const auto xr = xv.row(b * L + i);
              for (std::size_t j = 0; j < d; ++j) du(b, j) += gi * xr[j];
            }
          tp.accumulate(iu, du);
        }
        if (tp.needs_grad(ix)) {
          Matrix dx(B * L, d);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < L; ++i)
              for (std::size_t j = 0; j < d; ++j) dx(b * L + i, j) = g(b, i) * uv(b, j);
          tp.accumulate(ix, dx);
        }
      },
      "blockwise_scores");
}

Var blockwise_mix(Var p, Var x) {
  Tape& t = tape_of(p, x);
  const Matrix& pv = p.value();
  const Matrix& xv = x.value();
  const std::size_t B = pv.rows(), L = pv.cols(), d = xv.cols();
  if (xv.rows() != B * L) {
    throw ShapeError("blockwise_mix: weights " + pv.shape_string() + " do not match stacked rows " + xv.shape_string());
  }
  Matrix out(B, d);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i) {
      const double w = pv(b, i);
      if (w == 0.0) continue;
      const auto xr = xv.row(b * L + i);
      for (std::size_t j = 0; j < d; ++j) out(b, j) += w * xr[j];
    }
  const std::size_t ip = p.id(), ix = x.id();
  Var parents[] = {p, x};
  return t.record(
      std::move(out), parents,
      [ip, ix, B, L, d](Tape& tp, const Matrix& g) {
        const Matrix& pv = tp.value(ip);
        const Matrix& xv = tp.value(ix);
        if (tp.needs_grad(ip)) {
          Matrix dp(B, L);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < L; ++i) dp(b, i) = dot(g.row(b), xv.row(b * L + i));
          tp.accumulate(ip, dp);
        }
        if (tp.needs_grad(ix)) {
          Matrix dx(B * L, d);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < L; ++i)
              for (std::size_t j = 0; j < d; ++j) dx(b * L + i, j) = pv(b, i) * g(b, j);
          tp.accumulate(ix, dx);
        }
      },
      "blockwise_mix");
}

Var add_all(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_all of no terms");
  Tape& t = tape_of(terms.front());
  double s = 0.0;
  std::vector<std::size_t> ids;
  ids.reserve(terms.size());
  for (const Var& v : terms) {
    s += v.value().item();
    ids.push_back(v.id());
  }
  return t.record(
      Matrix(1, 1, s), terms,
      [ids = std::move(ids)](Tape& tp, const Matrix& g) {
        for (std::size_t id : ids) tp.accumulate_entry(id, 0, 0, g.item());
      },
      "add_all");
}

}  // namespace ssa

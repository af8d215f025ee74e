#include "ssa/attention.hpp"

#include <cmath>

#include "ssa/errors.hpp"

namespace ssa {

const char* stream_name(Stream s) {
  switch (s) {
    case Stream::Query: return "q";
    case Stream::Key: return "k";
    case Stream::Value: return "v";
  }
  return "?";
}

TemperatureSpec make_constant(double c) { return temp::Constant{Matrix::scalar(c)}; }

TemperatureSpec make_position_aware(double alpha) { return temp::PositionAware{Matrix::scalar(alpha)}; }

TemperatureSpec make_token_aware(std::size_t d, Rng& rng, std::size_t hidden) {
  if (hidden == 0) hidden = d;
  return temp::TokenAware{Matrix(1, hidden), rng.normal_matrix(hidden, d, 1.0 / std::sqrt(double(d)))};
}

TemperatureSpec make_combined(std::size_t d, Rng& rng, double alpha) {
  return temp::Combined{Matrix::scalar(alpha), Matrix(1, d), rng.normal_matrix(d, d, 1.0 / std::sqrt(double(d)))};
}

TemperatureSpec make_weight_shared(std::size_t d, Stream source) { return temp::WeightShared{Matrix(1, d), source}; }

TemperatureSpec make_feature_based(std::vector<double> frequency, double scale) {
  return temp::FeatureBased{Matrix::scalar(scale), std::move(frequency)};
}

TemperatureSpec make_group_table(std::vector<std::size_t> group_of_token, std::size_t groups, double init) {
  for (std::size_t g : group_of_token) {
    if (g >= groups) throw LookupError("group id " + std::to_string(g) + " outside table of " + std::to_string(groups));
  }
  return temp::GroupTable{Matrix(1, groups, init), std::move(group_of_token)};
}

TemperatureSpec make_threshold_gate(double level) { return temp::ThresholdGate{level}; }

std::string temperature_kind(const TemperatureSpec& spec) {
  static const char* names[] = {"identity", "constant",      "position",  "token",         "combined",
                                "weight-shared", "feature-based", "group-table", "threshold-gate"};
  return names[spec.index()];
}

bool is_identity(const TemperatureSpec& spec) { return std::holds_alternative<temp::Identity>(spec); }

const Matrix& AttentionLayer::weight(Stream s) const {
  switch (s) {
    case Stream::Query: return w_q;
    case Stream::Key: return w_k;
    case Stream::Value: return w_v;
  }
  return w_q;
}

TemperatureSpec& AttentionLayer::temperature(Stream s) {
  switch (s) {
    case Stream::Query: return temp_q;
    case Stream::Key: return temp_k;
    case Stream::Value: return temp_v;
  }
  return temp_q;
}

const TemperatureSpec& AttentionLayer::temperature(Stream s) const {
  return const_cast<AttentionLayer*>(this)->temperature(s);
}

void AttentionLayer::validate() const {
  const std::size_t d = w_q.rows();
  for (const Matrix* m : {&w_q, &w_k, &w_v}) {
    if (m->rows() != d || m->cols() != d) {
      throw ShapeError("attention weights must all be " + std::to_string(d) + "x" + std::to_string(d) + ", got " +
                       m->shape_string());
    }
  }
}

AttentionLayer AttentionLayer::random(std::size_t d, Rng& rng, double stddev) {
  if (stddev == 0.0) stddev = 1.0 / std::sqrt(double(d));
  AttentionLayer layer;
  layer.w_q = rng.normal_matrix(d, d, stddev);
  layer.w_k = rng.normal_matrix(d, d, stddev);
  layer.w_v = rng.normal_matrix(d, d, stddev);
  return layer;
}

std::vector<ParamSlot> temperature_parameters(TemperatureSpec& spec, const std::string& prefix) {
  std::vector<ParamSlot> out;
  std::visit(
      [&](auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, temp::Constant>) {
          out.push_back({prefix + ".value", &t.value});
        } else if constexpr (std::is_same_v<T, temp::PositionAware>) {
          out.push_back({prefix + ".alpha", &t.alpha});
        } else if constexpr (std::is_same_v<T, temp::TokenAware>) {
          out.push_back({prefix + ".w_out", &t.w_out});
          out.push_back({prefix + ".w_hidden", &t.w_hidden});
        } else if constexpr (std::is_same_v<T, temp::Combined>) {
          out.push_back({prefix + ".alpha", &t.alpha});
          out.push_back({prefix + ".w_out", &t.w_out});
          out.push_back({prefix + ".w_hidden", &t.w_hidden});
        } else if constexpr (std::is_same_v<T, temp::WeightShared>) {
          out.push_back({prefix + ".w_out", &t.w_out});
        } else if constexpr (std::is_same_v<T, temp::FeatureBased>) {
          out.push_back({prefix + ".scale", &t.scale});
        } else if constexpr (std::is_same_v<T, temp::GroupTable>) {
          out.push_back({prefix + ".values", &t.values});
        }
      },
      spec);
  return out;
}

std::vector<ParamSlot> parameters(AttentionLayer& layer) {
  std::vector<ParamSlot> out = {{"w_q", &layer.w_q}, {"w_k", &layer.w_k}, {"w_v", &layer.w_v}};
  for (Stream s : {Stream::Query, Stream::Key, Stream::Value}) {
    auto t = temperature_parameters(layer.temperature(s), std::string("temp_") + stream_name(s));
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

Var ParamBinder::bind(const Matrix& m) {
  auto it = bound_.find(&m);
  if (it != bound_.end()) return it->second;
  Var v = tape_.leaf(m);
  bound_.emplace(&m, v);
  return v;
}

Matrix ParamBinder::grad(const Matrix& m) const {
  auto it = bound_.find(&m);
  if (it == bound_.end()) return Matrix(m.rows(), m.cols());
  return it->second.grad();
}

namespace {

Var position_column(ParamBinder& b, const Matrix& alpha, std::size_t L, std::size_t seq_len) {
  Matrix logn(L, 1);
  for (std::size_t r = 0; r < L; ++r) logn(r, 0) = std::log(double(r % seq_len + 1));
  return add_constant(scalar_mul(b.constant(std::move(logn)), sigmoid(b.bind(alpha))), 1.0);
}

Var token_column(ParamBinder& b, const Matrix& w_out, Var hidden_pre) {
  if (w_out.cols() != hidden_pre.cols()) {
    throw ShapeError("token temperature: w_out " + w_out.shape_string() + " does not match hidden width " +
                     std::to_string(hidden_pre.cols()));
  }
  return tanh(matmul(gelu(hidden_pre), transpose(b.bind(w_out))));
}

Var hidden_projection(ParamBinder& b, Var x, const Matrix& w_hidden) {
  if (w_hidden.cols() != x.cols()) {
    throw ShapeError("token temperature: w_hidden " + w_hidden.shape_string() + " does not accept inputs of width " +
                     std::to_string(x.cols()));
  }
  return matmul(x, transpose(b.bind(w_hidden)));
}

const std::size_t& token_at(std::span<const std::size_t> tokens, std::size_t i, const char* who) {
  if (i >= tokens.size()) throw LookupError(std::string(who) + " temperature needs a token id for every row");
  return tokens[i];
}

}  // namespace

Var temperature_column(ParamBinder& b, const TemperatureSpec& spec, Var x, std::span<const std::size_t> tokens,
                       const AttentionLayer& layer, std::size_t seq_len) {
  const std::size_t L = x.rows();
  if (seq_len == 0) seq_len = L;
  return std::visit(
      [&](const auto& t) -> Var {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, temp::Identity>) {
          return b.constant(Matrix(L, 1, 1.0));
        } else if constexpr (std::is_same_v<T, temp::Constant>) {
          return scalar_mul(b.constant(Matrix(L, 1, 1.0)), b.bind(t.value));
        } else if constexpr (std::is_same_v<T, temp::PositionAware>) {
          return position_column(b, t.alpha, L, seq_len);
        } else if constexpr (std::is_same_v<T, temp::TokenAware>) {
          return token_column(b, t.w_out, hidden_projection(b, x, t.w_hidden));
        } else if constexpr (std::is_same_v<T, temp::Combined>) {
          return add(token_column(b, t.w_out, hidden_projection(b, x, t.w_hidden)), position_column(b, t.alpha, L, seq_len));
        } else if constexpr (std::is_same_v<T, temp::WeightShared>) {
          return token_column(b, t.w_out, matmul(x, b.bind(layer.weight(t.source))));
        } else if constexpr (std::is_same_v<T, temp::FeatureBased>) {
          Matrix f(L, 1);
          for (std::size_t i = 0; i < L; ++i) {
            std::size_t id = token_at(tokens, i, "feature-based");
            if (id >= t.frequency.size()) {
              throw LookupError("feature-based temperature: unknown token id " + std::to_string(id));
            }
            f(i, 0) = t.frequency[id];
          }
          return scalar_mul(b.constant(std::move(f)), b.bind(t.scale));
        } else if constexpr (std::is_same_v<T, temp::GroupTable>) {
          std::vector<std::size_t> groups(L);
          for (std::size_t i = 0; i < L; ++i) {
            std::size_t id = token_at(tokens, i, "group-table");
            if (id >= t.group_of_token.size()) {
              throw LookupError("group-table temperature: unknown token id " + std::to_string(id));
            }
            groups[i] = t.group_of_token[id];
          }
          return gather_rows(transpose(b.bind(t.values)), groups);
        } else {
          const Matrix& xv = x.value();
          Matrix g(L, 1);
          for (std::size_t i = 0; i < L; ++i) {
            double mx = xv(i, 0);
            for (double v : xv.row(i)) mx = std::max(mx, v);
            g(i, 0) = mx >= t.level ? 1.0 : 0.0;
          }
          return b.constant(std::move(g));
        }
      },
      spec);
}

namespace {

void check_input(const AttentionLayer& layer, const Matrix& x) {
  layer.validate();
  if (x.cols() != layer.dim()) {
    throw ShapeError("attention input " + x.shape_string() + " does not have " + std::to_string(layer.dim()) +
                     " columns");
  }
  if (x.rows() == 0) throw ShapeError("attention input has no rows");
}

Var scaled_stream(ParamBinder& b, const AttentionLayer& layer, Var x, std::span<const std::size_t> tokens, Stream s) {
  Var proj = matmul(x, b.bind(layer.weight(s)));
  const TemperatureSpec& spec = layer.temperature(s);
  if (is_identity(spec)) return proj;
  return row_scale(proj, temperature_column(b, spec, x, tokens, layer));
}

}  // namespace

Var attention_scores(ParamBinder& b, const AttentionLayer& layer, Var x, std::span<const std::size_t> tokens,
                     MapMode mode) {
  check_input(layer, x.value());
  Var q = scaled_stream(b, layer, x, tokens, Stream::Query);
  Var k = scaled_stream(b, layer, x, tokens, Stream::Key);
  Var logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(layer.dim())));
  return mode == MapMode::Causal ? causal_softmax(logits) : softmax_rows(logits);
}

Var selective_attention(ParamBinder& b, const AttentionLayer& layer, Var x, std::span<const std::size_t> tokens,
                        MapMode mode) {
  Var p = attention_scores(b, layer, x, tokens, mode);
  return matmul(p, scaled_stream(b, layer, x, tokens, Stream::Value));
}

Var last_query_logits(ParamBinder& b, const AttentionLayer& layer, Var x, std::size_t seq_len,
                      std::span<const std::size_t> tokens) {
  check_input(layer, x.value());
  if (seq_len == 0 || x.rows() % seq_len != 0) {
    throw ShapeError("last_query_logits: " + std::to_string(x.rows()) + " rows are not whole sequences of length " +
                     std::to_string(seq_len));
  }
  const std::size_t B = x.rows() / seq_len;
  std::vector<std::size_t> last(B);
  for (std::size_t i = 0; i < B; ++i) last[i] = (i + 1) * seq_len - 1;
  // q K^T = (x_L W_q W_k^T) X^T, with key temperatures applied per column.
  Var u = matmul(matmul(gather_rows(x, last), b.bind(layer.w_q)), transpose(b.bind(layer.w_k)));
  if (!is_identity(layer.temp_q)) {
    u = row_scale(u, gather_rows(temperature_column(b, layer.temp_q, x, tokens, layer, seq_len), last));
  }
  Var logits = blockwise_scores(x, u, seq_len);
  if (!is_identity(layer.temp_k)) {
    logits = hadamard(logits, reshape(temperature_column(b, layer.temp_k, x, tokens, layer, seq_len), B, seq_len));
  }
  return scale(logits, 1.0 / std::sqrt(double(layer.dim())));
}

Var attend_last(ParamBinder& b, const AttentionLayer& layer, Var x, std::size_t seq_len,
                std::span<const std::size_t> tokens) {
  Var p = softmax_rows(last_query_logits(b, layer, x, seq_len, tokens));
  if (!is_identity(layer.temp_v)) {
    p = hadamard(p, reshape(temperature_column(b, layer.temp_v, x, tokens, layer, seq_len), p.rows(), seq_len));
  }
  return matmul(blockwise_mix(p, x), b.bind(layer.w_v));
}

double position_temperature(std::size_t n, double alpha) {
  if (n == 0) throw DomainError("position_temperature: positions are 1-indexed");
  const double s = alpha >= 0 ? 1.0 / (1.0 + std::exp(-alpha)) : std::exp(alpha) / (1.0 + std::exp(alpha));
  return 1.0 + s * std::log(double(n));
}

double token_temperature(std::span<const double> x, const Matrix& w_out, const Matrix& w_hidden) {
  if (w_hidden.cols() != x.size() || w_out.cols() != w_hidden.rows() || w_out.rows() != 1) {
    throw ShapeError("token_temperature: w_out " + w_out.shape_string() + ", w_hidden " + w_hidden.shape_string() +
                     ", input length " + std::to_string(x.size()));
  }
  double f = 0.0;
  for (std::size_t h = 0; h < w_hidden.rows(); ++h) f += w_out(0, h) * gelu_value(dot(w_hidden.row(h), x));
  return std::tanh(f);
}

std::vector<double> evaluate_temperatures(const Matrix& x, const TemperatureSpec& spec, const AttentionLayer& layer,
                                          std::span<const std::size_t> tokens) {
  Tape tape;
  ParamBinder b(tape);
  Var col = temperature_column(b, spec, tape.constant(x), tokens, layer);
  auto d = col.value().data();
  return {d.begin(), d.end()};
}

Matrix vanilla_attention(const Matrix& x, const AttentionLayer& layer) {
  check_input(layer, x);
  const Matrix q = matmul(x, layer.w_q);
  const Matrix k = matmul(x, layer.w_k);
  const Matrix v = matmul(x, layer.w_v);
  const double inv = 1.0 / std::sqrt(double(layer.dim()));
  const std::size_t L = x.rows();
  Matrix out(L, layer.dim());
  std::vector<double> w(L);
  for (std::size_t n = 0; n < L; ++n) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i <= n; ++i) {
      w[i] = dot(q.row(n), k.row(i)) * inv;
      mx = std::max(mx, w[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      w[i] = std::exp(w[i] - mx);
      z += w[i];
    }
    for (std::size_t i = 0; i <= n; ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(n, j) += w[i] / z * v(i, j);
  }
  return out;
}

Matrix selective_attention(const Matrix& x, const AttentionLayer& layer, std::span<const std::size_t> tokens) {
  Tape tape;
  ParamBinder b(tape);
  return selective_attention(b, layer, tape.constant(x), tokens).value();
}

Matrix attention_map(const Matrix& x, const AttentionLayer& layer, MapMode mode, std::span<const std::size_t> tokens) {
  Tape tape;
  ParamBinder b(tape);
  return attention_scores(b, layer, tape.constant(x), tokens, mode).value();
}

}  // namespace ssa

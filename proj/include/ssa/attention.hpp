#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "ssa/autodiff.hpp"
#include "ssa/matrix.hpp"
#include "ssa/rng.hpp"

namespace ssa {

enum class Stream { Query, Key, Value };
const char* stream_name(Stream s);

// Per-token scalar multipliers applied to the rows of Q, K or V.
namespace temp {

struct Identity {};

struct Constant {
  Matrix value;  // 1x1, trainable
};

// 1 + sigmoid(alpha) * ln(n) at 1-indexed position n.
struct PositionAware {
  Matrix alpha;  // 1x1
};

// tanh(w_out . gelu(w_hidden x)).
struct TokenAware {
  Matrix w_out;     // 1 x h
  Matrix w_hidden;  // h x d
};

// Token-aware plus position-aware.
struct Combined {
  Matrix alpha;
  Matrix w_out;
  Matrix w_hidden;
};

// Token-aware where the hidden layer is the attention layer's own projection for `source`.
struct WeightShared {
  Matrix w_out;  // 1 x d
  Stream source;
};

// scale * frequency[token id].
struct FeatureBased {
  Matrix scale;  // 1x1
  std::vector<double> frequency;
};

// One trainable scalar per token group.
struct GroupTable {
  Matrix values;  // 1 x groups
  std::vector<std::size_t> group_of_token;
};

// Fixed 0/1 gate: 1 when the token's largest coordinate reaches `level`.
struct ThresholdGate {
  double level = 0.5;
};

}  // namespace temp

using TemperatureSpec = std::variant<temp::Identity, temp::Constant, temp::PositionAware, temp::TokenAware,
                                     temp::Combined, temp::WeightShared, temp::FeatureBased, temp::GroupTable,
                                     temp::ThresholdGate>;

inline constexpr double kDefaultPositionAlpha = -4.0;

TemperatureSpec make_constant(double c);
TemperatureSpec make_position_aware(double alpha = kDefaultPositionAlpha);
// Hidden width defaults to d; w_out starts at zero so the output starts at 0.
TemperatureSpec make_token_aware(std::size_t d, Rng& rng, std::size_t hidden = 0);
TemperatureSpec make_combined(std::size_t d, Rng& rng, double alpha = kDefaultPositionAlpha);
TemperatureSpec make_weight_shared(std::size_t d, Stream source);
TemperatureSpec make_feature_based(std::vector<double> frequency, double scale = 1.0);
TemperatureSpec make_group_table(std::vector<std::size_t> group_of_token, std::size_t groups, double init = 1.0);
TemperatureSpec make_threshold_gate(double level = 0.5);

std::string temperature_kind(const TemperatureSpec& spec);
bool is_identity(const TemperatureSpec& spec);

struct AttentionLayer {
  Matrix w_q, w_k, w_v;
  TemperatureSpec temp_q, temp_k, temp_v;

  std::size_t dim() const { return w_q.rows(); }
  const Matrix& weight(Stream s) const;
  TemperatureSpec& temperature(Stream s);
  const TemperatureSpec& temperature(Stream s) const;
  // Throws ShapeError unless all weights are d x d.
  void validate() const;

  // Gaussian weights with standard deviation `stddev` (1/sqrt(d) when 0); Identity temperatures.
  static AttentionLayer random(std::size_t d, Rng& rng, double stddev = 0.0);
};

struct ParamSlot {
  std::string name;
  Matrix* value;
};

// Every trainable matrix of the layer, weights first, in a stable order.
std::vector<ParamSlot> parameters(AttentionLayer& layer);
std::vector<ParamSlot> temperature_parameters(TemperatureSpec& spec, const std::string& prefix);

// Maps parameter matrices to tape leaves, one leaf per matrix address, so shared
// matrices accumulate a single gradient.
class ParamBinder {
 public:
  explicit ParamBinder(Tape& tape) : tape_(tape) {}
  Var bind(const Matrix& m);
  // Makes later bind(m) calls return v instead of creating a new leaf.
  void attach(const Matrix& m, Var v) { bound_[&m] = v; }
  Var constant(Matrix m) { return tape_.constant(std::move(m)); }
  // Zero matrix when m was never bound.
  Matrix grad(const Matrix& m) const;
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  std::unordered_map<const Matrix*, Var> bound_;
};

enum class MapMode { Causal, Full };

// Column of per-row temperatures for x. Rows are positions 1..seq_len of consecutive
// sequences (seq_len = 0 treats x as one sequence). `tokens` gives vocabulary ids;
// required by FeatureBased and GroupTable.
Var temperature_column(ParamBinder& b, const TemperatureSpec& spec, Var x, std::span<const std::size_t> tokens,
                       const AttentionLayer& layer, std::size_t seq_len = 0);

// softmax(QK^T / sqrt(d)) V with Q, K, V row-scaled by their temperatures.
Var selective_attention(ParamBinder& b, const AttentionLayer& layer, Var x, std::span<const std::size_t> tokens = {},
                        MapMode mode = MapMode::Causal);
// Post-softmax score matrix of the same computation.
Var attention_scores(ParamBinder& b, const AttentionLayer& layer, Var x, std::span<const std::size_t> tokens = {},
                     MapMode mode = MapMode::Causal);
// x stacks B sequences of seq_len rows. Returns the B x seq_len scaled scores of each
// sequence's last query against its own keys, before the softmax.
Var last_query_logits(ParamBinder& b, const AttentionLayer& layer, Var x, std::size_t seq_len,
                      std::span<const std::size_t> tokens = {});
// Row b is the last output row of sequence b; equals the last row of selective_attention.
Var attend_last(ParamBinder& b, const AttentionLayer& layer, Var x, std::size_t seq_len,
                std::span<const std::size_t> tokens = {});

// Plain-matrix entry points (no gradients).
double position_temperature(std::size_t n, double alpha);
double token_temperature(std::span<const double> x, const Matrix& w_out, const Matrix& w_hidden);
std::vector<double> evaluate_temperatures(const Matrix& x, const TemperatureSpec& spec, const AttentionLayer& layer,
                                          std::span<const std::size_t> tokens = {});
Matrix vanilla_attention(const Matrix& x, const AttentionLayer& layer);
Matrix selective_attention(const Matrix& x, const AttentionLayer& layer, std::span<const std::size_t> tokens = {});
Matrix attention_map(const Matrix& x, const AttentionLayer& layer, MapMode mode = MapMode::Causal,
                     std::span<const std::size_t> tokens = {});

}  // namespace ssa

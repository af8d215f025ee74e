#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ssa/attention.hpp"
#include "ssa/autodiff.hpp"
#include "ssa/tasks.hpp"
#include "ssa/theory.hpp"

namespace ssa {

// ---- Optimizer ------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, AdamW style
  void validate() const;
};

class Adam {
 public:
  Adam(AdamConfig cfg, std::vector<Matrix*> params);
  // Throws NonFiniteError carrying the 1-based step index when a gradient is not finite.
  void step(const std::vector<Matrix>& grads);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix*> params_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

// ---- Losses ---------------------------------------------------------------------------

double cross_entropy(std::span<const double> logits, std::size_t label);
// Mean over rows of -log softmax(row)[label].
Var cross_entropy_rows(Var logits, std::span<const std::size_t> labels);
// Mean over rows of -log_probs(row, label).
Var nll_rows(Var log_probs, std::span<const std::size_t> labels);

// ||y - y_hat / ||y_hat|| ||^2
double mse_normalized(std::span<const double> y, std::span<const double> y_hat);
// Mean over rows of the above.
Var mse_normalized_rows(Var y_hat, const Matrix& y);

struct CurvePoint {
  std::size_t step;
  std::string metric;
  double value;
};

// ---- Graph next-token experiment ------------------------------------------------------

// Direct: the predicted distribution is the last query's attention row mapped onto tokens.
// Linear: softmax(C f) with f the attention output, as a classifier head.
enum class GraphHead { Direct, Linear };
enum class EmbeddingMode { Fixed, Trainable };

// Where temperatures go and how they are parameterized. kind is one of
// group, combined, position, token, constant, feature, weight-shared.
struct TemperaturePlan {
  bool query = false, key = false, value = false;
  std::string kind = "group";

  bool active() const { return query || key || value; }
  std::string placement() const;  // "none", "Q", "KQV", ...
  static TemperaturePlan parse(const std::string& placement, const std::string& kind);
};

const std::vector<std::string>& temperature_kinds();
const std::vector<std::string>& temperature_placements();

struct GraphConfig {
  std::size_t d = 8;
  std::size_t steps = 3000;
  std::size_t batch = 64;
  std::size_t log_every = 100;
  std::size_t eval_permutations = 16;
  AdamConfig adam{};
  // Learning rate for temperature parameters; 0 means adam.lr.
  double temperature_lr = 1e-2;
  GraphHead head = GraphHead::Direct;
  EmbeddingMode embeddings = EmbeddingMode::Fixed;
  TemperaturePlan temperatures{};
  std::uint64_t seed = 0;
  void validate() const;
};

struct GraphModel {
  Matrix embeddings;  // K x d
  AttentionLayer layer;
  Matrix head;        // K x d, used by the linear head
};

GraphModel init_graph_model(const GraphConfig& cfg, const Graph& g, const TransitionMatrix& p_star);
std::vector<ParamSlot> graph_parameters(GraphModel& m, const GraphConfig& cfg);
// Mean next-token cross-entropy of the batch.
Var graph_loss(ParamBinder& b, const GraphModel& m, const GraphBatch& batch, GraphHead head);

struct GraphEvaluation {
  Matrix p_hat;        // attention row of each final query token, averaged over orderings
  Matrix prediction;   // predicted next-token distribution per final query token
  double cross_entropy;  // expected under P*, includes the entropy of P*
  double target_entropy;
  double err_map;
  double operator_norm;  // ||W_q W_k^T||
  double mean_spikiness;
  std::vector<double> group_tau;  // mean query temperature per neighbour group (smallest group first)
};
GraphEvaluation evaluate_graph(const GraphModel& m, const GraphConfig& cfg, const Graph& g,
                               const TransitionMatrix& p_star);

struct GraphRun {
  GraphConfig config;
  GraphEvaluation eval;
  Matrix p_star;
  std::vector<std::size_t> group_sizes;
  std::vector<CurvePoint> curve;
  bool diverged = false;
  std::string divergence;
  GraphModel model;
};

GraphRun train_graph(const GraphConfig& cfg);

// Min-max normalization of a map to [0, 1] (constant maps become all zero).
Matrix minmax_normalize(const Matrix& m);

// ---- Denoising -----------------------------------------------------------------------

struct DenoiseConfig {
  std::size_t k = 8;
  std::size_t L = 256;
  double sigma = 0.3;
  double alpha_frac = 0.25;
  std::size_t steps = 400;
  std::size_t batch = 64;
  std::size_t eval_batch = 4096;
  std::size_t log_every = 50;
  double gate_level = 0.5;
  AdamConfig adam{3e-2, 0.9, 0.95, 1e-8, 0.0};
  std::uint64_t seed = 0;
};

struct DenoiseRun {
  DenoiseConfig config;
  double risk_naive = 0.0;
  double risk_bayes = 0.0;
  double risk_vanilla = 0.0;
  double risk_value_selective = 0.0;
  double risk_mask_average = 0.0;  // plain average of the threshold-kept tokens
  std::vector<CurvePoint> curve;
  bool diverged = false;
  std::string divergence;
};

Var denoise_loss(ParamBinder& b, const AttentionLayer& layer, const std::vector<DenoisingSample>& batch);
double denoise_risk(const AttentionLayer& layer, const std::vector<DenoisingSample>& batch);
DenoiseRun train_denoising(const DenoiseConfig& cfg);

// ---- Imbalanced mixture ---------------------------------------------------------------

struct ImbalancedConfig {
  std::size_t L = 64;
  std::size_t d = 4;
  std::string pattern = "conforming";
  double alpha = 0.5;
  std::size_t steps = 3000;
  std::size_t log_every = 100;
  AdamConfig adam{1e-2, 0.9, 0.95, 1e-8, 0.0};
  std::uint64_t seed = 0;
};

// Differentiable version of imbalanced_risk; temps is L x 1.
Var imbalanced_risk_var(Var w, Var temps, const ImbalancedInstance& inst);

struct ImbalancedRun {
  ImbalancedConfig config;
  ImbalancedInstance instance;
  double flat_risk = 0.0;      // trained W, every temperature fixed at 1
  double position_risk = 0.0;  // trained W and one free temperature per position
  double analytic_risk = 0.0;  // constructed W with the closed-form temperatures
  double floor = 0.0;          // NaN when the instance does not satisfy the quadrant conditions
  double min_flat_risk = 0.0;  // lowest flat risk seen at any step
  std::vector<CurvePoint> curve;
};

ImbalancedRun train_imbalanced(const ImbalancedConfig& cfg);

// ---- Norm / spikiness study -----------------------------------------------------------

struct NormStudyRow {
  std::uint64_t seed;
  double vanilla_norm, ssa_norm;
  double vanilla_spikiness, ssa_spikiness;
};

// Trains vanilla and SSA graph models per seed and compares ||W_q W_k^T|| and mean spikiness.
std::vector<NormStudyRow> norm_spikiness_study(const GraphConfig& ssa_cfg, std::span<const std::uint64_t> seeds);
NormStudyRow norm_row(std::uint64_t seed, const GraphRun& vanilla, const GraphRun& ssa);

}  // namespace ssa

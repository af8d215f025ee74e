#include "ssa/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ssa/errors.hpp"
#include "ssa/metrics.hpp"

namespace ssa {

// ---- Optimizer ------------------------------------------------------------------------

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr", "learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam_eps", "adam epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "weight decay must be non-negative");
}

Adam::Adam(AdamConfig cfg, std::vector<Matrix*> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  for (const Matrix* p : params_) {
    m_.emplace_back(p->rows(), p->cols());
    v_.emplace_back(p->rows(), p->cols());
  }
}

void Adam::step(const std::vector<Matrix>& grads) {
  if (grads.size() != params_.size()) throw ShapeError("Adam::step: one gradient per parameter required");
  const std::size_t next = t_ + 1;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require_same_shape(grads[i], *params_[i], "Adam::step");
    if (!all_finite(grads[i])) {
      throw NonFiniteError("non-finite gradient at step " + std::to_string(next), next);
    }
  }
  t_ = next;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto p = params_[i]->data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[k]);
    }
  }
}

// ---- Losses ---------------------------------------------------------------------------

double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw LookupError("cross_entropy: label outside the logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return -(logits[label] - mx - std::log(z));
}

Var nll_rows(Var log_probs, std::span<const std::size_t> labels) {
  const std::size_t B = log_probs.rows();
  if (labels.size() != B) throw ShapeError("nll_rows: one label per row required");
  Matrix onehot(B, log_probs.cols());
  for (std::size_t b = 0; b < B; ++b) onehot.at(b, labels[b]) = 1.0;
  Tape& t = *log_probs.tape();
  return scale(sum(hadamard(log_probs, t.constant(std::move(onehot)))), -1.0 / double(B));
}

Var cross_entropy_rows(Var logits, std::span<const std::size_t> labels) {
  return nll_rows(log_softmax_rows(logits), labels);
}

double mse_normalized(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) throw ShapeError("mse_normalized: lengths differ");
  const double n = vector_norm(y_hat);
  if (n == 0.0) throw DomainError("mse_normalized: prediction has zero norm");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i] / n) * (y[i] - y_hat[i] / n);
  return s;
}

Var mse_normalized_rows(Var y_hat, const Matrix& y) {
  Tape& t = *y_hat.tape();
  return scale(sum(square(sub(t.constant(y), normalize_rows(y_hat)))), 1.0 / double(y.rows()));
}

// ---- Graph experiment -----------------------------------------------------------------

std::string TemperaturePlan::placement() const {
  if (!active()) return "none";
  std::string s;
  if (key) s += "K";
  if (query) s += "Q";
  if (value) s += "V";
  return s;
}

const std::vector<std::string>& temperature_kinds() {
  static const std::vector<std::string> kinds = {"group",   "combined", "position",     "token",
                                                 "constant", "feature", "weight-shared"};
  return kinds;
}

const std::vector<std::string>& temperature_placements() {
  static const std::vector<std::string> p = {"none", "Q", "K", "V", "QV", "KQV"};
  return p;
}

TemperaturePlan TemperaturePlan::parse(const std::string& placement, const std::string& kind) {
  if (std::find(temperature_kinds().begin(), temperature_kinds().end(), kind) == temperature_kinds().end()) {
    throw ConfigError("temperature.kind", "unknown temperature kind '" + kind + "'");
  }
  TemperaturePlan p;
  p.kind = kind;
  if (placement == "none") return p;
  for (char c : placement) {
    bool* slot = nullptr;
    switch (c) {
      case 'Q': case 'q': slot = &p.query; break;
      case 'K': case 'k': slot = &p.key; break;
      case 'V': case 'v': slot = &p.value; break;
      default: throw ConfigError("temperature.placement", "placement must use the letters Q, K, V or be 'none'");
    }
    if (*slot) throw ConfigError("temperature.placement", "placement '" + placement + "' repeats a letter");
    *slot = true;
  }
  if (!p.active()) throw ConfigError("temperature.placement", "empty placement");
  return p;
}

namespace {

std::vector<double> token_frequency(const TransitionMatrix& p_star, std::uint64_t seed) {
  Rng rng(seed, "graph-frequency");
  const GraphBatch batch = sample_graph_batch(p_star, 4096, rng);
  const std::size_t k = p_star.k();
  std::vector<double> f(k, 0.0);
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    for (std::size_t t : batch.sequences[b]) f[t] += 1.0;
    f[batch.labels[b]] += 1.0;
  }
  const double mx = *std::max_element(f.begin(), f.end());
  for (double& v : f) v /= mx;
  return f;
}

TemperatureSpec make_spec(const std::string& kind, Stream stream, std::size_t d, const NeighborGroups& groups,
                          const std::vector<double>& freq, Rng& rng) {
  if (kind == "group") return make_group_table(groups.group_of_node, groups.count(), 1.0);
  if (kind == "combined") return make_combined(d, rng);
  if (kind == "position") return make_position_aware();
  if (kind == "token") return make_token_aware(d, rng);
  if (kind == "constant") return make_constant(1.0);
  if (kind == "feature") return make_feature_based(freq, 1.0);
  if (kind == "weight-shared") return make_weight_shared(d, stream);
  throw ConfigError("temperature.kind", "unknown temperature kind '" + kind + "'");
}

std::vector<std::size_t> flatten(const std::vector<std::vector<std::size_t>>& seqs) {
  std::vector<std::size_t> out;
  for (const auto& s : seqs) out.insert(out.end(), s.begin(), s.end());
  return out;
}

Var embed(ParamBinder& b, const GraphModel& m, std::span<const std::size_t> tokens, bool trainable) {
  Var e = trainable ? b.bind(m.embeddings) : b.constant(m.embeddings);
  return gather_rows(e, tokens);
}

// Log-probabilities over positions (direct head) or over the vocabulary (linear head).
Var graph_log_probs(ParamBinder& b, const GraphModel& m, std::span<const std::size_t> tokens, std::size_t k,
                    GraphHead head, bool trainable_embeddings) {
  Var x = embed(b, m, tokens, trainable_embeddings);
  if (head == GraphHead::Direct) return log_softmax_rows(last_query_logits(b, m.layer, x, k, tokens));
  Var f = attend_last(b, m.layer, x, k, tokens);
  return log_softmax_rows(matmul(f, transpose(b.bind(m.head))));
}

}  // namespace

GraphModel init_graph_model(const GraphConfig& cfg, const Graph& g, const TransitionMatrix& p_star) {
  if (cfg.d == 0) throw ConfigError("d", "embedding width must be positive");
  const std::size_t k = g.k, d = cfg.d;
  GraphModel m;
  Rng erng(cfg.seed, "graph-embeddings");
  m.embeddings = erng.normal_matrix(k, d);
  for (std::size_t i = 0; i < k; ++i) {
    const double n = vector_norm(m.embeddings.row(i));
    for (double& v : m.embeddings.row(i)) v /= n;
  }
  Rng arng(cfg.seed, "graph-attention");
  m.layer = AttentionLayer::random(d, arng);
  Rng hrng(cfg.seed, "graph-head");
  m.head = hrng.normal_matrix(k, d, 1.0 / std::sqrt(double(d)));

  if (cfg.temperatures.active()) {
    const NeighborGroups groups = neighbor_groups(g);
    const std::vector<double> freq =
        cfg.temperatures.kind == "feature" ? token_frequency(p_star, cfg.seed) : std::vector<double>{};
    Rng trng(cfg.seed, "graph-temperature");
    if (cfg.temperatures.query) m.layer.temp_q = make_spec(cfg.temperatures.kind, Stream::Query, d, groups, freq, trng);
    if (cfg.temperatures.key) m.layer.temp_k = make_spec(cfg.temperatures.kind, Stream::Key, d, groups, freq, trng);
    if (cfg.temperatures.value) m.layer.temp_v = make_spec(cfg.temperatures.kind, Stream::Value, d, groups, freq, trng);
  }
  return m;
}

std::vector<ParamSlot> graph_parameters(GraphModel& m, const GraphConfig& cfg) {
  std::vector<ParamSlot> out;
  if (cfg.embeddings == EmbeddingMode::Trainable) out.push_back({"embeddings", &m.embeddings});
  auto layer = parameters(m.layer);
  // The direct head never reads V, so W_v and value temperatures receive no gradient there.
  out.insert(out.end(), layer.begin(), layer.end());
  if (cfg.head == GraphHead::Linear) out.push_back({"head", &m.head});
  return out;
}

Var graph_loss(ParamBinder& b, const GraphModel& m, const GraphBatch& batch, GraphHead head) {
  const std::size_t k = m.embeddings.rows();
  const std::vector<std::size_t> tokens = flatten(batch.sequences);
  // Fixed embeddings are bound too; callers simply ignore their gradient.
  Var lp = graph_log_probs(b, m, tokens, k, head, true);
  if (head == GraphHead::Linear) return nll_rows(lp, batch.labels);
  std::vector<std::size_t> positions(batch.labels.size());
  for (std::size_t s = 0; s < positions.size(); ++s) {
    const auto& seq = batch.sequences[s];
    positions[s] = static_cast<std::size_t>(std::find(seq.begin(), seq.end(), batch.labels[s]) - seq.begin());
    if (positions[s] == seq.size()) throw LookupError("label token missing from its sequence");
  }
  return nll_rows(lp, positions);
}

Matrix minmax_normalize(const Matrix& m) {
  if (m.empty()) return m;
  const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
  Matrix out(m.rows(), m.cols());
  if (*hi == *lo) return out;
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = (m.data()[i] - *lo) / (*hi - *lo);
  return out;
}

GraphEvaluation evaluate_graph(const GraphModel& m, const GraphConfig& cfg, const Graph& g,
                               const TransitionMatrix& p_star) {
  const std::size_t k = g.k;
  const std::size_t R = std::max<std::size_t>(1, cfg.eval_permutations);
  Rng rng(cfg.seed, "graph-eval");
  std::vector<std::vector<std::size_t>> seqs;
  for (std::size_t q = 0; q < k; ++q) {
    for (std::size_t r = 0; r < R; ++r) {
      std::vector<std::size_t> others;
      for (std::size_t t = 0; t < k; ++t)
        if (t != q) others.push_back(t);
      const auto perm = rng.permutation(others.size());
      std::vector<std::size_t> seq;
      for (std::size_t i : perm) seq.push_back(others[i]);
      seq.push_back(q);
      seqs.push_back(std::move(seq));
    }
  }
  const std::vector<std::size_t> tokens = flatten(seqs);

  Tape tape;
  ParamBinder b(tape);
  Var x = embed(b, m, tokens, false);
  const Matrix probs = softmax_rows(last_query_logits(b, m.layer, x, k, tokens)).value();
  const Matrix lp = graph_log_probs(b, m, tokens, k, cfg.head, false).value();
  const Matrix tq = temperature_column(b, m.layer.temp_q, x, tokens, m.layer, k).value();

  GraphEvaluation ev;
  ev.p_hat = Matrix(k, k);
  ev.prediction = Matrix(k, k);
  double ce = 0.0;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const std::size_t q = seqs[s].back();
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t tok = seqs[s][i];
      ev.p_hat(q, tok) += probs(s, i) / double(R);
      const std::size_t col = cfg.head == GraphHead::Direct ? i : tok;
      ev.prediction(q, tok) += std::exp(lp(s, col)) / double(R);
      ce -= p_star.p(q, tok) * lp(s, col);
    }
  }
  ev.cross_entropy = ce / double(seqs.size());
  ev.target_entropy = 0.0;
  for (std::size_t q = 0; q < k; ++q) ev.target_entropy += entropy(p_star.p.row(q)) / double(k);
  ev.err_map = err_map(ev.p_hat, p_star.p);
  ev.operator_norm = operator_norm(matmul(m.layer.w_q, transpose(m.layer.w_k)));
  ev.mean_spikiness = mean_spikiness(ev.p_hat);

  const NeighborGroups groups = neighbor_groups(g);
  ev.group_tau.assign(groups.count(), 0.0);
  std::vector<double> count(groups.count(), 0.0);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const std::size_t gid = groups.group_of_node[seqs[s].back()];
    ev.group_tau[gid] += tq((s + 1) * k - 1, 0);
    count[gid] += 1.0;
  }
  for (std::size_t i = 0; i < groups.count(); ++i) ev.group_tau[i] /= count[i];
  return ev;
}

void GraphConfig::validate() const {
  adam.validate();
  if (d == 0) throw ConfigError("d", "embedding width must be positive");
  if (batch == 0) throw ConfigError("batch", "batch must be at least 1");
  if (!(temperature_lr >= 0.0)) throw ConfigError("temperature_lr", "temperature learning rate must be non-negative");
}

GraphRun train_graph(const GraphConfig& cfg) {
  cfg.validate();
  const Graph g = reference_graph();
  const TransitionMatrix p_star = transition_matrix(g);
  GraphRun run;
  run.config = cfg;
  run.p_star = p_star.p;
  run.group_sizes = neighbor_groups(g).size_of_group;
  run.model = init_graph_model(cfg, g, p_star);

  std::vector<ParamSlot> slots = graph_parameters(run.model, cfg);
  // Temperatures get their own optimizer so they can use a separate learning rate.
  std::vector<ParamSlot> weights, temps;
  for (auto& s : slots) (s.name.rfind("temp_", 0) == 0 ? temps : weights).push_back(s);
  auto pointers = [](const std::vector<ParamSlot>& v) {
    std::vector<Matrix*> out;
    for (const auto& s : v) out.push_back(s.value);
    return out;
  };
  AdamConfig temp_cfg = cfg.adam;
  if (cfg.temperature_lr > 0.0) temp_cfg.lr = cfg.temperature_lr;
  Adam opt(cfg.adam, pointers(weights));
  Adam temp_opt(temp_cfg, pointers(temps));
  Rng data(cfg.seed, "graph-train");
  const std::size_t every = std::max<std::size_t>(1, cfg.log_every);

  try {
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
      const GraphBatch batch = sample_graph_batch(p_star, cfg.batch, data);
      Tape tape;
      ParamBinder b(tape);
      Var loss = graph_loss(b, run.model, batch, cfg.head);
      tape.backward(loss);
      std::vector<Matrix> grads, temp_grads;
      for (auto& s : weights) grads.push_back(b.grad(*s.value));
      for (auto& s : temps) temp_grads.push_back(b.grad(*s.value));
      opt.step(grads);
      temp_opt.step(temp_grads);
      if (step % every == 0 || step == cfg.steps) run.curve.push_back({step, "train_loss", loss.value().item()});
    }
  } catch (const NonFiniteError& e) {
    run.diverged = true;
    run.divergence = e.what();
  }
  run.eval = evaluate_graph(run.model, cfg, g, p_star);
  return run;
}

// ---- Denoising -----------------------------------------------------------------------

namespace {

Matrix stack_inputs(const std::vector<DenoisingSample>& batch, std::size_t begin, std::size_t end) {
  const std::size_t L = batch.front().x.rows(), d = batch.front().x.cols();
  Matrix x((end - begin) * L, d);
  for (std::size_t s = begin; s < end; ++s)
    std::copy(batch[s].x.data().begin(), batch[s].x.data().end(), x.data().begin() + (s - begin) * L * d);
  return x;
}

Matrix stack_targets(const std::vector<DenoisingSample>& batch, std::size_t begin, std::size_t end) {
  const std::size_t d = batch.front().y.size();
  Matrix y(end - begin, d);
  for (std::size_t s = begin; s < end; ++s) std::copy(batch[s].y.begin(), batch[s].y.end(), y.row(s - begin).begin());
  return y;
}

template <class Estimator>
double mean_risk(const std::vector<DenoisingSample>& batch, Estimator est) {
  double acc = 0.0;
  for (const auto& s : batch) acc += mse_normalized(s.y, est(s));
  return acc / double(batch.size());
}

}  // namespace

Var denoise_loss(ParamBinder& b, const AttentionLayer& layer, const std::vector<DenoisingSample>& batch) {
  if (batch.empty()) throw DomainError("denoise_loss of an empty batch");
  const std::size_t L = batch.front().x.rows();
  Var x = b.constant(stack_inputs(batch, 0, batch.size()));
  return mse_normalized_rows(attend_last(b, layer, x, L), stack_targets(batch, 0, batch.size()));
}

double denoise_risk(const AttentionLayer& layer, const std::vector<DenoisingSample>& batch) {
  const std::size_t chunk = 512;
  double acc = 0.0;
  for (std::size_t begin = 0; begin < batch.size(); begin += chunk) {
    const std::size_t end = std::min(batch.size(), begin + chunk);
    Tape tape;
    ParamBinder b(tape);
    Var x = b.constant(stack_inputs(batch, begin, end));
    const Matrix y_hat = attend_last(b, layer, x, batch.front().x.rows()).value();
    for (std::size_t s = begin; s < end; ++s) acc += mse_normalized(batch[s].y, y_hat.row(s - begin));
  }
  return acc / double(batch.size());
}

DenoiseRun train_denoising(const DenoiseConfig& cfg) {
  cfg.adam.validate();
  if (cfg.batch == 0 || cfg.eval_batch == 0) throw ConfigError("batch", "batch sizes must be at least 1");
  DenoiseRun run;
  run.config = cfg;
  Rng eval_rng(cfg.seed, "denoise-eval");
  const auto eval = make_denoising_batch(cfg.k, cfg.L, cfg.sigma, cfg.alpha_frac, cfg.eval_batch, eval_rng);
  run.risk_naive = mean_risk(eval, [](const DenoisingSample& s) { return naive_average(s.x); });
  run.risk_bayes = mean_risk(eval, [](const DenoisingSample& s) { return bayes_optimal(s); });
  run.risk_mask_average = mean_risk(eval, [&](const DenoisingSample& s) {
    return masked_average(s.x, threshold_mask(s.x, cfg.gate_level));
  });

  const std::size_t every = std::max<std::size_t>(1, cfg.log_every);
  for (int variant = 0; variant < 2; ++variant) {
    const bool selective = variant == 1;
    const std::string tag = selective ? "value_selective" : "vanilla";
    Rng init(cfg.seed, "denoise-init");
    AttentionLayer layer = AttentionLayer::random(cfg.k, init);
    if (selective) layer.temp_v = make_threshold_gate(cfg.gate_level);
    std::vector<ParamSlot> slots = parameters(layer);
    std::vector<Matrix*> ptrs;
    for (auto& s : slots) ptrs.push_back(s.value);
    Adam opt(cfg.adam, ptrs);
    Rng data(cfg.seed, "denoise-train");
    try {
      for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const auto batch = make_denoising_batch(cfg.k, cfg.L, cfg.sigma, cfg.alpha_frac, cfg.batch, data);
        Tape tape;
        ParamBinder b(tape);
        Var loss = denoise_loss(b, layer, batch);
        tape.backward(loss);
        std::vector<Matrix> grads;
        for (auto& s : slots) grads.push_back(b.grad(*s.value));
        opt.step(grads);
        if (step % every == 0 || step == cfg.steps) run.curve.push_back({step, tag + "_train_loss", loss.value().item()});
      }
    } catch (const NonFiniteError& e) {
      run.diverged = true;
      run.divergence = tag + ": " + e.what();
    } catch (const DomainError& e) {
      run.diverged = true;
      run.divergence = tag + ": " + e.what();
    }
    const double risk = denoise_risk(layer, eval);
    (selective ? run.risk_value_selective : run.risk_vanilla) = risk;
  }
  return run;
}

// ---- Imbalanced mixture ---------------------------------------------------------------

Var imbalanced_risk_var(Var w, Var temps, const ImbalancedInstance& inst) {
  Tape& t = *w.tape();
  const std::size_t L = inst.length();
  Var x = t.constant(inst.sequence());
  // Row n, column i holds x_i^T W x_n.
  Var logits = matmul(matmul(x, transpose(w)), transpose(x));
  Var p = causal_softmax(row_scale(logits, temps));
  Matrix y(L, inst.dim());
  const auto target = inst.target();
  for (std::size_t n = 0; n < L; ++n) std::copy(target.begin(), target.end(), y.row(n).begin());
  std::vector<std::size_t> rows;
  for (std::size_t n = inst.n0; n <= L; ++n) rows.push_back(n - 1);
  Var err = gather_rows(sub(matmul(p, x), t.constant(std::move(y))), rows);
  return scale(sum(square(err)), 1.0 / double(L));
}

ImbalancedRun train_imbalanced(const ImbalancedConfig& cfg) {
  cfg.adam.validate();
  ImbalancedRun run;
  run.config = cfg;
  run.instance = make_imbalanced_instance(cfg.L, cfg.pattern, cfg.alpha, cfg.seed, cfg.d);
  const ImbalancedInstance& inst = run.instance;
  const std::size_t L = inst.length(), d = inst.dim();

  const Matrix w_star = construct_optimal_w(inst.a, inst.b);
  run.analytic_risk = imbalanced_risk(w_star, inst, optimal_position_temperatures(inst));
  run.floor = check_quadrant_conditions(inst).ok ? flat_temperature_floor(inst)
                                                 : std::numeric_limits<double>::quiet_NaN();

  Rng init(cfg.seed, "imbalanced-init");
  const Matrix w0 = init.normal_matrix(d, d, 1.0 / std::sqrt(double(d)));
  const std::size_t every = std::max<std::size_t>(1, cfg.log_every);

  // Flat temperature: W only.
  {
    Matrix w = w0;
    Adam opt(cfg.adam, {&w});
    run.min_flat_risk = std::numeric_limits<double>::infinity();
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
      Tape tape;
      Var wv = tape.leaf(w);
      Var loss = imbalanced_risk_var(wv, tape.constant(Matrix(L, 1, 1.0)), inst);
      run.min_flat_risk = std::min(run.min_flat_risk, loss.value().item());
      tape.backward(loss);
      opt.step({wv.grad()});
      if (step % every == 0 || step == cfg.steps) run.curve.push_back({step, "flat_risk", loss.value().item()});
    }
    run.flat_risk = imbalanced_risk(w, inst, std::vector<double>(L, 1.0));
    run.min_flat_risk = std::min(run.min_flat_risk, run.flat_risk);
  }
  // One free inverse temperature per position, trained jointly with W.
  {
    Matrix w = w0;
    Matrix tau(L, 1, 1.0);
    Adam opt(cfg.adam, {&w, &tau});
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
      Tape tape;
      Var wv = tape.leaf(w);
      Var tv = tape.leaf(tau);
      Var loss = imbalanced_risk_var(wv, tv, inst);
      tape.backward(loss);
      opt.step({wv.grad(), tv.grad()});
      if (step % every == 0 || step == cfg.steps) run.curve.push_back({step, "position_risk", loss.value().item()});
    }
    run.position_risk = imbalanced_risk(w, inst, tau.data());
  }
  return run;
}

// ---- Norm / spikiness ---------------------------------------------------------------

NormStudyRow norm_row(std::uint64_t seed, const GraphRun& vanilla, const GraphRun& ssa) {
  return {seed, vanilla.eval.operator_norm, ssa.eval.operator_norm, vanilla.eval.mean_spikiness,
          ssa.eval.mean_spikiness};
}

std::vector<NormStudyRow> norm_spikiness_study(const GraphConfig& ssa_cfg, std::span<const std::uint64_t> seeds) {
  std::vector<NormStudyRow> rows;
  for (std::uint64_t seed : seeds) {
    GraphConfig s = ssa_cfg;
    s.seed = seed;
    GraphConfig v = s;
    v.temperatures = TemperaturePlan{};
    rows.push_back(norm_row(seed, train_graph(v), train_graph(s)));
  }
  return rows;
}

}  // namespace ssa

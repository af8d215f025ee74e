#include "lab.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "ssa/errors.hpp"
#include "ssa/gradsuite.hpp"
#include "ssa/metrics.hpp"
#include "ssa/theory.hpp"
#include "ssa/training.hpp"

namespace lab {

namespace {

using ssa::ConfigError;

std::map<std::string, json> adam_defaults(const ssa::AdamConfig& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"adam_eps", a.eps}, {"weight_decay", a.weight_decay}};
}

std::map<std::string, json> graph_defaults() {
  const ssa::GraphConfig g;
  auto m = adam_defaults(g.adam);
  m.insert({{"d", g.d},
            {"steps", g.steps},
            {"batch", g.batch},
            {"log_every", g.log_every},
            {"eval_permutations", g.eval_permutations},
            {"temperature_lr", g.temperature_lr},
            {"head", "direct"},
            {"embeddings", "fixed"},
            {"temperature.placement", "Q"},
            {"temperature.kind", "group"}});
  return m;
}

std::map<std::string, json> defaults_for(const std::string& experiment) {
  std::map<std::string, json> m;
  if (experiment == "graph" || experiment == "ablate") {
    m = graph_defaults();
  } else if (experiment == "norm-study") {
    m = graph_defaults();
    m["seeds"] = 5;
  } else if (experiment == "denoise") {
    const ssa::DenoiseConfig d;
    m = adam_defaults(d.adam);
    m.insert({{"k", d.k},
              {"L", d.L},
              {"sigma", d.sigma},
              {"alpha_frac", d.alpha_frac},
              {"steps", d.steps},
              {"batch", d.batch},
              {"eval_batch", d.eval_batch},
              {"log_every", d.log_every},
              {"gate_level", d.gate_level}});
  } else if (experiment == "imbalanced") {
    const ssa::ImbalancedConfig c;
    m = adam_defaults(c.adam);
    m.insert({{"L", c.L}, {"d", c.d}, {"pattern", c.pattern}, {"alpha", c.alpha}, {"steps", c.steps},
              {"log_every", c.log_every}});
  } else if (experiment == "sparsity-check") {
    m = {{"count", 20}, {"tolerance", 1e-10}};
  } else if (experiment == "gradcheck") {
    m = {{"trials", 50}, {"tol", 1e-4}};
  }
  m["seed"] = 0;
  return m;
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out.emplace_back(prefix, j);
  }
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

ssa::AdamConfig adam_config(const Settings& s) {
  ssa::AdamConfig a;
  a.lr = s.number("lr");
  a.beta1 = s.number("beta1");
  a.beta2 = s.number("beta2");
  a.eps = s.number("adam_eps");
  a.weight_decay = s.number("weight_decay");
  a.validate();
  return a;
}

ssa::GraphConfig graph_config(const Settings& s, std::uint64_t seed) {
  ssa::GraphConfig c;
  c.d = s.size_value("d");
  c.steps = s.size_value("steps");
  c.batch = s.size_value("batch");
  c.log_every = s.size_value("log_every");
  c.eval_permutations = s.size_value("eval_permutations");
  c.temperature_lr = s.number("temperature_lr");
  c.adam = adam_config(s);
  const std::string head = s.text("head");
  if (head == "direct") c.head = ssa::GraphHead::Direct;
  else if (head == "linear") c.head = ssa::GraphHead::Linear;
  else throw ConfigError("head", "head must be 'direct' or 'linear'");
  const std::string emb = s.text("embeddings");
  if (emb == "fixed") c.embeddings = ssa::EmbeddingMode::Fixed;
  else if (emb == "trainable") c.embeddings = ssa::EmbeddingMode::Trainable;
  else throw ConfigError("embeddings", "embeddings must be 'fixed' or 'trainable'");
  c.temperatures = ssa::TemperaturePlan::parse(s.text("temperature.placement"), s.text("temperature.kind"));
  c.seed = seed;
  c.validate();
  return c;
}

json matrix_json(const ssa::Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return rows;
}

std::string matrix_csv(const ssa::Matrix& m) {
  std::vector<std::string> header;
  for (std::size_t j = 0; j < m.cols(); ++j) header.push_back("to_" + std::to_string(j));
  std::string out = csv_record(header);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::vector<std::string> row;
    for (double v : m.row(i)) row.push_back(csv_number(v));
    out += csv_record(row);
  }
  return out;
}

std::string metric_row(std::size_t step, const std::string& metric, double value) {
  return csv_record({std::to_string(step), metric, csv_number(value)});
}

bool strictly_decreasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] < v[i - 1])) return false;
  return true;
}

json graph_variant_json(const ssa::GraphRun& r) {
  const auto& e = r.eval;
  json j = {{"placement", r.config.temperatures.placement()},
            {"kind", r.config.temperatures.active() ? r.config.temperatures.kind : "none"},
            {"cross_entropy", e.cross_entropy},
            {"excess_cross_entropy", e.cross_entropy - e.target_entropy},
            {"err_map", e.err_map},
            {"operator_norm", e.operator_norm},
            {"mean_spikiness", e.mean_spikiness},
            {"final_train_loss", r.curve.empty() ? json(nullptr) : json(r.curve.back().value)},
            {"diverged", r.diverged},
            {"divergence", r.divergence}};
  // Raw values multiply the query; the reciprocal is the temperature in the usual sense.
  std::vector<double> recip;
  for (double t : e.group_tau) recip.push_back(t > 0.0 ? 1.0 / t : std::nan(""));
  j["group_inverse_temperature"] = e.group_tau;
  j["group_temperature"] = recip;
  j["group_inverse_temperature_strictly_decreasing"] = strictly_decreasing(e.group_tau) &&
                                                        std::all_of(e.group_tau.begin(), e.group_tau.end(),
                                                                    [](double t) { return t > 0.0; });
  return j;
}

void add_curve(Outcome& o, const std::string& prefix, const std::vector<ssa::CurvePoint>& curve) {
  for (const auto& p : curve) o.csv_rows.push_back(metric_row(p.step, prefix + p.metric, p.value));
}

void add_final(Outcome& o, std::size_t step, const std::string& prefix, const json& obj) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (it.value().is_number()) o.csv_rows.push_back(metric_row(step, prefix + it.key(), it.value().get<double>()));
  }
}

void record_assertion(Outcome& o, const std::string& name, bool passed, json detail = nullptr) {
  o.report["assertions"].push_back({{"name", name}, {"passed", passed}, {"detail", std::move(detail)}});
  o.assertions_passed = o.assertions_passed && passed;
}

// ---- Experiments -----------------------------------------------------------------------

Outcome run_graph(const Settings& s, std::uint64_t seed) {
  const ssa::GraphConfig ssa_cfg = graph_config(s, seed);
  ssa::GraphConfig van_cfg = ssa_cfg;
  van_cfg.temperatures = ssa::TemperaturePlan{};
  const ssa::GraphRun van = ssa::train_graph(van_cfg);
  const ssa::GraphRun sel = ssa::train_graph(ssa_cfg);

  Outcome o;
  json vj = graph_variant_json(van), sj = graph_variant_json(sel);
  o.report["results"] = {{"vanilla", vj},
                         {"ssa", sj},
                         {"group_sizes", sel.group_sizes},
                         {"target_entropy", sel.eval.target_entropy},
                         {"err_map_ratio", sel.eval.err_map / van.eval.err_map},
                         {"ssa_lower_cross_entropy", sel.eval.cross_entropy < van.eval.cross_entropy},
                         {"ssa_lower_err_map", sel.eval.err_map < van.eval.err_map},
                         {"p_star", matrix_json(sel.p_star)},
                         {"p_hat_vanilla", matrix_json(van.eval.p_hat)},
                         {"p_hat_ssa", matrix_json(sel.eval.p_hat)}};
  add_curve(o, "vanilla/", van.curve);
  add_curve(o, "ssa/", sel.curve);
  add_final(o, ssa_cfg.steps, "vanilla/", vj);
  add_final(o, ssa_cfg.steps, "ssa/", sj);
  o.extra_files["pstar.csv"] = matrix_csv(sel.p_star);
  o.extra_files["phat.csv"] = matrix_csv(sel.eval.p_hat);
  o.extra_files["phat_vanilla.csv"] = matrix_csv(van.eval.p_hat);
  o.extra_files["phat_normalized.csv"] = matrix_csv(ssa::minmax_normalize(sel.eval.p_hat));
  o.extra_files["phat_vanilla_normalized.csv"] = matrix_csv(ssa::minmax_normalize(van.eval.p_hat));
  if (van.diverged) o.divergence = "vanilla: " + van.divergence;
  if (sel.diverged) o.divergence = "ssa: " + sel.divergence;

  std::ostringstream os;
  os << "graph next-token, seed " << seed << ", " << ssa_cfg.steps << " steps, temperatures "
     << ssa_cfg.temperatures.placement() << "/" << ssa_cfg.temperatures.kind << "\n";
  os << "  variant   cross-entropy  err_map  ||W_q W_k^T||  spikiness\n";
  for (const auto* r : {&van, &sel}) {
    os << "  " << std::left << std::setw(9) << (r == &van ? "vanilla" : "ssa") << std::right << " " << fixed(r->eval.cross_entropy)
       << "         " << fixed(r->eval.err_map, 3) << "    " << std::setw(8) << fixed(r->eval.operator_norm, 3) << "       "
       << fixed(r->eval.mean_spikiness) << "\n";
  }
  os << "  group inverse temperatures (neighbourhood sizes";
  for (auto g : sel.group_sizes) os << " " << g;
  os << "):";
  for (double t : sel.eval.group_tau) os << " " << fixed(t, 3);
  os << "\n";
  o.summary = os.str();
  return o;
}

Outcome run_norm_study(const Settings& s, std::uint64_t seed) {
  const ssa::GraphConfig cfg = graph_config(s, seed);
  const std::size_t count = s.size_value("seeds");
  if (count == 0) throw ConfigError("seeds", "at least one seed is required");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < count; ++i) seeds.push_back(seed + i);
  const auto rows = ssa::norm_spikiness_study(cfg, seeds);

  Outcome o;
  json arr = json::array();
  std::ostringstream os;
  os << "norm / spikiness study over " << count << " seeds\n  seed  norm(vanilla)  norm(ssa)  spik(vanilla)  spik(ssa)\n";
  std::size_t norm_wins = 0, spik_wins = 0;
  for (const auto& r : rows) {
    arr.push_back({{"seed", r.seed},
                   {"vanilla_operator_norm", r.vanilla_norm},
                   {"ssa_operator_norm", r.ssa_norm},
                   {"vanilla_mean_spikiness", r.vanilla_spikiness},
                   {"ssa_mean_spikiness", r.ssa_spikiness}});
    norm_wins += r.ssa_norm < r.vanilla_norm;
    spik_wins += r.ssa_spikiness < r.vanilla_spikiness;
    o.csv_rows.push_back(metric_row(r.seed, "vanilla/operator_norm", r.vanilla_norm));
    o.csv_rows.push_back(metric_row(r.seed, "ssa/operator_norm", r.ssa_norm));
    o.csv_rows.push_back(metric_row(r.seed, "vanilla/mean_spikiness", r.vanilla_spikiness));
    o.csv_rows.push_back(metric_row(r.seed, "ssa/mean_spikiness", r.ssa_spikiness));
    os << "  " << std::setw(4) << r.seed << "  " << std::setw(13) << fixed(r.vanilla_norm, 3) << "  " << std::setw(9)
       << fixed(r.ssa_norm, 3) << "  " << std::setw(13) << fixed(r.vanilla_spikiness) << "  " << fixed(r.ssa_spikiness)
       << "\n";
  }
  o.report["results"] = {{"rows", arr}, {"ssa_smaller_norm_seeds", norm_wins}, {"ssa_smaller_spikiness_seeds", spik_wins}};
  o.summary = os.str();
  return o;
}

std::size_t thread_cap() {
  const char* env = std::getenv("SSA_LAB_THREADS");
  if (env == nullptr || *env == '\0') return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("SSA_LAB_THREADS", "SSA_LAB_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

Outcome run_ablate(const Settings& s, std::uint64_t seed) {
  const ssa::GraphConfig base = graph_config(s, seed);
  struct Cell {
    std::string placement, kind;
    ssa::GraphRun run;
  };
  std::vector<Cell> cells;
  cells.push_back({"none", "none", {}});
  for (const auto& p : ssa::temperature_placements()) {
    if (p == "none") continue;
    for (const auto& k : ssa::temperature_kinds()) cells.push_back({p, k, {}});
  }

  const std::size_t threads = std::min(thread_cap(), cells.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  auto worker = [&](std::size_t w) {
    try {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        ssa::GraphConfig c = base;
        c.temperatures = cells[i].placement == "none" ? ssa::TemperaturePlan{}
                                                      : ssa::TemperaturePlan::parse(cells[i].placement, cells[i].kind);
        cells[i].run = ssa::train_graph(c);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < threads; ++w) pool.emplace_back(worker, w);
  worker(0);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  ssa::GraphConfig van_cfg = base;
  van_cfg.temperatures = ssa::TemperaturePlan{};
  const ssa::GraphRun vanilla = ssa::train_graph(van_cfg);

  Outcome o;
  const auto& none = cells.front().run.eval;
  std::string table = csv_record({"placement", "kind", "cross_entropy", "excess_cross_entropy", "err_map",
                                  "operator_norm", "mean_spikiness"});
  json arr = json::array();
  const Cell* q_cell = nullptr;
  for (const auto& c : cells) {
    const auto& e = c.run.eval;
    table += csv_record({c.placement, c.kind, csv_number(e.cross_entropy), csv_number(e.cross_entropy - e.target_entropy),
                         csv_number(e.err_map), csv_number(e.operator_norm), csv_number(e.mean_spikiness)});
    arr.push_back({{"placement", c.placement},
                   {"kind", c.kind},
                   {"cross_entropy", e.cross_entropy},
                   {"err_map", e.err_map},
                   {"operator_norm", e.operator_norm},
                   {"mean_spikiness", e.mean_spikiness},
                   {"diverged", c.run.diverged}});
    o.csv_rows.push_back(metric_row(base.steps, c.placement + "/" + c.kind + "/cross_entropy", e.cross_entropy));
    if (c.placement == "Q" && c.kind == base.temperatures.kind) q_cell = &c;
    if (c.run.diverged && o.divergence.empty()) o.divergence = c.placement + "/" + c.kind + ": " + c.run.divergence;
  }
  const bool none_matches = none.cross_entropy == vanilla.eval.cross_entropy && none.err_map == vanilla.eval.err_map &&
                            none.p_hat == vanilla.eval.p_hat;
  o.report["results"] = {{"cells", arr}, {"none_matches_vanilla", none_matches}};
  o.runtime["threads"] = threads;
  o.extra_files["ablate.csv"] = table;
  record_assertion(o, "none cell equals the vanilla run", none_matches);
  if (q_cell != nullptr) {
    record_assertion(o, "Q-only " + q_cell->kind + " cross-entropy below baseline",
                     q_cell->run.eval.cross_entropy < none.cross_entropy,
                     {{"q_only", q_cell->run.eval.cross_entropy}, {"baseline", none.cross_entropy}});
  }

  std::ostringstream os;
  os << "ablation over " << cells.size() << " cells (" << threads << " threads), cross-entropy:\n  placement";
  for (const auto& k : ssa::temperature_kinds()) os << " " << std::setw(13) << k;
  os << "\n  none      " << fixed(none.cross_entropy) << " (baseline)\n";
  for (const auto& p : ssa::temperature_placements()) {
    if (p == "none") continue;
    os << "  " << std::left << std::setw(9) << p << std::right;
    for (const auto& c : cells)
      if (c.placement == p) os << " " << std::setw(13) << fixed(c.run.eval.cross_entropy);
    os << "\n";
  }
  o.summary = os.str();
  return o;
}

Outcome run_denoise(const Settings& s, std::uint64_t seed) {
  ssa::DenoiseConfig c;
  c.k = s.size_value("k");
  c.L = s.size_value("L");
  c.sigma = s.number("sigma");
  c.alpha_frac = s.number("alpha_frac");
  c.steps = s.size_value("steps");
  c.batch = s.size_value("batch");
  c.eval_batch = s.size_value("eval_batch");
  c.log_every = s.size_value("log_every");
  c.gate_level = s.number("gate_level");
  c.adam = adam_config(s);
  c.seed = seed;
  if (c.k == 0) throw ConfigError("k", "k must be positive");
  if (c.L == 0) throw ConfigError("L", "L must be positive");
  if (!(c.sigma >= 0.0)) throw ConfigError("sigma", "sigma must be non-negative");
  if (!(c.alpha_frac > 0.0 && c.alpha_frac < 1.0)) throw ConfigError("alpha_frac", "alpha_frac must lie in (0, 1)");
  const ssa::DenoiseRun r = ssa::train_denoising(c);

  Outcome o;
  json res = {{"naive", r.risk_naive},
              {"bayes", r.risk_bayes},
              {"vanilla", r.risk_vanilla},
              {"value_selective", r.risk_value_selective},
              {"threshold_average", r.risk_mask_average}};
  o.report["results"] = {{"risk", res},
                         {"ordering_holds", r.risk_bayes <= r.risk_value_selective &&
                                                r.risk_value_selective < r.risk_vanilla && r.risk_bayes < r.risk_naive},
                         {"diverged", r.diverged},
                         {"divergence", r.divergence}};
  add_curve(o, "", r.curve);
  add_final(o, c.steps, "risk/", res);
  if (r.diverged) o.divergence = r.divergence;
  std::ostringstream os;
  os << "denoising, K = d = " << c.k << ", L = " << c.L << ", sigma = " << c.sigma << ", seed " << seed << "\n"
     << "  naive " << fixed(r.risk_naive) << "  bayes " << fixed(r.risk_bayes) << "  vanilla " << fixed(r.risk_vanilla)
     << "  value-selective " << fixed(r.risk_value_selective) << "  threshold-average " << fixed(r.risk_mask_average)
     << "\n";
  o.summary = os.str();
  return o;
}

Outcome run_imbalanced(const Settings& s, std::uint64_t seed) {
  ssa::ImbalancedConfig c;
  c.L = s.size_value("L");
  c.d = s.size_value("d");
  c.pattern = s.text("pattern");
  c.alpha = s.number("alpha");
  c.steps = s.size_value("steps");
  c.log_every = s.size_value("log_every");
  c.adam = adam_config(s);
  c.seed = seed;
  if (c.L == 0 || c.L % 8 != 0) throw ConfigError("L", "L must be a positive multiple of 8");
  if (c.d < 2) throw ConfigError("d", "d must be at least 2");
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ConfigError("alpha", "alpha must lie in (0, 1)");
  const ssa::ImbalancedRun r = ssa::train_imbalanced(c);
  const ssa::QuadrantCheck q = ssa::check_quadrant_conditions(r.instance);

  Outcome o;
  json res = {{"flat_risk", r.flat_risk},
              {"min_flat_risk", r.min_flat_risk},
              {"position_risk", r.position_risk},
              {"analytic_risk", r.analytic_risk},
              {"flat_floor", std::isfinite(r.floor) ? json(r.floor) : json(nullptr)}};
  o.report["results"] = {{"risk", res}, {"quadrant_conditions", q.ok}, {"quadrant_reason", q.reason}, {"n0", r.instance.n0}};
  add_curve(o, "", r.curve);
  add_final(o, c.steps, "final/", res);
  record_assertion(o, "analytic construction reaches risk <= 1e-10", r.analytic_risk <= 1e-10, r.analytic_risk);
  if (q.ok) {
    record_assertion(o, "flat floor at least 1/500", r.floor >= ssa::kFlatTemperatureFloor, r.floor);
    record_assertion(o, "trained flat risk never below the floor", r.min_flat_risk >= r.floor,
                     {{"min_flat_risk", r.min_flat_risk}, {"floor", r.floor}});
  }
  std::ostringstream os;
  os << "imbalanced mixture, L = " << c.L << ", pattern " << c.pattern << ", seed " << seed << "\n"
     << "  analytic " << sci(r.analytic_risk) << "  position-aware " << sci(r.position_risk) << "  flat "
     << fixed(r.flat_risk, 5) << " (min " << fixed(r.min_flat_risk, 5) << ")  floor "
     << (std::isfinite(r.floor) ? fixed(r.floor, 5) : std::string("n/a: ") + q.reason) << "\n";
  o.summary = os.str();
  return o;
}

double softmax_max(const std::vector<double>& scores, std::size_t count, double tau) {
  double mx = scores[0] * tau;
  for (std::size_t i = 0; i < count; ++i) mx = std::max(mx, scores[i] * tau);
  double z = 0.0;
  for (std::size_t i = 0; i < count; ++i) z += std::exp(scores[i] * tau - mx);
  return 1.0 / z;
}

Outcome run_sparsity_check(const Settings& s, std::uint64_t seed) {
  const std::size_t count = s.size_value("count");
  const double tol = s.number("tolerance");
  ssa::Rng rng(seed, "sparsity-check");
  Outcome o;
  json rows = json::array();
  std::string table = csv_record({"n", "pow", "gamma", "tau", "kappa", "linf_scaled", "linf_sparse", "abs_diff"});
  std::ostringstream os;
  os << "temperature scaling versus top-kappa sparsification (" << count << " draws)\n"
     << "       tau     kappa   linf scaled   linf sparse      |diff|\n";
  double worst = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    // n = base^a with base^b salient entries, so every count is an integer.
    const std::size_t base = 2 + rng.index(4), a = 3 + rng.index(3), b = 1 + rng.index(a - 1);
    const std::size_t n = static_cast<std::size_t>(std::llround(std::pow(double(base), double(a))));
    const std::size_t salient = static_cast<std::size_t>(std::llround(std::pow(double(base), double(b))));
    const double pow = 1.0 - double(b) / double(a);
    const double gamma = rng.uniform(0.5, 3.0);
    const std::size_t extra = 1 + rng.index(n - salient);
    const double kappa = double(salient + extra) / double(n);
    const double tau = ssa::temperature_for_sparsity(kappa, n, pow, gamma);
    const double scaled = ssa::top_entry_scaled(n, pow, gamma, tau);
    const double sparse = ssa::top_entry_sparse(n, pow, gamma, kappa);
    const auto scores = ssa::PowerLawScores{n, pow, gamma}.scores();
    const double brute_scaled = softmax_max(scores, n, tau);
    const double brute_sparse = softmax_max(scores, salient + extra, 1.0);
    const double diff = std::max({std::abs(scaled - sparse), std::abs(brute_scaled - scaled), std::abs(brute_sparse - sparse),
                                  std::abs(brute_scaled - brute_sparse)});
    worst = std::max(worst, diff);
    rows.push_back({{"n", n}, {"pow", pow}, {"gamma", gamma}, {"tau", tau}, {"kappa", kappa},
                    {"linf_scaled", scaled}, {"linf_sparse", sparse}, {"brute_scaled", brute_scaled},
                    {"brute_sparse", brute_sparse}, {"abs_diff", diff}});
    table += csv_record({std::to_string(n), csv_number(pow), csv_number(gamma), csv_number(tau), csv_number(kappa),
                         csv_number(scaled), csv_number(sparse), csv_number(diff)});
    o.csv_rows.push_back(metric_row(i, "abs_diff", diff));
    os << "  " << std::setw(8) << fixed(tau, 4) << "  " << fixed(kappa, 5) << "  " << std::setw(12) << sci(scaled) << "  "
       << std::setw(12) << sci(sparse) << "  " << std::setw(10) << sci(diff) << "\n";
  }
  o.report["results"] = {{"rows", rows}, {"worst_abs_diff", worst}};
  o.extra_files["sparsity.csv"] = table;
  record_assertion(o, "scaled and sparse maxima agree", worst < tol, worst);
  o.summary = os.str();
  return o;
}

Outcome run_gradcheck(const Settings& s, std::uint64_t seed) {
  const std::size_t trials = s.size_value("trials");
  const double tol = s.number("tol");
  if (trials == 0) throw ConfigError("trials", "at least one trial is required");
  if (!(tol > 0.0)) throw ConfigError("tol", "tolerance must be positive");
  const ssa::GradSuiteResult r = ssa::run_gradient_suite(trials, seed, tol);
  Outcome o;
  json cases = json::array();
  std::ostringstream os;
  os << "finite-difference gradient suite, " << trials << " trials per case\n";
  std::size_t i = 0;
  for (const auto& c : r.cases) {
    cases.push_back({{"name", c.name}, {"trials", c.trials}, {"worst_rel_error", c.worst_rel_error},
                     {"worst_param", c.worst_param}, {"passed", c.passed}});
    o.csv_rows.push_back(metric_row(i++, c.name + "/worst_rel_error", c.worst_rel_error));
    os << "  " << std::left << std::setw(28) << c.name << std::right << " " << sci(c.worst_rel_error)
       << (c.passed ? "" : "  FAIL") << "\n";
  }
  o.report["results"] = {{"cases", cases}, {"worst_rel_error", r.worst_rel_error}, {"tol", tol}};
  record_assertion(o, "analytic gradients match central differences", r.passed, r.worst_rel_error);
  o.summary = os.str();
  return o;
}

void write_file(const std::filesystem::path& p, const std::string& contents) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << contents;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"graph",      "denoise",   "imbalanced", "sparsity-check",
                                                 "norm-study", "gradcheck", "ablate"};
  return names;
}

Settings::Settings(const std::string& experiment) : values_(defaults_for(experiment)) {}

void Settings::set(const std::string& key, json value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(key, "unknown setting '" + key + "'");
  if (value.is_object() || value.is_array() || value.is_null()) {
    throw ConfigError(key, "setting '" + key + "' needs a number or string");
  }
  it->second = std::move(value);
}

void Settings::apply_json(const json& config) {
  if (!config.is_object()) throw ConfigError("<config>", "config file must hold a JSON object");
  std::vector<std::pair<std::string, json>> flat;
  flatten(config, "", flat);
  for (auto& [k, v] : flat) set(k, v);
}

void Settings::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded() || value.is_null()) value = text;
  set(key, std::move(value));
}

const json& Settings::at(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(key, "unknown setting '" + key + "'");
  return it->second;
}

std::size_t Settings::size_value(const std::string& key) const {
  const json& v = at(key);
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::size_t>(v.get<long long>());
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d >= 0.0 && d == std::floor(d) && d < 1e15) return static_cast<std::size_t>(d);
  }
  throw ConfigError(key, "setting '" + key + "' must be a non-negative integer");
}

double Settings::number(const std::string& key) const {
  const json& v = at(key);
  if (!v.is_number()) throw ConfigError(key, "setting '" + key + "' must be a number");
  return v.get<double>();
}

std::string Settings::text(const std::string& key) const {
  const json& v = at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number() || v.is_boolean()) return v.dump();
  throw ConfigError(key, "setting '" + key + "' must be a string");
}

Outcome run_experiment(const std::string& experiment, const Settings& settings, std::uint64_t seed) {
  Outcome o;
  if (experiment == "graph") o = run_graph(settings, seed);
  else if (experiment == "denoise") o = run_denoise(settings, seed);
  else if (experiment == "imbalanced") o = run_imbalanced(settings, seed);
  else if (experiment == "sparsity-check") o = run_sparsity_check(settings, seed);
  else if (experiment == "norm-study") o = run_norm_study(settings, seed);
  else if (experiment == "gradcheck") o = run_gradcheck(settings, seed);
  else if (experiment == "ablate") o = run_ablate(settings, seed);
  else throw ConfigError("experiment", "unknown experiment '" + experiment + "'");

  json config = json::object();
  for (const auto& [k, v] : settings.values()) config[k] = v;
  config["seed"] = seed;
  o.report["experiment"] = experiment;
  o.report["seed"] = seed;
  o.report["config"] = config;
  if (!o.report.contains("assertions")) o.report["assertions"] = json::array();
  o.report["passed"] = o.assertions_passed && o.divergence.empty();
  return o;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_record(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i > 0) out += ',';
    out += csv_field(fields[i]);
  }
  return out + "\r\n";
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Selective self-attention experiment runner"};
  app.name("ssa-lab");
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "Run one experiment and write its artifacts");
  std::string experiment, config_path, out_dir;
  std::uint64_t seed = 0;
  std::vector<std::string> sets;
  run->add_option("experiment", experiment, "graph, denoise, imbalanced, sparsity-check, norm-study, gradcheck or ablate")
      ->required();
  run->add_option("--config", config_path, "JSON file with flat dotted keys");
  auto* seed_opt = run->add_option("--seed", seed, "Seed for every random stream");
  run->add_option("--out", out_dir, "Output directory (default runs/<experiment>-seed<N>)");
  run->add_option("--set", sets, "Override one setting, key=value (repeatable)");

  std::vector<std::string> argv_store = {"ssa-lab"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "ssa-lab: " << e.what() << "\n";
    return kUsage;
  }

  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), experiment) == names.end()) {
    err << "ssa-lab: unknown experiment '" << experiment << "'; valid experiments:";
    for (const auto& n : names) err << " " << n;
    err << "\n";
    return kUsage;
  }

  Outcome outcome;
  std::chrono::steady_clock::time_point t0;
  const std::string started = utc_now();
  try {
    Settings settings(experiment);
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw ConfigError("--config", "cannot read config file '" + config_path + "'");
      json config = json::parse(f, nullptr, false);
      if (config.is_discarded()) throw ConfigError("--config", "config file '" + config_path + "' is not valid JSON");
      settings.apply_json(config);
    }
    for (const auto& s : sets) settings.apply_override(s);
    if (seed_opt->count() == 0) seed = settings.size_value("seed");
    if (out_dir.empty()) out_dir = "runs/" + experiment + "-seed" + std::to_string(seed);
    t0 = std::chrono::steady_clock::now();
    outcome = run_experiment(experiment, settings, seed);
  } catch (const ConfigError& e) {
    err << "ssa-lab: bad setting '" << e.key() << "': " << e.what() << "\n";
    return kUsage;
  } catch (const ssa::TheoryViolation& e) {
    err << "ssa-lab: theory check failed: " << e.what() << "\n";
    return kTheoryFailed;
  } catch (const std::exception& e) {
    err << "ssa-lab: " << e.what() << "\n";
    return kUsage;
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  try {
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    write_file(dir / "report.json", outcome.report.dump(2) + "\n");
    std::string metrics = csv_record({"step", "metric", "value"});
    for (const auto& r : outcome.csv_rows) metrics += r;
    write_file(dir / "metrics.csv", metrics);
    for (const auto& [name, contents] : outcome.extra_files) write_file(dir / name, contents);
    // Wall-clock data lives apart from report.json so reports stay byte-identical across reruns.
    json timing = outcome.runtime;
    timing["started_utc"] = started;
    timing["wall_clock_seconds"] = seconds;
    write_file(dir / "timing.json", timing.dump(2) + "\n");
  } catch (const std::exception& e) {
    err << "ssa-lab: " << e.what() << "\n";
    return kUsage;
  }

  out << outcome.summary;
  for (const auto& a : outcome.report["assertions"]) {
    out << "  [" << (a["passed"].get<bool>() ? "ok" : "FAILED") << "] " << a["name"].get<std::string>() << "\n";
  }
  out << "  artifacts: " << out_dir << "\n";
  if (!outcome.divergence.empty()) {
    err << "ssa-lab: training diverged (" << outcome.divergence << "); report written with the state so far\n";
    return kUsage;
  }
  return outcome.assertions_passed ? kOk : kTheoryFailed;
}

}  // namespace lab

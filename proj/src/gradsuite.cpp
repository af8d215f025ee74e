#include "ssa/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "ssa/attention.hpp"
#include "ssa/rng.hpp"
#include "ssa/training.hpp"

namespace ssa {

namespace {

struct CaseSpec {
  std::string name;
  // Draws parameter values for one trial and returns the function to check.
  std::function<std::pair<ScalarFunction, std::vector<NamedParam>>(Rng&)> make;
};

Matrix positive(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.uniform(0.5, 2.0);
  return m;
}

// Reduces a matrix-valued op to a scalar with fixed random weights so every output entry matters.
ScalarFunction projected(std::function<Var(Tape&, const std::vector<Var>&)> op, Matrix weights) {
  return [op, weights](Tape& t, const std::vector<Var>& v) {
    Var out = op(t, v);
    return sum(hadamard(out, t.constant(weights)));
  };
}

CaseSpec unary_case(std::string name, std::function<Var(Var)> op, bool needs_positive = false) {
  return {name, [op, needs_positive](Rng& rng) {
            Matrix x = needs_positive ? positive(rng, 3, 4) : rng.normal_matrix(3, 4);
            return std::pair{projected([op](Tape&, const std::vector<Var>& v) { return op(v[0]); }, rng.normal_matrix(3, 4)),
                             std::vector<NamedParam>{{"x", x}}};
          }};
}

CaseSpec binary_case(std::string name, std::function<Var(Var, Var)> op, std::size_t ar, std::size_t ac,
                     std::size_t br, std::size_t bc, std::size_t orows, std::size_t ocols) {
  return {name, [=](Rng& rng) {
            return std::pair{projected([op](Tape&, const std::vector<Var>& v) { return op(v[0], v[1]); },
                                       rng.normal_matrix(orows, ocols)),
                             std::vector<NamedParam>{{"a", rng.normal_matrix(ar, ac)}, {"b", rng.normal_matrix(br, bc)}}};
          }};
}

// Full selective attention forward pass with the given temperature on every stream.
CaseSpec attention_case(std::string kind) {
  return {"attention/" + kind, [kind](Rng& rng) {
            const std::size_t d = 4, L = 5;
            AttentionLayer layer = AttentionLayer::random(d, rng);
            std::vector<std::size_t> tokens = {0, 2, 1, 3, 2};
            auto spec = [&](Stream s) -> TemperatureSpec {
              if (kind == "identity") return temp::Identity{};
              if (kind == "constant") return make_constant(rng.uniform(0.5, 2.0));
              if (kind == "position") return make_position_aware(rng.normal());
              if (kind == "token") {
                auto t = make_token_aware(d, rng);
                std::get<temp::TokenAware>(t).w_out = rng.normal_matrix(1, d);
                return t;
              }
              if (kind == "combined") {
                auto t = make_combined(d, rng, rng.normal());
                std::get<temp::Combined>(t).w_out = rng.normal_matrix(1, d);
                return t;
              }
              if (kind == "weight-shared") {
                auto t = make_weight_shared(d, s);
                std::get<temp::WeightShared>(t).w_out = rng.normal_matrix(1, d);
                return t;
              }
              if (kind == "feature") return make_feature_based({0.1, 0.4, 0.7, 1.0}, rng.uniform(0.5, 2.0));
              if (kind == "group") {
                auto t = make_group_table({0, 1, 1, 2}, 3);
                std::get<temp::GroupTable>(t).values = positive(rng, 1, 3);
                return t;
              }
              return make_threshold_gate(0.0);
            };
            layer.temp_q = spec(Stream::Query);
            layer.temp_k = spec(Stream::Key);
            layer.temp_v = spec(Stream::Value);
            const bool gate = kind == "threshold-gate";

            std::vector<NamedParam> params;
            for (auto& slot : parameters(layer)) params.push_back({slot.name, *slot.value});
            Matrix x = rng.normal_matrix(L, d);
            if (!gate) params.push_back({"x", x});
            Matrix weights = rng.normal_matrix(L, d);

            ScalarFunction f = [layer, x, tokens, weights, gate](Tape& t, const std::vector<Var>& v) {
              AttentionLayer copy = layer;
              ParamBinder b(t);
              auto slots = parameters(copy);
              for (std::size_t i = 0; i < slots.size(); ++i) {
                *slots[i].value = v[i].value();
                b.attach(*slots[i].value, v[i]);
              }
              Var xv = gate ? t.constant(x) : v.back();
              Var out = selective_attention(b, copy, xv, tokens);
              return sum(hadamard(out, t.constant(weights)));
            };
            return std::pair{f, params};
          }};
}

CaseSpec last_query_case(std::string kind) {
  return {"last-query/" + kind, [kind](Rng& rng) {
            const std::size_t d = 3, L = 4, B = 2;
            AttentionLayer layer = AttentionLayer::random(d, rng);
            std::vector<std::size_t> tokens = {0, 1, 2, 1, 2, 0, 1, 0};
            if (kind == "group") {
              auto t = make_group_table({0, 1, 1}, 2);
              std::get<temp::GroupTable>(t).values = positive(rng, 1, 2);
              layer.temp_q = t;
              layer.temp_k = t;
            } else if (kind == "position") {
              layer.temp_q = make_position_aware(rng.normal());
              layer.temp_k = make_position_aware(rng.normal());
              layer.temp_v = make_position_aware(rng.normal());
            }
            std::vector<NamedParam> params;
            for (auto& slot : parameters(layer)) params.push_back({slot.name, *slot.value});
            params.push_back({"x", rng.normal_matrix(B * L, d)});
            Matrix weights = rng.normal_matrix(B, d);
            ScalarFunction f = [layer, tokens, weights, L](Tape& t, const std::vector<Var>& v) {
              AttentionLayer copy = layer;
              ParamBinder b(t);
              auto slots = parameters(copy);
              for (std::size_t i = 0; i < slots.size(); ++i) {
                *slots[i].value = v[i].value();
                b.attach(*slots[i].value, v[i]);
              }
              return sum(hadamard(attend_last(b, copy, v.back(), L, tokens), t.constant(weights)));
            };
            return std::pair{f, params};
          }};
}

// Training losses at initialization, every parameter group included.
CaseSpec graph_loss_case(GraphHead head) {
  return {std::string("graph-loss/") + (head == GraphHead::Direct ? "direct" : "linear"), [head](Rng& rng) {
            GraphConfig cfg;
            cfg.d = 4;
            cfg.head = head;
            cfg.embeddings = EmbeddingMode::Trainable;
            cfg.temperatures = TemperaturePlan::parse("KQV", "group");
            cfg.seed = rng.next_u64();
            const Graph g = reference_graph();
            const TransitionMatrix p = transition_matrix(g);
            GraphModel model = init_graph_model(cfg, g, p);
            for (double& v : std::get<temp::GroupTable>(model.layer.temp_q).values.data()) v = rng.uniform(0.5, 2.0);
            const GraphBatch batch = sample_graph_batch(p, 3, rng);
            std::vector<NamedParam> params;
            for (auto& slot : graph_parameters(model, cfg)) params.push_back({slot.name, *slot.value});
            ScalarFunction f = [model, cfg, batch](Tape& t, const std::vector<Var>& v) {
              GraphModel copy = model;
              ParamBinder b(t);
              auto slots = graph_parameters(copy, cfg);
              for (std::size_t i = 0; i < slots.size(); ++i) {
                *slots[i].value = v[i].value();
                b.attach(*slots[i].value, v[i]);
              }
              return graph_loss(b, copy, batch, cfg.head);
            };
            return std::pair{f, params};
          }};
}

CaseSpec denoise_loss_case() {
  return {"denoise-loss", [](Rng& rng) {
            AttentionLayer layer = AttentionLayer::random(4, rng);
            layer.temp_v = make_threshold_gate(0.5);
            const auto batch = make_denoising_batch(4, 6, 0.1, 0.25, 3, rng);
            std::vector<NamedParam> params;
            for (auto& slot : parameters(layer)) params.push_back({slot.name, *slot.value});
            ScalarFunction f = [layer, batch](Tape& t, const std::vector<Var>& v) {
              AttentionLayer copy = layer;
              ParamBinder b(t);
              auto slots = parameters(copy);
              for (std::size_t i = 0; i < slots.size(); ++i) {
                *slots[i].value = v[i].value();
                b.attach(*slots[i].value, v[i]);
              }
              return denoise_loss(b, copy, batch);
            };
            return std::pair{f, params};
          }};
}

std::vector<CaseSpec> all_cases() {
  std::vector<CaseSpec> c;
  c.push_back(binary_case("matmul", [](Var a, Var b) { return matmul(a, b); }, 3, 4, 4, 2, 3, 2));
  c.push_back(unary_case("transpose", [](Var a) { return transpose(transpose(a)); }));
  c.push_back(binary_case("add", [](Var a, Var b) { return add(a, b); }, 3, 4, 3, 4, 3, 4));
  c.push_back(binary_case("sub", [](Var a, Var b) { return sub(a, b); }, 3, 4, 3, 4, 3, 4));
  c.push_back(binary_case("hadamard", [](Var a, Var b) { return hadamard(a, b); }, 3, 4, 3, 4, 3, 4));
  c.push_back(unary_case("scale", [](Var a) { return scale(a, -1.7); }));
  c.push_back(unary_case("add_constant", [](Var a) { return square(add_constant(a, 0.3)); }));
  c.push_back(binary_case("scalar_mul", [](Var a, Var s) { return scalar_mul(a, s); }, 3, 4, 1, 1, 3, 4));
  c.push_back({"scalar_div", [](Rng& rng) {
                 return std::pair{projected([](Tape&, const std::vector<Var>& v) { return scalar_div(v[0], v[1]); },
                                            rng.normal_matrix(3, 4)),
                                  std::vector<NamedParam>{{"a", rng.normal_matrix(3, 4)}, {"s", positive(rng, 1, 1)}}};
               }});
  c.push_back(binary_case("row_scale", [](Var a, Var s) { return row_scale(a, s); }, 3, 4, 3, 1, 3, 4));
  c.push_back(unary_case("causal_softmax", [](Var a) { return causal_softmax(a); }));
  c.push_back(unary_case("softmax_rows", [](Var a) { return softmax_rows(a); }));
  c.push_back(unary_case("log_softmax_rows", [](Var a) { return log_softmax_rows(a); }));
  c.push_back(unary_case("tanh", [](Var a) { return tanh(a); }));
  c.push_back(unary_case("sigmoid", [](Var a) { return sigmoid(a); }));
  c.push_back(unary_case("gelu", [](Var a) { return gelu(a); }));
  c.push_back(unary_case("log", [](Var a) { return log(a); }, true));
  c.push_back(unary_case("exp", [](Var a) { return exp(a); }));
  c.push_back(unary_case("square", [](Var a) { return square(a); }));
  c.push_back(unary_case("l2_norm", [](Var a) { return scalar_mul(a, l2_norm(a)); }));
  c.push_back(unary_case("sum", [](Var a) { return scalar_mul(a, sum(square(a))); }));
  c.push_back(unary_case("mean", [](Var a) { return scalar_mul(a, mean(a)); }));
  c.push_back({"sum_rows", [](Rng& rng) {
                 return std::pair{projected([](Tape&, const std::vector<Var>& v) { return sum_rows(v[0]); },
                                            rng.normal_matrix(1, 4)),
                                  std::vector<NamedParam>{{"x", rng.normal_matrix(3, 4)}}};
               }});
  c.push_back({"gather_rows", [](Rng& rng) {
                 return std::pair{projected(
                                      [](Tape&, const std::vector<Var>& v) {
                                        const std::vector<std::size_t> rows = {2, 0, 2, 1};
                                        return gather_rows(v[0], rows);
                                      },
                                      rng.normal_matrix(4, 4)),
                                  std::vector<NamedParam>{{"x", rng.normal_matrix(3, 4)}}};
               }});
  c.push_back(unary_case("entry", [](Var a) { return scalar_mul(a, entry(a, 1, 2)); }));
  c.push_back({"reshape", [](Rng& rng) {
                 return std::pair{projected([](Tape&, const std::vector<Var>& v) { return reshape(v[0], 2, 6); },
                                            rng.normal_matrix(2, 6)),
                                  std::vector<NamedParam>{{"x", rng.normal_matrix(3, 4)}}};
               }});
  c.push_back(unary_case("normalize_rows", [](Var a) { return normalize_rows(a); }));
  c.push_back(binary_case("blockwise_scores", [](Var x, Var u) { return blockwise_scores(x, u, 3); }, 6, 4, 2, 4, 2, 3));
  c.push_back(binary_case("blockwise_mix", [](Var p, Var x) { return blockwise_mix(p, x); }, 2, 3, 6, 4, 2, 4));
  c.push_back({"add_all", [](Rng& rng) {
                 return std::pair{ScalarFunction([](Tape&, const std::vector<Var>& v) {
                                    std::vector<Var> terms = {entry(v[0], 0, 0), sum(square(v[0])), entry(v[0], 2, 3)};
                                    return add_all(terms);
                                  }),
                                  std::vector<NamedParam>{{"x", rng.normal_matrix(3, 4)}}};
               }});
  for (const char* kind : {"identity", "constant", "position", "token", "combined", "weight-shared", "feature", "group",
                           "threshold-gate"}) {
    c.push_back(attention_case(kind));
  }
  for (const char* kind : {"identity", "group", "position"}) c.push_back(last_query_case(kind));
  c.push_back(graph_loss_case(GraphHead::Direct));
  c.push_back(graph_loss_case(GraphHead::Linear));
  c.push_back(denoise_loss_case());
  return c;
}

}  // namespace

std::vector<std::string> gradient_suite_case_names() {
  std::vector<std::string> out;
  for (const auto& c : all_cases()) out.push_back(c.name);
  return out;
}

GradSuiteResult run_gradient_suite(std::size_t trials, std::uint64_t seed, double tol) {
  GradSuiteResult result;
  result.tol = tol;
  Rng root(seed, "gradient-suite");
  for (const auto& spec : all_cases()) {
    GradSuiteCase c;
    c.name = spec.name;
    Rng rng = root.split(spec.name);
    for (std::size_t t = 0; t < trials; ++t) {
      auto [f, params] = spec.make(rng);
      const GradCheckReport r = finite_difference_check(f, params, 1e-5, tol);
      ++c.trials;
      if (!r.entries.empty() && r.worst_rel_error >= c.worst_rel_error) {
        c.worst_rel_error = r.worst_rel_error;
        c.worst_param = r.entries.front().param;
      }
      c.passed = c.passed && r.passed;
    }
    result.worst_rel_error = std::max(result.worst_rel_error, c.worst_rel_error);
    result.passed = result.passed && c.passed;
    result.cases.push_back(std::move(c));
  }
  return result;
}

}  // namespace ssa

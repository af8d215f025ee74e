#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "ssa/errors.hpp"
#include "ssa/gradcheck.hpp"
#include "ssa/metrics.hpp"
#include "ssa/training.hpp"

using namespace ssa;

TEST_CASE("adam: zero gradient leaves parameters alone") {
  Matrix p = Matrix::from_rows({{1.0, -2.0}});
  const Matrix before = p;
  Adam opt({}, {&p});
  for (int i = 0; i < 5; ++i) opt.step({Matrix(1, 2, 0.0)});
  CHECK(p == before);
}

TEST_CASE("adam: first step moves each entry by about lr") {
  Matrix p = Matrix::from_rows({{0.5, 0.5, 0.5}});
  Adam opt({1e-3}, {&p});
  opt.step({Matrix::from_rows({{3.0, -0.01, 250.0}})});
  CHECK(p(0, 0) == doctest::Approx(0.5 - 1e-3).epsilon(1e-8));
  CHECK(p(0, 1) == doctest::Approx(0.5 + 1e-3).epsilon(1e-8));
  CHECK(p(0, 2) == doctest::Approx(0.5 - 1e-3).epsilon(1e-8));
}

TEST_CASE("adam: two steps match a hand trace") {
  const double lr = 0.1, b1 = 0.9, b2 = 0.95, eps = 1e-8;
  Matrix p = Matrix::scalar(1.0);
  Adam opt({lr, b1, b2, eps, 0.0}, {&p});
  // f(x) = x^2, so g = 2x.
  double x = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = 2.0 * x;
    opt.step({Matrix::scalar(2.0 * p.item())});
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t)), vhat = v / (1 - std::pow(b2, t));
    x -= lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(std::abs(p.item() - x) <= 1e-12);
  }
}

TEST_CASE("adam: decoupled weight decay") {
  Matrix p = Matrix::scalar(2.0);
  Adam opt({0.1, 0.9, 0.95, 1e-8, 0.5}, {&p});
  opt.step({Matrix::scalar(0.0)});
  CHECK(p.item() == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-15));
}

TEST_CASE("adam: non-finite gradient aborts with the step index") {
  Matrix p = Matrix::scalar(1.0);
  Adam opt({}, {&p});
  opt.step({Matrix::scalar(0.3)});
  const Matrix after_one = p;
  try {
    opt.step({Matrix::scalar(std::numeric_limits<double>::quiet_NaN())});
    FAIL("expected a NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.step() == 2);
  }
  CHECK(p == after_one);
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam: configuration errors name the key") {
  auto key_of = [](AdamConfig c) {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string();
  };
  CHECK(key_of({0.0}) == "lr");
  CHECK(key_of({1e-3, 1.0}) == "beta1");
  CHECK(key_of({1e-3, 0.9, -0.1}) == "beta2");
  CHECK(key_of({}).empty());
}

TEST_CASE("cross entropy and normalized mse examples") {
  for (std::size_t k : {2u, 8u, 100u}) {
    const std::vector<double> logits(k, 0.7);
    CHECK(cross_entropy(logits, 1) == doctest::Approx(std::log(double(k))).epsilon(1e-14));
  }
  CHECK_THROWS_AS(cross_entropy(std::vector<double>{0, 0}, 2), LookupError);

  const std::vector<double> y = {0.6, 0.8};
  CHECK(mse_normalized(y, std::vector<double>{1.8, 2.4}) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(mse_normalized(y, std::vector<double>{-0.6, -0.8}) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK_THROWS_AS(mse_normalized(y, std::vector<double>{0.0, 0.0}), DomainError);

  Tape t;
  Var logits = t.leaf(Matrix::from_rows({{0.0, 0.0, 0.0}, {1.0, 2.0, 3.0}}));
  const std::size_t labels[] = {0, 2};
  const double expect = 0.5 * (std::log(3.0) + cross_entropy(std::vector<double>{1, 2, 3}, 2));
  CHECK(cross_entropy_rows(logits, labels).value().item() == doctest::Approx(expect).epsilon(1e-14));
  Var yh = t.leaf(Matrix::from_rows({{1.8, 2.4}, {-0.6, -0.8}}));
  CHECK(mse_normalized_rows(yh, Matrix::from_rows({{0.6, 0.8}, {0.6, 0.8}})).value().item() ==
        doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("temperature plans parse and print") {
  CHECK(TemperaturePlan::parse("none", "group").placement() == "none");
  CHECK_FALSE(TemperaturePlan::parse("none", "group").active());
  CHECK(TemperaturePlan::parse("KQV", "token").placement() == "KQV");
  const auto qv = TemperaturePlan::parse("QV", "combined");
  CHECK(qv.query);
  CHECK(qv.value);
  CHECK_FALSE(qv.key);
  CHECK_THROWS_AS(TemperaturePlan::parse("QQ", "group"), ConfigError);
  CHECK_THROWS_AS(TemperaturePlan::parse("Q", "cubic"), ConfigError);
}

TEST_CASE("graph loss gradients match finite differences at initialization") {
  const Graph g = reference_graph();
  const TransitionMatrix p_star = transition_matrix(g);
  for (GraphHead head : {GraphHead::Direct, GraphHead::Linear}) {
    for (const char* kind : {"group", "combined"}) {
      GraphConfig cfg;
      cfg.d = 4;
      cfg.head = head;
      cfg.embeddings = EmbeddingMode::Trainable;
      cfg.temperatures = TemperaturePlan::parse("KQV", kind);
      GraphModel model = init_graph_model(cfg, g, p_star);
      // Move away from the zero-initialized temperature heads so every path carries gradient.
      Rng rng(3, "graph-fd");
      for (auto& slot : graph_parameters(model, cfg))
        if (slot.name.find("w_out") != std::string::npos) *slot.value = rng.normal_matrix(slot.value->rows(), slot.value->cols(), 0.5);
      const GraphBatch batch = sample_graph_batch(p_star, 6, 5);
      auto slots = graph_parameters(model, cfg);
      std::vector<NamedParam> params;
      for (const auto& s : slots) params.push_back({s.name, *s.value});
      const auto f = [&](Tape& t, const std::vector<Var>& vars) {
        ParamBinder b(t);
        for (std::size_t i = 0; i < slots.size(); ++i) b.attach(*slots[i].value, vars[i]);
        return graph_loss(b, model, batch, head);
      };
      const auto report = finite_difference_check(f, params);
      CAPTURE(kind);
      CAPTURE(int(head));
      CHECK(report.worst_rel_error < 1e-4);
    }
  }
}

TEST_CASE("graph training is bit-for-bit deterministic and stays finite") {
  GraphConfig cfg;
  cfg.steps = 60;
  cfg.log_every = 20;
  cfg.seed = 7;
  cfg.temperatures = TemperaturePlan::parse("Q", "group");
  const GraphRun a = train_graph(cfg), b = train_graph(cfg);
  CHECK_FALSE(a.diverged);
  CHECK(a.eval.cross_entropy == b.eval.cross_entropy);
  CHECK(a.eval.p_hat == b.eval.p_hat);
  CHECK(a.eval.group_tau == b.eval.group_tau);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].value == b.curve[i].value);
    CHECK(std::isfinite(a.curve[i].value));
  }
  CHECK(a.eval.group_tau.size() == 4);
  for (std::size_t i = 0; i < 8; ++i) {
    double s = 0.0;
    for (double v : a.eval.p_hat.row(i)) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  // Cross-entropy under P* can never fall below the entropy of P*.
  CHECK(a.eval.cross_entropy >= a.eval.target_entropy - 1e-12);
}

TEST_CASE("effective per-query weight is bounded by the largest temperature") {
  GraphConfig cfg;
  cfg.steps = 100;
  cfg.seed = 2;
  cfg.temperatures = TemperaturePlan::parse("Q", "group");
  const GraphRun run = train_graph(cfg);
  double tmax = 0.0;
  for (double t : run.eval.group_tau) tmax = std::max(tmax, std::abs(t));
  const Matrix w = matmul(run.model.layer.w_q, transpose(run.model.layer.w_k));
  const double norm = operator_norm(w);
  CHECK(run.eval.operator_norm == doctest::Approx(norm).epsilon(1e-9));
  for (double t : run.eval.group_tau) CHECK(std::abs(t) * norm <= tmax * norm);
  // The temperature-scaled query weight obeys the same bound.
  for (double t : run.eval.group_tau) CHECK(operator_norm(w * t) <= tmax * norm * (1 + 1e-9));
}

TEST_CASE("min-max normalization") {
  const Matrix m = Matrix::from_rows({{1, 3}, {2, 5}});
  CHECK(minmax_normalize(m) == Matrix::from_rows({{0, 0.5}, {0.25, 1}}));
  CHECK(minmax_normalize(Matrix(2, 2, 0.3)) == Matrix(2, 2, 0.0));
}

TEST_CASE("denoising: noiseless bayes risk is zero; short runs are reproducible") {
  DenoiseConfig cfg;
  cfg.L = 32;
  cfg.sigma = 0.0;
  cfg.steps = 5;
  cfg.eval_batch = 256;
  const DenoiseRun run = train_denoising(cfg);
  CHECK(run.risk_bayes == 0.0);
  CHECK(run.risk_mask_average == 0.0);
  cfg.sigma = 0.3;
  const DenoiseRun a = train_denoising(cfg), b = train_denoising(cfg);
  CHECK(a.risk_vanilla == b.risk_vanilla);
  CHECK(a.risk_value_selective == b.risk_value_selective);
  CHECK(a.risk_bayes <= a.risk_naive);
}

TEST_CASE("imbalanced training: free position temperatures fit, flat ones stay above 1/500") {
  ImbalancedConfig cfg;
  cfg.steps = 1500;
  const ImbalancedRun run = train_imbalanced(cfg);
  CHECK(run.analytic_risk <= 1e-10);
  CHECK(run.position_risk < 1e-4);
  CHECK(run.floor >= kFlatTemperatureFloor);
  CHECK(run.min_flat_risk >= kFlatTemperatureFloor);
  CHECK(run.flat_risk >= run.min_flat_risk);

  cfg.L = 16;
  cfg.steps = 50;
  const ImbalancedRun small = train_imbalanced(cfg);
  CHECK(std::isnan(small.floor));
  CHECK(small.analytic_risk <= 1e-10);
}

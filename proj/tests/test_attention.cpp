#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "ssa/attention.hpp"
#include "ssa/errors.hpp"
#include "ssa/metrics.hpp"
#include "ssa/rng.hpp"

using namespace ssa;

namespace {

std::vector<double> ones(std::size_t n) { return std::vector<double>(n, 1.0); }

AttentionLayer random_layer(std::size_t d, Rng& rng) { return AttentionLayer::random(d, rng, 0.8); }

}  // namespace

TEST_CASE("token temperature: zero output weights, tanh range") {
  Rng rng(1, "token-temp");
  const std::size_t d = 5;
  const Matrix w_hidden = rng.normal_matrix(d, d);
  for (int i = 0; i < 50; ++i) {
    const Matrix x = rng.normal_matrix(1, d);
    CHECK(token_temperature(x.row(0), Matrix(1, d, 0.0), w_hidden) == 0.0);
    // Pre-activations stay well below the point where tanh rounds to +-1 in double precision.
    const double t = token_temperature(x.row(0), rng.normal_matrix(1, d), w_hidden);
    CHECK(t > -1.0);
    CHECK(t < 1.0);
  }
  const Matrix x(1, d + 1, 1.0);
  CHECK_THROWS_AS(token_temperature(x.row(0), Matrix(1, d, 0.0), w_hidden), ShapeError);
}

TEST_CASE("position temperature examples and range") {
  for (double alpha : {-10.0, -4.0, 0.0, 3.0}) CHECK(position_temperature(1, alpha) == 1.0);
  // Positions are integers; sigmoid(0) = 1/2 gives 1 + ln(n)/2, which is 1.5 at n = e.
  CHECK(position_temperature(3, 0.0) == doctest::Approx(1.0 + 0.5 * std::log(3.0)).epsilon(1e-15));
  for (std::size_t n = 1; n <= 64; ++n) {
    CHECK(position_temperature(n, -60.0) == doctest::Approx(1.0).epsilon(1e-15));
    const double t = position_temperature(n, 2.0);
    CHECK(t >= 1.0);
    CHECK(t < 1.0 + std::log(64.0) + 1e-15);
  }
  CHECK_THROWS_AS(position_temperature(0, 0.0), DomainError);
}

TEST_CASE("evaluate_temperatures: identity, constant, combined, feature lookups") {
  Rng rng(2, "evaluate-temps");
  const std::size_t d = 4, L = 6;
  AttentionLayer layer = random_layer(d, rng);
  const Matrix x = rng.normal_matrix(L, d);
  CHECK(evaluate_temperatures(x, temp::Identity{}, layer) == ones(L));
  CHECK(evaluate_temperatures(rng.normal_matrix(3, d), make_constant(2.0), layer) == std::vector<double>{2, 2, 2});

  TemperatureSpec combined = make_combined(d, rng, 0.0);
  const auto tc = evaluate_temperatures(x, combined, layer);
  for (std::size_t n = 1; n <= L; ++n)
    CHECK(tc[n - 1] == doctest::Approx(1.0 + 0.5 * std::log(double(n))).epsilon(1e-15));

  const std::vector<std::size_t> tokens = {0, 1, 2, 0, 1, 2};
  const auto tf = evaluate_temperatures(x, make_feature_based({0.5, 0.25, 1.0}, 2.0), layer, tokens);
  CHECK(tf == std::vector<double>{1.0, 0.5, 2.0, 1.0, 0.5, 2.0});
  const std::vector<std::size_t> unknown = {0, 1, 2, 3, 0, 1};
  CHECK_THROWS_AS(evaluate_temperatures(x, make_feature_based({0.5, 0.25, 1.0}), layer, unknown), LookupError);
}

TEST_CASE("vanilla attention: single token, zero logits, naive loop") {
  Rng rng(3, "vanilla");
  const std::size_t d = 4;
  AttentionLayer layer = random_layer(d, rng);
  const Matrix x1 = rng.normal_matrix(1, d);
  CHECK(max_abs_diff(vanilla_attention(x1, layer), matmul(x1, layer.w_v)) <= 1e-15);

  AttentionLayer flat = layer;
  flat.w_q = Matrix(d, d);
  flat.w_k = Matrix(d, d);
  const Matrix x = rng.normal_matrix(5, d);
  const Matrix v = matmul(x, flat.w_v);
  const Matrix out = vanilla_attention(x, flat);
  for (std::size_t n = 0; n < 5; ++n)
    for (std::size_t j = 0; j < d; ++j) {
      double avg = 0.0;
      for (std::size_t i = 0; i <= n; ++i) avg += v(i, j);
      CHECK(std::abs(out(n, j) - avg / double(n + 1)) <= 1e-14);
    }

  for (int trial = 0; trial < 20; ++trial) {
    const Matrix xs = rng.normal_matrix(1 + rng.index(8), d);
    CHECK(max_abs_diff(vanilla_attention(xs, layer), oracle::attention(xs, layer.w_q, layer.w_k, layer.w_v)) <=
          1e-12);
  }
  CHECK_THROWS_AS(vanilla_attention(rng.normal_matrix(3, d + 1), layer), ShapeError);
}

TEST_CASE("identity temperatures reproduce vanilla attention (100 draws)") {
  Rng rng(4, "identity-equivalence");
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + rng.index(6), L = 1 + rng.index(12);
    AttentionLayer layer = random_layer(d, rng);
    const Matrix x = rng.normal_matrix(L, d);
    worst = std::max(worst, max_abs_diff(selective_attention(x, layer), vanilla_attention(x, layer)));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("constant query temperature equals scaled query weights") {
  Rng rng(5, "constant-equivalence");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 + rng.index(6), L = 1 + rng.index(10);
    const double c = rng.uniform(-3.0, 3.0);
    AttentionLayer layer = random_layer(d, rng);
    const Matrix x = rng.normal_matrix(L, d);
    AttentionLayer scaled = layer;
    scaled.w_q = layer.w_q * c;
    layer.temp_q = make_constant(c);
    CHECK(max_abs_diff(selective_attention(x, layer), vanilla_attention(x, scaled)) <= 1e-12);
    CHECK(max_abs_diff(attention_map(x, layer), attention_map(x, scaled)) <= 1e-12);
  }
}

TEST_CASE("selective attention matches the naive loop for every temperature kind") {
  Rng rng(6, "ssa-oracle");
  const std::size_t d = 4, L = 7;
  const std::vector<std::size_t> tokens = {0, 1, 2, 3, 1, 0, 2};
  for (int trial = 0; trial < 10; ++trial) {
    AttentionLayer layer = random_layer(d, rng);
    const Matrix x = rng.normal_matrix(L, d);
    TemperatureSpec tok = make_token_aware(d, rng);
    std::get<temp::TokenAware>(tok).w_out = rng.normal_matrix(1, d);
    layer.temp_q = make_combined(d, rng, rng.uniform(-2, 2));
    std::get<temp::Combined>(layer.temp_q).w_out = rng.normal_matrix(1, d);
    layer.temp_k = tok;
    layer.temp_v = make_group_table({0, 1, 1, 0}, 2, rng.uniform(-1, 1));
    const auto tq = evaluate_temperatures(x, layer.temp_q, layer, tokens);
    const auto tk = evaluate_temperatures(x, layer.temp_k, layer, tokens);
    const auto tv = evaluate_temperatures(x, layer.temp_v, layer, tokens);
    // Check the per-row values independently of evaluate_temperatures.
    const auto& c = std::get<temp::Combined>(layer.temp_q);
    for (std::size_t n = 0; n < L; ++n) {
      const double sig = 1.0 / (1.0 + std::exp(-c.alpha.item()));
      const double pos = 1.0 + sig * std::log(double(n + 1));
      CHECK(tq[n] == doctest::Approx(pos + token_temperature(x.row(n), c.w_out, c.w_hidden)).epsilon(1e-14));
    }
    const Matrix expect = oracle::attention(x, layer.w_q, layer.w_k, layer.w_v, tq, tk, tv);
    CHECK(max_abs_diff(selective_attention(x, layer, tokens), expect) <= 1e-12);
  }
}

TEST_CASE("zero value temperature removes a token's contribution") {
  Rng rng(7, "value-gate");
  const std::size_t d = 3, L = 5;
  AttentionLayer layer = random_layer(d, rng);
  const std::vector<std::size_t> tokens = {0, 1, 0, 2, 1};
  layer.temp_v = make_group_table({0, 1, 0}, 2, 1.0);
  std::get<temp::GroupTable>(layer.temp_v).values(0, 1) = 0.0;  // token id 1 gated off
  const Matrix x = rng.normal_matrix(L, d);
  const Matrix base = selective_attention(x, layer, tokens);
  const Matrix logits_only = oracle::attention(x, layer.w_q, layer.w_k, layer.w_v, ones(L), ones(L),
                                               {1, 0, 1, 1, 0});
  CHECK(max_abs_diff(base, logits_only) <= 1e-12);
  // Row 1 attends to tokens {0, 1}; token 1 carries a zero value row, so the output is p_0 * v_0.
  const Matrix p = attention_map(x, layer, MapMode::Causal, tokens);
  const Matrix v = matmul(x, layer.w_v);
  for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(base(1, j) - p(1, 0) * v(0, j)) <= 1e-14);
}

TEST_CASE("attention_map: full uniform map and zero query temperature") {
  Rng rng(8, "attention-map");
  const std::size_t d = 3;
  AttentionLayer flat = random_layer(d, rng);
  flat.w_q = Matrix(d, d);
  const Matrix m = attention_map(rng.normal_matrix(4, d), flat, MapMode::Full);
  for (double v : m.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  AttentionLayer layer = random_layer(d, rng);
  layer.w_q = rng.normal_matrix(d, d, 5.0);
  layer.temp_q = make_group_table({0, 1, 1, 1}, 2, 1.0);
  std::get<temp::GroupTable>(layer.temp_q).values(0, 0) = 0.0;
  const std::vector<std::size_t> tokens = {0, 1, 2, 3};
  const Matrix e = Matrix::identity(d + 1);
  Matrix x(4, d);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = e(i, j) + 0.1 * double(i);
  const Matrix mm = attention_map(x, layer, MapMode::Full, tokens);
  for (std::size_t j = 0; j < 4; ++j) CHECK(mm(0, j) == doctest::Approx(0.25).epsilon(1e-15));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += mm(i, j);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("last-query helpers agree with the full forward pass") {
  Rng rng(9, "last-query");
  const std::size_t d = 4, L = 5, B = 3;
  AttentionLayer layer = random_layer(d, rng);
  layer.temp_q = make_position_aware(0.7);
  layer.temp_k = make_constant(1.3);
  const Matrix x = rng.normal_matrix(B * L, d);
  Tape t;
  ParamBinder b(t);
  const Matrix last = attend_last(b, layer, t.constant(x), L).value();
  for (std::size_t s = 0; s < B; ++s) {
    Matrix xs(L, d);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < d; ++j) xs(i, j) = x(s * L + i, j);
    const Matrix full = selective_attention(xs, layer);
    for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(last(s, j) - full(L - 1, j)) <= 1e-13);
  }
}

TEST_CASE("feature-based temperature needs a known token id") {
  Rng rng(10, "feature");
  AttentionLayer layer = random_layer(3, rng);
  layer.temp_q = make_feature_based({0.2, 0.8});
  const std::vector<std::size_t> tokens = {0, 5};
  CHECK_THROWS_AS(selective_attention(rng.normal_matrix(2, 3), layer, tokens), LookupError);
}

TEST_CASE("spikiness examples and range") {
  const std::vector<double> uniform(8, 0.125);
  CHECK(spikiness(uniform, 8) == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<double> one_hot(10, 0.0);
  one_hot[3] = 1.0;
  CHECK(spikiness(one_hot, 10) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(spikiness(std::vector<double>{0.75, 0.25}, 2) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_THROWS_AS(spikiness(std::vector<double>{0.5, 0.6}, 2), DomainError);

  Rng rng(11, "spikiness");
  for (int i = 0; i < 100; ++i) {
    const std::size_t L = 2 + rng.index(20);
    std::vector<double> logits(L);
    for (double& v : logits) v = 3.0 * rng.normal();
    const auto p = oracle::softmax(logits);
    const double s = spikiness(p, L);
    CHECK(s >= 1.0 / double(L) - 1e-15);
    CHECK(s < 1.0);
  }
}

TEST_CASE("specificity examples and homogeneity") {
  const std::vector<double> q = {0.6, 0.8};
  CHECK(specificity(Matrix::identity(2), q) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(specificity(Matrix(2, 2), q) == 0.0);
  CHECK(specificity(Matrix::identity(2) * 2.0, q) == doctest::Approx(2.0).epsilon(1e-15));
  Rng rng(12, "specificity");
  for (int i = 0; i < 50; ++i) {
    const Matrix w = rng.normal_matrix(4, 4);
    const Matrix qq = rng.normal_matrix(1, 4);
    const double tau = rng.uniform(0.0, 5.0);
    CHECK(specificity(w * tau, qq.row(0)) == doctest::Approx(tau * specificity(w, qq.row(0))).epsilon(1e-13));
  }
}

TEST_CASE("operator norm: hand examples and the Jacobi SVD oracle") {
  CHECK(operator_norm(Matrix::from_rows({{3, 0}, {0, 1}})) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(operator_norm(Matrix(3, 3)) == 0.0);
  Rng rng(13, "operator-norm");
  for (int i = 0; i < 50; ++i) {
    const Matrix w = rng.normal_matrix(5, 5);
    CHECK(std::abs(operator_norm(w) - oracle::singular_values(w).front()) <= 1e-8);
  }
}

TEST_CASE("operator norm reports non-convergence") {
  // A one-iteration budget cannot meet a 1e-16 tolerance.
  Rng rng(14, "operator-norm-budget");
  const Matrix w = rng.normal_matrix(6, 6);
  CHECK_THROWS_AS(operator_norm(w, {1e-16, 1}), ConvergenceError);
}

#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "pchnet/curvature.hpp"
#include "pchnet/error.hpp"
#include "pchnet/linalg.hpp"

using namespace pchnet;

namespace {

Matrix random_inputs(Rng& rng, std::size_t batch, std::size_t n0) {
  Matrix x(batch, n0);
  for (double& v : x.values()) v = rng.uniform(0.0, 1.0);
  return x;
}

struct Problem {
  FcnnModel model;
  Matrix inputs;
  std::vector<std::size_t> labels;
  ForwardTrace trace;
};

Problem random_problem(Rng& rng, std::vector<std::size_t> widths, Activation act,
                       std::size_t batch, double scale = 1.0) {
  FcnnModel m = oracle::random_model(rng, std::move(widths), act, scale);
  Matrix x = random_inputs(rng, batch, m.input_width());
  auto y = oracle::random_labels(rng, batch, m.output_width());
  ForwardTrace t = forward(m, x);
  return {std::move(m), std::move(x), std::move(y), std::move(t)};
}

/// Hessian of the mean loss w.r.t. b_l by central differences of backprop.
Matrix fd_bias_hessian(const Problem& p, const Criterion& crit, std::size_t l) {
  return oracle::fd_jacobian(
      [&](std::span<const double> b) {
        FcnnModel probe = p.model;
        probe.layer(l).bias.assign(b.begin(), b.end());
        const ForwardTrace t = forward(probe, p.inputs);
        const BatchObjective obj = evaluate_batch(crit, t, p.labels, false);
        return backprop(probe, t, obj.grad_out).bias[l];
      },
      p.model.layer(l).bias);
}

double min_eig(const Matrix& a) { return sym_eig(a).eigenvalues.front(); }

std::vector<Matrix> hb_of(const std::vector<LayerCurvature>& c) {
  std::vector<Matrix> out;
  for (const auto& lc : c) out.push_back(lc.hb);
  return out;
}

}  // namespace

TEST_CASE("true_bias_hessian base case: single affine layer") {
  Rng rng(1);
  const Problem p = random_problem(rng, {4, 3}, Activation::Sigmoid, 5);
  for (const Criterion& crit : {Criterion::cross_entropy(), Criterion::sigmoid_gate()}) {
    const auto hb = true_bias_hessian(p.model, p.trace, crit, p.labels);
    REQUIRE(hb.size() == 1);
    Matrix mean(3, 3);
    for (std::size_t i = 0; i < 5; ++i) {
      mean += criterion_eval(crit, p.trace.output().row(i), p.labels[i]).hess;
    }
    mean *= 1.0 / 5.0;
    CHECK(oracle::max_abs_diff(hb[0], mean) < 1e-15);
  }
}

TEST_CASE("true_bias_hessian for ReLU has no diagonal term") {
  Rng rng(2);
  const Problem p = random_problem(rng, {3, 5, 4, 3}, Activation::ReLU, 6);
  const Criterion crit = Criterion::sigmoid_gate();
  const CurvatureInputs in = curvature_inputs(p.model, p.trace, crit, p.labels);
  const auto exact = true_bias_hessian(p.model, p.trace, crit, p.labels);
  const auto sandwich = propagate_bias_hessian(
      p.model, p.trace, in, {Propagation::PerInstance, false, std::nullopt});
  for (std::size_t l = 0; l < exact.size(); ++l) CHECK(exact[l] == sandwich[l]);
  for (const auto& c : ea_curvature(p.model, p.trace, in, CurvatureKind::pch1())) {
    for (double d : c.diag_term) CHECK(d == 0.0);
  }
}

TEST_CASE("true_bias_hessian matches finite differences of bias gradients") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Criterion crit = trial % 2 ? Criterion::sigmoid_gate() : Criterion::cross_entropy();
    const Problem p = random_problem(rng, {3, 5, 4, 3}, Activation::Sigmoid, 4);
    const auto hb = true_bias_hessian(p.model, p.trace, crit, p.labels);
    for (std::size_t l = 0; l < p.model.depth(); ++l) {
      const Matrix fd = fd_bias_hessian(p, crit, l);
      const double scale = std::max(oracle::fro(fd), 1e-8);
      CHECK(oracle::fro(hb[l] - fd) <= 1e-5 * scale);
      CHECK(is_symmetric(hb[l]));
    }
  }
}

TEST_CASE("ea_curvature factors") {
  Rng rng(4);
  const Problem p = random_problem(rng, {3, 4, 5, 2}, Activation::Sigmoid, 7);
  const auto curv = ea_curvature(p.model, p.trace, Criterion::cross_entropy(), p.labels,
                                 CurvatureKind::pch1());
  REQUIRE(curv.size() == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    const Matrix& h = p.trace.h[l];
    Matrix ehht(h.cols(), h.cols());
    Vector eh(h.cols(), 0.0);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t a = 0; a < h.cols(); ++a) {
        eh[a] += h(i, a) / 7.0;
        for (std::size_t b = 0; b < h.cols(); ++b) ehht(a, b) += h(i, a) * h(i, b) / 7.0;
      }
    CHECK(oracle::max_abs_diff(curv[l].ehht, ehht) < 1e-14);
    CHECK(oracle::max_abs_diff(curv[l].eh, eh) < 1e-14);
    CHECK(oracle::psd_within(curv[l].ehht, 1e-12));
    if (l == 0) {
      CHECK(curv[l].ehht_prime.empty());
      CHECK(curv[l].diag_term.empty());
    } else {
      CHECK(curv[l].ehht_prime.rows() == h.cols());
      CHECK(oracle::psd_within(curv[l].ehht_prime, 1e-12));
      CHECK(curv[l].diag_term.size() == h.cols());
    }
  }
}

TEST_CASE("ea_curvature examples") {
  Rng rng(5);
  SUBCASE("convex top block unchanged by Pos-Eig") {
    const Problem p = random_problem(rng, {3, 4, 4}, Activation::Sigmoid, 6);
    const Criterion ce = Criterion::cross_entropy();
    const auto exact = true_bias_hessian(p.model, p.trace, ce, p.labels);
    for (CurvatureKind kind : {CurvatureKind::pch1(), CurvatureKind::pch2(), CurvatureKind::gauss_newton()}) {
      const auto c = ea_curvature(p.model, p.trace, ce, p.labels, kind);
      CHECK(oracle::max_abs_diff(c.back().hb, exact.back()) <= 1e-12);
    }
  }
  SUBCASE("batch size 1 collapses E[h h^T] to E[h] E[h]^T") {
    const Problem p = random_problem(rng, {3, 4, 4, 2}, Activation::Sigmoid, 1);
    for (const auto& c : ea_curvature(p.model, p.trace, Criterion::cross_entropy(), p.labels,
                                      CurvatureKind::fisher())) {
      CHECK(oracle::max_abs_diff(c.ehht, outer(c.eh, c.eh)) == 0.0);
    }
  }
  SUBCASE("gate criterion: GN top block indefinite, PCH blocks PSD") {
    bool found_negative = false;
    for (int trial = 0; trial < 50 && !found_negative; ++trial) {
      const Problem p = random_problem(rng, {3, 5, 4}, Activation::Sigmoid, 4, 2.0);
      const Criterion gate = Criterion::sigmoid_gate();
      const auto gn = ea_curvature(p.model, p.trace, gate, p.labels, CurvatureKind::gauss_newton());
      found_negative = min_eig(gn.back().hb) < -1e-8;
      for (CurvatureKind kind : {CurvatureKind::pch1(), CurvatureKind::pch2()})
        for (const auto& c : ea_curvature(p.model, p.trace, gate, p.labels, kind))
          CHECK(min_eig(c.hb) >= -1e-8);
    }
    CHECK(found_negative);
  }
  SUBCASE("true block diagonal is rejected") {
    const Problem p = random_problem(rng, {2, 2}, Activation::Sigmoid, 2);
    CHECK_THROWS_AS(ea_curvature(p.model, p.trace, Criterion::cross_entropy(), p.labels,
                                 CurvatureKind::true_block_diag()),
                    ConfigError);
  }
}

TEST_CASE("fisher blocks are the mean outer products of bias gradients") {
  Rng rng(6);
  const Problem p = random_problem(rng, {3, 4, 3}, Activation::Sigmoid, 5);
  const Criterion crit = Criterion::sigmoid_gate();
  const auto c = ea_curvature(p.model, p.trace, crit, p.labels, CurvatureKind::fisher());
  const BatchObjective obj = evaluate_batch(crit, p.trace, p.labels, false);
  for (std::size_t l = 0; l < 2; ++l) {
    Matrix f(p.model.widths()[l + 1], p.model.widths()[l + 1]);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto g = backprop_instance(p.model, p.trace, obj.grad_out, i).bias[l];
      f += outer(g, g);
    }
    f *= 0.2;
    CHECK(oracle::max_abs_diff(c[l].hb, f) < 1e-14);
  }
}

TEST_CASE("PSD invariants on random nets") {
  Rng rng(7);
  for (int trial = 0; trial < 60; ++trial) {
    const Activation act = trial % 2 ? Activation::ReLU : Activation::Sigmoid;
    const auto widths = oracle::random_widths(rng, 4, 6);
    const Problem p = random_problem(rng, widths, act, 1 + rng.below(6), 1.5);
    for (const Criterion& crit : {Criterion::cross_entropy(), Criterion::sigmoid_gate()}) {
      const CurvatureInputs in = curvature_inputs(p.model, p.trace, crit, p.labels);
      for (CurvatureKind kind : {CurvatureKind::pch1(), CurvatureKind::pch2(), CurvatureKind::fisher()}) {
        const double tol = kind.type == CurvatureKind::Type::Fisher ? 1e-10 : 1e-8;
        for (const auto& c : ea_curvature(p.model, p.trace, in, kind)) {
          CHECK(is_symmetric(c.hb));
          CHECK(min_eig(c.hb) >= -tol);
        }
      }
    }
  }
}

TEST_CASE("batch size 1: expectation recursion reproduces the exact recursion") {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const Activation act = trial % 2 ? Activation::ReLU : Activation::Sigmoid;
    const Problem p = random_problem(rng, oracle::random_widths(rng, 4, 6), act, 1);
    const Criterion crit = trial % 3 ? Criterion::sigmoid_gate() : Criterion::cross_entropy();
    const CurvatureInputs in = curvature_inputs(p.model, p.trace, crit, p.labels);
    const auto exact = true_bias_hessian(p.model, p.trace, crit, p.labels);
    const auto ea = propagate_bias_hessian(p.model, p.trace, in,
                                           {Propagation::Expectation, true, std::nullopt});
    for (std::size_t l = 0; l < exact.size(); ++l) {
      CHECK(oracle::max_abs_diff(ea[l], exact[l]) <= 1e-12 * std::max(1.0, oracle::fro(exact[l])));
    }
  }
}

TEST_CASE("ReLU with a convex criterion: Gauss-Newton equals the true blocks") {
  // The expectation approximation only collapses for a single instance, so
  // the equality is checked at batch size 1.
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const Problem p = random_problem(rng, oracle::random_widths(rng, 4, 6), Activation::ReLU, 1);
    const Criterion ce = Criterion::cross_entropy();
    const auto exact = true_bias_hessian(p.model, p.trace, ce, p.labels);
    const auto gn = ea_curvature(p.model, p.trace, ce, p.labels, CurvatureKind::gauss_newton());
    for (std::size_t l = 0; l < exact.size(); ++l)
      CHECK(oracle::max_abs_diff(gn[l].hb, exact[l]) <= 1e-10);
  }
}

TEST_CASE("layerwise_error examples") {
  SUBCASE("approx equal to |exact|") {
    const std::vector<Matrix> exact{Matrix{{0, 1}, {1, 0}}, Matrix{{2}}};
    const std::vector<Matrix> approx{Matrix::identity(2), Matrix{{2}}};
    const ErrorReport r = layerwise_error(approx, exact);
    CHECK(r.per_layer[0] <= 1e-14);
    CHECK(r.per_layer[1] == 0.0);
    CHECK(r.total <= 1e-14);
  }
  SUBCASE("hand computable") {
    const std::vector<Matrix> exact{Matrix{{-1, 0}, {0, 2}}};
    const std::vector<Matrix> approx{Matrix(2, 2)};
    CHECK(layerwise_error(approx, exact).per_layer[0] == doctest::Approx(std::sqrt(5.0)).epsilon(1e-14));
  }
  SUBCASE("total is the joint Frobenius norm") {
    const std::vector<Matrix> exact{Matrix{{-1, 0}, {0, 2}}, Matrix{{3}}};
    const std::vector<Matrix> approx{Matrix(2, 2), Matrix{{1}}};
    const ErrorReport r = layerwise_error(approx, exact);
    CHECK(r.total == doctest::Approx(std::sqrt(5.0 + 4.0)).epsilon(1e-14));
  }
  SUBCASE("shape mismatch") {
    const std::vector<Matrix> a{Matrix(2, 2)};
    const std::vector<Matrix> b{Matrix(3, 3)};
    CHECK_THROWS_AS(layerwise_error(a, b), DimensionError);
    const std::vector<Matrix> none;
    CHECK_THROWS_AS(layerwise_error(a, none), DimensionError);
  }
}

TEST_CASE("top-layer error vanishes for convex criteria") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const Problem p = random_problem(rng, {4, 6, 5, 3}, Activation::Sigmoid, 8);
    const Criterion ce = Criterion::cross_entropy();
    const auto exact = true_bias_hessian(p.model, p.trace, ce, p.labels);
    for (CurvatureKind kind : {CurvatureKind::gauss_newton(), CurvatureKind::pch1(), CurvatureKind::pch2()}) {
      const ErrorReport r = layerwise_error(hb_of(ea_curvature(p.model, p.trace, ce, p.labels, kind)), exact);
      CHECK(r.per_layer.back() <= 1e-10);
      double sq = 0.0;
      for (double e : r.per_layer) {
        CHECK(e >= 0.0);
        sq += e * e;
      }
      CHECK(r.total * r.total == doctest::Approx(sq).epsilon(1e-9));
    }
  }
}

TEST_CASE("covariance bound") {
  Rng rng(11);
  SUBCASE("identical instances give zero covariance and variance") {
    FcnnModel m = oracle::random_model(rng, {3, 4, 4, 2}, Activation::Sigmoid);
    Matrix x(5, 3);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j) x(i, j) = 0.1 * static_cast<double>(j + 1);
    const std::vector<std::size_t> y(5, 1);
    const ForwardTrace t = forward(m, x);
    for (std::size_t l = 1; l < 3; ++l) {
      const BoundCheck b = covariance_bound_check(m, t, Criterion::cross_entropy(), y, l, 0.25);
      CHECK(b.lhs == doctest::Approx(0.0));
      CHECK(b.rhs == doctest::Approx(0.0));
    }
  }
  SUBCASE("errors") {
    const Problem p = random_problem(rng, {3, 4, 2}, Activation::Sigmoid, 1);
    CHECK_THROWS_AS(covariance_bound_check(p.model, p.trace, Criterion::cross_entropy(), p.labels, 1, 0.25),
                    ConfigError);
    const Problem q = random_problem(rng, {3, 4, 2}, Activation::Sigmoid, 3);
    CHECK_THROWS_AS(covariance_bound_check(q.model, q.trace, Criterion::cross_entropy(), q.labels, 0, 0.25),
                    ConfigError);
    CHECK_THROWS_AS(covariance_bound_check(q.model, q.trace, Criterion::cross_entropy(), q.labels, 2, 0.25),
                    ConfigError);
  }
  SUBCASE("lhs and rhs agree with a direct evaluation") {
    const Problem p = random_problem(rng, {3, 5, 4, 3}, Activation::Sigmoid, 6);
    const Criterion crit = Criterion::sigmoid_gate();
    const CurvatureInputs in = curvature_inputs(p.model, p.trace, crit, p.labels);
    const std::size_t l = 2;
    const Matrix& w = p.model.layer(l).weight;
    const std::size_t n = w.cols();
    std::vector<Matrix> a, b;
    for (std::size_t i = 0; i < 6; ++i) {
      const Matrix h = instance_bias_hessian(p.model, p.trace, in, i)[l];
      a.push_back(oracle::naive_matmul(oracle::naive_matmul(oracle::naive_transpose(w), h), w));
      b.push_back(outer(p.trace.hprime[l].row(i), p.trace.hprime[l].row(i)));
    }
    double lhs = 0.0, var = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        double ma = 0, mb = 0, mab = 0, maa = 0;
        for (std::size_t i = 0; i < 6; ++i) {
          ma += a[i](r, c) / 6;
          mb += b[i](r, c) / 6;
          mab += a[i](r, c) * b[i](r, c) / 6;
          maa += a[i](r, c) * a[i](r, c) / 6;
        }
        lhs += (mab - ma * mb) * (mab - ma * mb);
        var += maa - ma * ma;
      }
    const BoundCheck bc = covariance_bound_check(p.model, p.trace, crit, p.labels, l, 0.25);
    CHECK(bc.lhs == doctest::Approx(lhs).epsilon(1e-9));
    CHECK(bc.rhs == doctest::Approx(std::pow(0.25, 4) * var).epsilon(1e-9));
  }
  SUBCASE("bound holds on random configurations") {
    for (int trial = 0; trial < 100; ++trial) {
      const Activation act = trial % 2 ? Activation::ReLU : Activation::Sigmoid;
      const Criterion crit = trial % 4 < 2 ? Criterion::cross_entropy() : Criterion::sigmoid_gate();
      auto widths = oracle::random_widths(rng, 4, 6);
      if (widths.size() < 3) widths.insert(widths.begin() + 1, 4);
      const Problem p = random_problem(rng, widths, act, 8);
      const std::size_t l = 1 + rng.below(p.model.depth() - 1);
      const BoundCheck bc =
          covariance_bound_check(p.model, p.trace, crit, p.labels, l, lipschitz_constant(act));
      CHECK(bc.lhs <= bc.rhs);
    }
  }
}

TEST_CASE("curvature kind names") {
  CHECK(CurvatureKind::pch1().name() == "PCH-1");
  CHECK(CurvatureKind::parse("pch2").gamma == 0.0);
  CHECK(CurvatureKind::parse("fisher").type == CurvatureKind::Type::Fisher);
  CHECK_THROWS_AS(CurvatureKind::parse("bogus"), ConfigError);
  CHECK_THROWS_AS((CurvatureKind{CurvatureKind::Type::Pch, 0.5}.validate()), ConfigError);
}

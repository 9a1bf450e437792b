#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "encap/capsule.hpp"
#include "encap/gradcheck.hpp"
#include "encap/sinkhorn.hpp"
#include "test_support.hpp"

using namespace encap;
using testing_support::max_abs_diff;
using testing_support::naive_conv_transpose;
using testing_support::randn;
using testing_support::randu;

namespace {

std::vector<double> random_cost(Rng& rng, std::int64_t n, std::int64_t m, double hi = 2.0) {
  std::vector<double> q(static_cast<std::size_t>(n * m));
  for (auto& x : q) x = rng.uniform(0.0, hi);
  return q;
}

double frobenius(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// <Q, P> + eps * sum P log P at the converged coupling.
double entropic_objective(const std::vector<double>& q, std::int64_t n, double eps, int iters) {
  const auto c = sinkhorn(q, n, n, eps, iters);
  double s = frobenius(q, c.P);
  for (double p : c.P) s += eps * p * std::log(p);
  return s;
}

}  // namespace

TEST_CASE("cosine cost examples") {
  auto a = Tensor::from({1.0, 0.0, 1.0, 0.0, -2.0, 0.0}, {3, 2});
  auto b = Tensor::from({3.0, 0.0, 0.0, 5.0}, {2, 2});
  auto q = cost_matrix(a, b, CostKind::cosine);
  CHECK(q.shape() == Shape{3, 2});
  CHECK(q.at({0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(q.at({0, 1}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(q.at({2, 0}) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("squared l2 cost") {
  auto a = Tensor::from({1.0, 2.0}, {1, 2});
  auto b = Tensor::from({4.0, 6.0, 1.0, 2.0}, {2, 2});
  auto q = cost_matrix(a, b, CostKind::l2);
  CHECK(q.at({0, 0}) == doctest::Approx(25.0));
  CHECK(q.at({0, 1}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(cost_matrix(a, Tensor::ones({2, 3}), CostKind::l2), ShapeError);
}

TEST_CASE("zero cost gives the uniform coupling") {
  auto c = sinkhorn(std::vector<double>(12, 0.0), 3, 4, 0.1, 10);
  for (double p : c.P) CHECK(p == doctest::Approx(1.0 / 12).epsilon(1e-14));
  for (double r : c.row_sums()) CHECK(std::abs(r - 1.0 / 3) < 1e-15);
  for (double s : c.col_sums()) CHECK(std::abs(s - 1.0 / 4) < 1e-15);
  auto Q = Tensor::zeros({3, 4});
  CHECK(ot_loss(Q, {}).item() == 0.0);
}

TEST_CASE("anti-diagonal cost concentrates mass on the diagonal") {
  const std::vector<double> q{0.0, 1.0, 1.0, 0.0};
  auto c = sinkhorn(q, 2, 2, 0.1, 10);
  // Symmetric problem, so P is proportional to K: off-diagonal = 0.5 / (1 + e^10).
  const double off = 0.5 / (1.0 + std::exp(10.0));
  CHECK(c.P[1] == doctest::Approx(off).epsilon(1e-9));
  CHECK(c.P[0] == doctest::Approx(0.5 - off).epsilon(1e-12));
  CHECK(std::abs(c.P[0] - 0.5) < 1e-4);
  const double loss = ot_loss(Tensor::from(q, {2, 2}), {.eps = 0.1, .iters = 10}).item();
  CHECK(loss < 1e-4);
  CHECK(brute_force_ot(q, 2) == 0.0);
  double prev = loss;
  for (double eps : {0.05, 0.02, 0.01}) {
    const double l = ot_loss(Tensor::from(q, {2, 2}), {.eps = eps, .iters = 50}).item();
    CHECK(l <= prev);
    prev = l;
  }
  CHECK(prev < 1e-12);
}

TEST_CASE("permuting rows of Q permutes rows of P") {
  Rng rng(1);
  const auto q = random_cost(rng, 4, 5);
  const int perm[] = {2, 0, 3, 1};
  std::vector<double> qp;
  for (int r : perm) qp.insert(qp.end(), q.begin() + r * 5, q.begin() + r * 5 + 5);
  auto a = sinkhorn(q, 4, 5, 0.1, 10), b = sinkhorn(qp, 4, 5, 0.1, 10);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 5; ++c)
      CHECK(b.P[r * 5 + c] == doctest::Approx(a.P[perm[r] * 5 + c]).epsilon(1e-12));
}

TEST_CASE("constant cost gives loss equal to the constant") {
  auto Q = Tensor::full({4, 3}, 0.7);
  CHECK(ot_loss(Q, {}).item() == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("coupling marginals") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_cost(rng, 6, 6);
    // The last update rescales rows, so they are exact at any L.
    for (double r : sinkhorn(q, 6, 6, 0.1, 10).row_sums()) CHECK(std::abs(r - 1.0 / 6) < 1e-6);
    // Columns lag by a half step and close up as the iterates converge.
    const auto c = sinkhorn(q, 6, 6, 0.5, 2000);
    for (double s : c.col_sums()) CHECK(std::abs(s - 1.0 / 6) < 1e-9);
  }
}

TEST_CASE("each half step raises the dual objective") {
  // With f = eps log b and g = eps log a, Sinkhorn is block coordinate ascent on
  // <r, f> + <c, g> - eps sum exp((f + g - Q) / eps).
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t n = 3 + trial % 4;
    const auto q = random_cost(rng, n, n);
    const double eps = 0.1;
    auto dual = [&](const Coupling& c) {
      double d = 0, mass = 0;
      for (std::int64_t x = 0; x < n; ++x) d += eps * c.log_b[x] / static_cast<double>(n);
      for (std::int64_t y = 0; y < n; ++y) d += eps * c.log_a[y] / static_cast<double>(n);
      for (double p : c.P) mass += p;
      return d - eps * mass;
    };
    double prev = -std::numeric_limits<double>::infinity();
    for (int L : {1, 2, 5, 10, 50}) {
      const double d = dual(sinkhorn(q, n, n, eps, L));
      CHECK(d >= prev - 1e-12);
      prev = d;
    }
  }
}

TEST_CASE("transport cost converges as iterations grow") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t n = 3 + trial % 4;
    const auto q = random_cost(rng, n, n);
    const double limit = frobenius(q, sinkhorn(q, n, n, 0.5, 4000).P);
    const double at1 = std::abs(frobenius(q, sinkhorn(q, n, n, 0.5, 1).P) - limit);
    const double at2000 = std::abs(frobenius(q, sinkhorn(q, n, n, 0.5, 2000).P) - limit);
    CHECK(at2000 <= at1);
    CHECK(at2000 < 1e-9);
  }
}

TEST_CASE("small-eps Sinkhorn matches the permutation optimum") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t n = 3;
    const auto q = random_cost(rng, n, n);
    const double exact = brute_force_ot(q, n);
    const double approx = ot_loss(Tensor::from(q, {n, n}), {.eps = 0.01, .iters = 200}).item();
    CHECK(std::abs(approx - exact) <= std::max(0.02 * exact, 1e-3));
  }
}

TEST_CASE("brute-force optimum examples") {
  CHECK(brute_force_ot({0, 1, 1, 0}, 2) == 0.0);
  CHECK(brute_force_ot(std::vector<double>(16, 1.0), 4) == doctest::Approx(1.0));
  CHECK_THROWS_AS(brute_force_ot(std::vector<double>(49, 1.0), 7), ConfigError);
}

TEST_CASE("entropic coupling cost is within eps log n of the optimum") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t n = 4;
    const auto q = random_cost(rng, n, n);
    const double eps = 0.1;
    const double exact = brute_force_ot(q, n);
    const double cost = frobenius(q, sinkhorn(q, n, n, eps, 500).P);
    CHECK(exact <= cost + 1e-9);
    CHECK(cost <= exact + eps * std::log(static_cast<double>(n)) + 1e-9);
  }
}

TEST_CASE("Sinkhorn rejects bad arguments") {
  CHECK_THROWS_AS(sinkhorn({0, 0, 0, 0}, 2, 2, 0.0, 10), ConfigError);
  CHECK_THROWS_AS(sinkhorn({0, 0, 0, 0}, 2, 2, 0.1, 0), ConfigError);
  CHECK_THROWS_AS(sinkhorn({0, 0, 0}, 2, 2, 0.1, 10), ShapeError);
  CHECK_THROWS_AS(sinkhorn({0, 0, 0, NAN}, 2, 2, 0.1, 10), NumericError);
}

TEST_CASE("large cost over small eps stays finite") {
  Rng rng(6);
  auto q = random_cost(rng, 5, 5, 50.0);
  auto c = sinkhorn(q, 5, 5, 0.01, 20);
  for (double p : c.P) CHECK(std::isfinite(p));
  auto Q32 = Tensor::from(q, {5, 5}, DType::f32);
  CHECK(std::isfinite(ot_loss(Q32, {.eps = 0.01, .iters = 20}).item()));
}

TEST_CASE("stop-gradient: dL/dQ is the coupling") {
  Rng rng(7);
  auto Q = randu(rng, {4, 4}, 0.0, 2.0);
  Q.set_requires_grad(true);
  ot_loss(Q, {.eps = 0.1, .iters = 10}).backward();
  const auto c = sinkhorn(Q.to_vector(), 4, 4, 0.1, 10);
  const auto g = Q.grad().to_vector();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(c.P[i]).epsilon(1e-14));
}

TEST_CASE("stop-gradient coupling is the derivative of the entropic objective") {
  // At convergence the envelope theorem gives d/dQ min_P (<Q,P> + eps sum P log P) = P.
  Rng rng(8);
  const std::int64_t n = 4;
  const double eps = 0.5, h = 1e-5;
  const int iters = 400;
  const auto q = random_cost(rng, n, n);
  auto Q = Tensor::from(q, {n, n});
  Q.set_requires_grad(true);
  ot_loss(Q, {.eps = eps, .iters = iters}).backward();
  const auto g = Q.grad().to_vector();
  double num = 0, den = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    auto qp = q, qm = q;
    qp[i] += h;
    qm[i] -= h;
    const double fd = (entropic_objective(qp, n, eps, iters) - entropic_objective(qm, n, eps, iters)) /
                      (2 * h);
    num += (fd - g[i]) * (fd - g[i]);
    den += g[i] * g[i];
  }
  CHECK(std::sqrt(num / den) < 1e-4);
}

TEST_CASE("differentiating through the iterates matches finite differences") {
  Rng rng(9);
  auto Q = randu(rng, {3, 4}, 0.0, 2.0);
  auto r = gradcheck([&] { return ot_loss(Q, {.eps = 0.3, .iters = 8, .stop_gradient = false}); },
                     {Q});
  CHECK(r.max_rel_err < 1e-4);
  // Forward values of both paths agree.
  CHECK(ot_loss(Q, {.eps = 0.3, .iters = 8, .stop_gradient = false}).item() ==
        doctest::Approx(ot_loss(Q, {.eps = 0.3, .iters = 8}).item()).epsilon(1e-12));
}

TEST_CASE("divergence of a set with itself is zero") {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto s = randn(rng, {5, 4});
    CHECK(std::abs(sinkhorn_divergence(s, s, {}).item()) < 1e-9);
  }
}

TEST_CASE("debiased divergence is symmetric once the iterates converge") {
  Rng rng(11);
  auto x = randn(rng, {4, 3}), y = randn(rng, {4, 3});
  for (auto cost : {CostKind::cosine, CostKind::l2}) {
    OtConfig cfg{.eps = 0.5, .iters = 3000, .cost = cost};
    CHECK(sinkhorn_divergence(x, y, cfg).item() ==
          doctest::Approx(sinkhorn_divergence(y, x, cfg).item()).epsilon(1e-9));
  }
}

TEST_CASE("divergence grows with cluster separation") {
  Rng rng(12);
  auto base = randn(rng, {4, 2}, 0.1);
  auto shifted = [&](double dx) {
    auto t = randn(rng, {4, 2}, 0.1);
    return t + Tensor::from({dx, 0.0}, {1, 2});
  };
  OtConfig cfg{.cost = CostKind::l2};
  const double near = sinkhorn_divergence(base, shifted(0.5), cfg).item();
  const double far = sinkhorn_divergence(base, shifted(3.0), cfg).item();
  CHECK(far > near);
  // The plain transport cost between the two far sets is bounded below by the exact optimum.
  auto y = shifted(3.0);
  const double exact = brute_force_ot(cost_matrix(base, y, CostKind::l2).to_vector(), 4);
  CHECK(exact > 8.0);
}

TEST_CASE("KL alternative") {
  auto p = Tensor::from({1.0, 0.0}, {1, 2});
  auto q = Tensor::from({0.5, 0.5}, {1, 2});
  CHECK(kl_divergence(p, q).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(kl_divergence(q, q).item() == 0.0);
  Rng rng(13);
  auto f = randn(rng, {3, 6});
  CHECK(std::abs(kl_alternative(f, f).item()) < 1e-15);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = softmax(randn(rng, {2, 5}, 2.0), 1), b = softmax(randn(rng, {2, 5}, 2.0), 1);
    CHECK(kl_divergence(a, b).item() >= 0.0);
  }
}

TEST_CASE("generator shapes and composition") {
  Rng rng(14);
  SUBCASE("stride 1 keeps the grid") {
    auto g = Generator::make(rng, 2, 4, 2, 4, 1, DType::f64);
    auto v = randn(rng, {2, 8, 5, 5});
    CHECK(g.forward(v, true).shape() == v.shape());
  }
  SUBCASE("stride 2 doubles the grid and matches the scatter form") {
    auto g = Generator::make(rng, 4, 4, 2, 6, 2, DType::f64);
    auto v = randn(rng, {2, 16, 4, 4});
    auto out = g.forward(v, true);
    CHECK(out.shape() == Shape{2, 12, 8, 8});
    auto pre = naive_conv_transpose(v, g.deconv.weight, g.deconv.args);
    CHECK(pre.shape() == Shape{2, 12, 8, 8});
    BatchNorm bn = BatchNorm::make(12, DType::f64);
    auto ref = squash_grid(relu(bn.forward(pre, true)), 6);
    CHECK(max_abs_diff(out, ref) < 1e-12);
    for (double n : capsule_norms(grid_to_capsules(out, 6)).to_vector()) CHECK(n < 1.0);
  }
  SUBCASE("incompatible grouping") {
    CHECK_THROWS_AS(Generator::make(rng, 2, 4, 1, 3, 1, DType::f64), ConfigError);
    CHECK_THROWS_AS(Generator::make(rng, 2, 4, 2, 4, 3, DType::f64), ConfigError);
  }
}

TEST_CASE("extractor shapes and degenerate inputs") {
  Rng rng(15);
  auto e = Extractor::make(rng, 32, DType::f64);
  auto x = randn(rng, {3, 32, 8, 8});
  auto mid = e.first.forward(x, true);
  CHECK(mid.shape() == Shape{3, 8, 4, 4});
  CHECK(e.forward(x, true).shape() == Shape{3, 4});
  for (double f : e.forward(Tensor::zeros({3, 32, 8, 8}), true).to_vector()) CHECK(f == 0.0);
  CHECK(max_abs_diff(e.forward(x, false), e.forward(x, false)) == 0.0);
  CHECK_THROWS_AS(Extractor::make(rng, 3, DType::f64), ConfigError);
}

TEST_CASE("generator gradient") {
  Rng rng(16);
  auto g = Generator::make(rng, 2, 3, 2, 3, 2, DType::f64);
  auto v = randn(rng, {2, 6, 3, 3});
  auto w = randn(rng, {2, 6, 6, 6});
  auto r = gradcheck([&] { return sum(g.forward(v, true) * w); },
                     {v, g.deconv.weight, g.bn.gamma, g.bn.beta}, {"v", "deconv", "gamma", "beta"});
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("extractor gradient") {
  Rng rng(17);
  auto e = Extractor::make(rng, 8, DType::f64);
  auto x = randn(rng, {3, 8, 8, 8});
  auto w = randn(rng, {3, 4});
  auto r = gradcheck([&] { return sum(e.forward(x, true) * w); },
                     {x, e.first.conv.weight, e.second.conv.weight, e.first.bn.gamma,
                      e.second.bn.beta},
                     {"x", "conv1", "conv2", "gamma1", "beta2"});
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("agreement unit produces a finite divergence and gradients") {
  Rng rng(18);
  auto unit = AgreementUnit::make(rng, 2, 4, 2, 2, 2, DType::f64);
  auto v = randn(rng, {4, 8, 4, 4});
  auto u = squash_grid(randn(rng, {4, 4, 8, 8}), 2);
  for (auto kind : {Regularizer::ot, Regularizer::kl}) {
    auto l = unit.loss(v, u, kind, {}, true);
    CHECK(std::isfinite(l.item()));
  }
  CHECK_THROWS_AS(unit.loss(v, squash_grid(randn(rng, {4, 4, 6, 6}), 2), Regularizer::ot, {}, true),
                  ConfigError);
}

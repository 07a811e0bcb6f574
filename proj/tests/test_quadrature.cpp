#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "sstab/quadrature.hpp"

using namespace sstab;

namespace {

double integrate(const Quadrature1D& q, int monomial_power) {
  double s = 0.0;
  for (int i = 0; i < q.num_points(); ++i)
    s += q.weights[i] * std::pow(q.nodes[i], monomial_power);
  return s;
}

double exact_monomial_integral(int p) { return (p % 2 == 1) ? 0.0 : 2.0 / (p + 1); }

}  // namespace

TEST_CASE("legendre_eval basics") {
  CHECK(legendre_eval(0, 0.3) == 1.0);
  CHECK(legendre_eval(1, 0.5) == 0.5);
  // L_3 = (5x^3 - 3x)/2
  CHECK(legendre_eval(3, 0.5) == doctest::Approx(-0.4375).epsilon(1e-15));
  for (int k = 0; k <= 12; ++k)
    for (double x = -1.0; x <= 1.0; x += 0.125) CHECK(std::abs(legendre_eval(k, x)) <= 1.0 + 1e-14);
}

TEST_CASE("GLL closed forms for small N") {
  auto q1 = build_quadrature(QuadKind::GLL, 1);
  REQUIRE(q1.num_points() == 2);
  CHECK(q1.nodes[0] == -1.0);
  CHECK(q1.nodes[1] == 1.0);
  CHECK(q1.weights[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(q1.weights[1] == doctest::Approx(1.0).epsilon(1e-15));

  auto q2 = build_quadrature(QuadKind::GLL, 2);
  REQUIRE(q2.num_points() == 3);
  CHECK(q2.nodes[1] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(q2.weights[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(q2.weights[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
  CHECK(q2.weights[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto q4 = build_quadrature(QuadKind::GLL, 4);
  REQUIRE(q4.num_points() == 5);
  CHECK(q4.nodes[0] == -1.0);
  CHECK(q4.nodes[1] == doctest::Approx(-std::sqrt(3.0 / 7.0)).epsilon(1e-14));
  CHECK(q4.nodes[2] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(q4.nodes[3] == doctest::Approx(std::sqrt(3.0 / 7.0)).epsilon(1e-14));
  CHECK(q4.nodes[4] == 1.0);
}

TEST_CASE("quadrature invariants: weight sum, ordering, exactness boundary") {
  for (int n = 1; n <= 12; ++n) {
    auto q = build_quadrature(QuadKind::GLL, n);
    double wsum = 0.0;
    for (double w : q.weights) {
      CHECK(w > 0.0);
      wsum += w;
    }
    CHECK(wsum == doctest::Approx(2.0).epsilon(1e-14));
    for (int i = 1; i < q.num_points(); ++i) CHECK(q.nodes[i] > q.nodes[i - 1]);
    CHECK(q.nodes.front() == -1.0);
    CHECK(q.nodes.back() == 1.0);

    // exact through 2N-1, and x^{2N} must show a nonzero defect
    for (int p = 0; p <= 2 * n - 1; ++p)
      CHECK(integrate(q, p) == doctest::Approx(exact_monomial_integral(p)).epsilon(1e-13));
    CHECK(std::abs(integrate(q, 2 * n) - exact_monomial_integral(2 * n)) > 1e-13);
  }
  for (int n = 2; n <= 12; ++n) {
    auto q = build_quadrature(QuadKind::GL, n);
    REQUIRE(q.num_points() == n - 1);
    double wsum = 0.0;
    for (double w : q.weights) wsum += w;
    CHECK(wsum == doctest::Approx(2.0).epsilon(1e-14));
    for (int i = 1; i < q.num_points(); ++i) CHECK(q.nodes[i] > q.nodes[i - 1]);
    for (int p = 0; p <= 2 * n - 3; ++p)
      CHECK(integrate(q, p) == doctest::Approx(exact_monomial_integral(p)).epsilon(1e-13));
  }
  CHECK(std::abs(integrate(build_quadrature(QuadKind::GLL, 7), 13)) < 1e-13);
  CHECK_THROWS_AS(build_quadrature(QuadKind::GLL, 0), std::invalid_argument);
  CHECK_THROWS_AS(build_quadrature(QuadKind::GL, 1), std::invalid_argument);
}

TEST_CASE("differentiation matrix") {
  auto q2 = build_quadrature(QuadKind::GLL, 2);
  auto d2 = build_diff_matrix(q2);
  CHECK(d2.role == OperatorRole::Differentiation);
  std::vector<double> ones(3, 1.0), x = q2.nodes;
  auto dc = matvec(d2.mat, ones);
  auto dx = matvec(d2.mat, x);
  for (double v : dc) CHECK(std::abs(v) < 1e-13);
  for (double v : dx) CHECK(v == doctest::Approx(1.0).epsilon(1e-13));

  auto q4 = build_quadrature(QuadKind::GLL, 4);
  auto d4 = build_diff_matrix(q4);
  std::vector<double> x4(5);
  for (int i = 0; i < 5; ++i) x4[i] = std::pow(q4.nodes[i], 4);
  auto dx4 = matvec(d4.mat, x4);
  for (int i = 0; i < 5; ++i)
    CHECK(dx4[i] == doctest::Approx(4.0 * std::pow(q4.nodes[i], 3)).epsilon(1e-12));

  // row sums vanish for all orders used in production
  for (int n : {3, 7, 11}) {
    auto q = build_quadrature(QuadKind::GLL, n);
    auto d = build_diff_matrix(q);
    for (int i = 0; i <= n; ++i) {
      double s = 0.0;
      for (int j = 0; j <= n; ++j) s += d.mat(i, j);
      CHECK(std::abs(s) < 1e-13);
    }
  }
  CHECK_THROWS_AS(build_diff_matrix(build_quadrature(QuadKind::GL, 7)), std::invalid_argument);
}

TEST_CASE("interpolation matrix") {
  auto q7 = build_quadrature(QuadKind::GLL, 7);

  auto ident = build_interp_matrix(q7.nodes, q7.nodes);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) CHECK(ident.mat(i, j) == (i == j ? 1.0 : 0.0));

  // child half-interval [-1, 0]
  std::vector<double> half(8);
  for (int i = 0; i < 8; ++i) half[i] = -0.5 + 0.5 * q7.nodes[i];
  auto to_child = build_interp_matrix(q7.nodes, half);
  std::vector<double> x7(8);
  for (int i = 0; i < 8; ++i) x7[i] = std::pow(q7.nodes[i], 7);
  auto on_child = matvec(to_child.mat, x7);
  for (int i = 0; i < 8; ++i)
    CHECK(on_child[i] == doctest::Approx(std::pow(half[i], 7)).epsilon(1e-12));

  // overintegration grid: constants map to constants
  auto m11 = gauss_rule(11);
  auto to_fine = build_interp_matrix(q7.nodes, m11.nodes);
  std::vector<double> c(8, 3.25);
  for (double v : matvec(to_fine.mat, c)) CHECK(v == doctest::Approx(3.25).epsilon(1e-13));

  CHECK_THROWS_AS(build_interp_matrix({0.0, 0.0, 1.0}, {0.5}), std::invalid_argument);
}

TEST_CASE("nodal-modal transform") {
  auto q = build_quadrature(QuadKind::GLL, 7);

  std::vector<double> ones(8, 1.0);
  auto m0 = nodal_to_modal(ones, q);
  CHECK(m0[0] == doctest::Approx(1.0).epsilon(1e-14));
  for (int k = 1; k <= 7; ++k) CHECK(std::abs(m0[k]) < 1e-13);

  std::vector<double> l2(8);
  for (int i = 0; i < 8; ++i) l2[i] = legendre_eval(2, q.nodes[i]);
  auto m2 = nodal_to_modal(l2, q);
  CHECK(m2[2] == doctest::Approx(1.0).epsilon(1e-13));
  for (int k = 0; k <= 7; ++k)
    if (k != 2) CHECK(std::abs(m2[k]) < 1e-13);

  auto m1 = nodal_to_modal(q.nodes, q);
  CHECK(m1[1] == doctest::Approx(1.0).epsilon(1e-13));
  for (int k = 0; k <= 7; ++k)
    if (k != 1) CHECK(std::abs(m1[k]) < 1e-13);
}

TEST_CASE("modal round trip is the identity on polynomial data") {
  std::mt19937_64 rng(1234);
  std::uniform_real_distribution<double> coeff(-1.0, 1.0);
  for (int n : {3, 5, 7}) {
    auto q = build_quadrature(QuadKind::GLL, n);
    for (int trial = 0; trial < 120; ++trial) {
      std::vector<double> poly(n + 1);
      for (auto& c : poly) c = coeff(rng);
      std::vector<double> values(q.num_points(), 0.0);
      for (int i = 0; i < q.num_points(); ++i) {
        double xp = 1.0;
        for (int d = 0; d <= n; ++d) {
          values[i] += poly[d] * xp;
          xp *= q.nodes[i];
        }
      }
      auto back = modal_to_nodal(nodal_to_modal(values, q), q);
      for (int i = 0; i < q.num_points(); ++i)
        CHECK(back[i] == doctest::Approx(values[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("decay fit") {
  ModalCoefficients exact(8), scaled(8);
  for (int k = 0; k < 8; ++k) exact[k] = std::exp(-double(k));
  auto f = fit_decay(exact);
  REQUIRE(f.has_value());
  CHECK(f->c == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f->sigma == doctest::Approx(1.0).epsilon(1e-12));

  for (int k = 0; k < 8; ++k) scaled[k] = 2.0 * std::exp(-0.5 * k);
  auto g = fit_decay(scaled);
  REQUIRE(g.has_value());
  CHECK(g->c == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(g->sigma == doctest::Approx(0.5).epsilon(1e-12));

  // scaling invariance: same sigma, amplitude scales
  ModalCoefficients alpha(8);
  for (int k = 0; k < 8; ++k) alpha[k] = 7.5 * exact[k];
  auto h = fit_decay(alpha);
  REQUIRE(h.has_value());
  CHECK(h->sigma == doctest::Approx(f->sigma).epsilon(1e-12));
  CHECK(h->c == doctest::Approx(7.5 * f->c).epsilon(1e-12));

  ModalCoefficients degenerate{0, 1, 0, 0, 0, 0, 0, 0};
  CHECK(!fit_decay(degenerate).has_value());
}

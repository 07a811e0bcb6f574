#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "sstab/eigen_dense.hpp"
#include "sstab/mesh_builders.hpp"
#include "sstab/sfd.hpp"

using namespace sstab;

namespace {

std::shared_ptr<const Space> unit_square(int cells, int order) {
  return Space::build(
      build_rectangle_mesh(uniform_breaks(0, 1, cells), uniform_breaks(0, 1, cells),
                           {BoundaryTag::Wall, BoundaryTag::Wall, BoundaryTag::Wall,
                            BoundaryTag::Wall}),
      order);
}

}  // namespace

TEST_CASE("sfd_force closed forms") {
  auto space = unit_square(2, 4);
  StepperConfig cfg;
  FlowSolver solver(space, cfg, homogeneous_bc());
  FlowState st = solver.make_state();
  for (auto& x : st.u) x = 1.0;

  SFDState sfd = make_sfd_state(st, 0.5, 4.05);
  std::vector<double> fu, fv;
  sfd_force(solver, st, sfd, fu, fv);
  for (double v : fu) CHECK(v == 0.0);  // u == w initially

  sfd.wu.assign(st.u.size(), 0.0);  // u - w = (1, 0)
  sfd_force(solver, st, sfd, fu, fv);
  for (double v : fu) CHECK(v == doctest::Approx(-0.5).epsilon(1e-15));
  for (double v : fv) CHECK(v == 0.0);

  sfd.chi = 0.0;
  sfd_force(solver, st, sfd, fu, fv);
  for (double v : fu) CHECK(v == 0.0);

  SFDState other = sfd;
  other.wu.resize(3);
  CHECK_THROWS_AS(sfd_force(solver, st, other, fu, fv), std::invalid_argument);
}

TEST_CASE("filter update integrates the exponential relaxation") {
  auto space = unit_square(2, 3);
  StepperConfig cfg;
  FlowSolver solver(space, cfg, homogeneous_bc());
  FlowState st = solver.make_state();
  const int n = solver.ndof();

  // u held constant at 1, w starts at 0: w(t) = 1 - exp(-t / Delta)
  const double delta = 0.8, dt = 0.01;
  std::vector<double> uconst(n, 1.0), vconst(n, 0.0);
  SFDState sfd;
  sfd.chi = 0.5;
  sfd.delta = delta;
  sfd.wu.assign(n, 0.0);
  sfd.wv.assign(n, 0.0);
  double t = 0.0;
  for (int k = 0; k < 100; ++k) {
    sfd_filter_update(sfd, uconst, vconst, t, t + dt);
    t += dt;
  }
  const double expected = 1.0 - std::exp(-t / delta);
  for (double w : sfd.wu) CHECK(w == doctest::Approx(expected).epsilon(1e-4));

  // u == w: no motion
  SFDState frozen;
  frozen.delta = delta;
  frozen.wu.assign(n, 0.7);
  frozen.wv.assign(n, 0.0);
  std::vector<double> usame(n, 0.7);
  sfd_filter_update(frozen, usame, vconst, 0.0, dt);
  for (double w : frozen.wu) CHECK(w == doctest::Approx(0.7).epsilon(1e-14));

  // Delta -> infinity: w effectively frozen
  SFDState wide;
  wide.delta = 1e12;
  wide.wu.assign(n, 0.0);
  wide.wv.assign(n, 0.0);
  double tt = 0.0;
  for (int k = 0; k < 50; ++k) {
    sfd_filter_update(wide, uconst, vconst, tt, tt + dt);
    tt += dt;
  }
  for (double w : wide.wu) CHECK(std::abs(w) < 1e-9);
}

TEST_CASE("convergence indicator norms") {
  auto space = unit_square(3, 5);
  StepperConfig cfg;
  FlowSolver solver(space, cfg, homogeneous_bc());
  FlowState st = solver.make_state();
  SFDState sfd = make_sfd_state(st, 0.5, 4.05);
  CHECK(sfd_convergence(solver, st, sfd).eps == 0.0);

  for (auto& x : st.u) x += 0.3;  // u - w = (0.3, 0) on the unit square
  auto c = sfd_convergence(solver, st, sfd);
  CHECK(c.eps_u == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(c.eps_v == 0.0);
  CHECK(c.eps == doctest::Approx(0.3).epsilon(1e-12));

  // exact transfer of a polynomial difference field leaves eps unchanged
  Field diff(space, {"u", "v"});
  for (int e = 0; e < space->mesh.num_leaves(); ++e)
    for (int q = 0; q < space->npe; ++q)
      diff.data[0][e * space->npe + q] = space->geom[e].x[q] * (1.0 - space->geom[e].x[q]) *
                                         space->geom[e].y[q] * (1.0 - space->geom[e].y[q]);
  FlowState fs = solver.make_state();
  solver.set_velocity(fs, diff);
  SFDState zero = make_sfd_state(fs, 0.5, 4.05);
  for (auto& x : zero.wu) x = 0.0;
  const double eps0 = sfd_convergence(solver, fs, zero).eps;

  auto r = space->mesh.refine({0, 4});
  auto fine = Space::build(r.mesh, 5);
  Field diff_f = transfer_field(diff, r.corr, fine);
  FlowSolver fsolver(fine, cfg, homogeneous_bc());
  FlowState fst = fsolver.make_state();
  fsolver.set_velocity(fst, diff_f);
  SFDState fzero = make_sfd_state(fst, 0.5, 4.05);
  for (auto& x : fzero.wu) x = 0.0;
  const double eps1 = sfd_convergence(fsolver, fst, fzero).eps;
  CHECK(std::abs(eps1 - eps0) / eps0 < 1e-10);
}

TEST_CASE("feedback stability predictor against the dense eigensolver") {
  auto oracle_stable = [](std::complex<double> lambda, double chi, double delta) {
    CMat m(2, 2);
    m(0, 0) = lambda - chi;
    m(0, 1) = chi;
    m(1, 0) = 1.0 / delta;
    m(1, 1) = -1.0 / delta;
    auto eig = eig_dense(m);
    return eig.values[0].real() < 0.0 && eig.values[1].real() < 0.0;
  };

  CHECK(sfd_predicts_stable({-1.0, 0.0}, 0.5, 4.05));
  CHECK(oracle_stable({-1.0, 0.0}, 0.5, 4.05));

  const std::complex<double> cyl(0.0178, 0.768);
  CHECK(sfd_predicts_stable(cyl, 0.5, 4.05));
  CHECK(oracle_stable(cyl, 0.5, 4.05));

  CHECK(!sfd_predicts_stable(cyl, 0.0, 4.05));
  CHECK(!oracle_stable(cyl, 0.0, 4.05));

  // random sweep agrees with the oracle
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    const std::complex<double> lam(0.2 * u(rng), u(rng));
    const double chi = 0.5 + 0.5 * u(rng);
    const double delta = 2.0 + 1.9 * u(rng);
    CHECK(sfd_predicts_stable(lam, chi, delta) == oracle_stable(lam, chi, delta));
  }
}

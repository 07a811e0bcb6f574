#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "sstab/mesh_builders.hpp"
#include "sstab/navier_stokes.hpp"

using namespace sstab;

namespace {

std::shared_ptr<const Space> periodic_box(int cells, int order, double len = 2.0 * M_PI) {
  return Space::build(build_rectangle_mesh(uniform_breaks(0, len, cells),
                                           uniform_breaks(0, len, cells),
                                           {BoundaryTag::None, BoundaryTag::None,
                                            BoundaryTag::None, BoundaryTag::None},
                                           true, true),
                      order);
}

void fill(Field& f, int var, const std::function<double(double, double)>& fn) {
  const Space& s = *f.space;
  for (int e = 0; e < s.mesh.num_leaves(); ++e)
    for (int q = 0; q < s.npe; ++q)
      f.data[var][static_cast<size_t>(e) * s.npe + q] = fn(s.geom[e].x[q], s.geom[e].y[q]);
}

double max_nodal_error(const Field& f, int var, const std::function<double(double, double)>& fn) {
  const Space& s = *f.space;
  double m = 0.0;
  for (int e = 0; e < s.mesh.num_leaves(); ++e)
    for (int q = 0; q < s.npe; ++q)
      m = std::max(m, std::abs(f.data[var][static_cast<size_t>(e) * s.npe + q] -
                               fn(s.geom[e].x[q], s.geom[e].y[q])));
  return m;
}

}  // namespace

TEST_CASE("multistep weights are exact on polynomials") {
  // BDF3 on nonuniform levels: derivative of t^3 at t0
  std::vector<double> times{1.7, 1.5, 1.2, 1.0};
  auto c = bdf_weights(times);
  double d = 0.0;
  for (size_t j = 0; j < times.size(); ++j) d += c[j] * std::pow(times[j], 3);
  CHECK(d == doctest::Approx(3.0 * 1.7 * 1.7).epsilon(1e-12));

  auto e = ext_weights(2.0, {1.5, 1.2, 1.0});
  double v = 0.0;
  for (size_t j = 0; j < 3; ++j) v += e[j] * (std::pow(1.0 + times[j + 1], 2));
  CHECK(v == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("advect: linearized and nonlinear closed forms") {
  auto space = periodic_box(4, 7);
  StepperConfig cfg;
  cfg.mode = StepMode::Linearized;
  FlowSolver lin(space, cfg);

  Field base(space, {"u", "v"});
  fill(base, 0, [](double, double) { return 1.0; });
  lin.set_base_flow(base);

  Field zero(space, {"u", "v"});
  Field out = lin.advect(zero);
  for (double v : out.data[0]) CHECK(std::abs(v) < 1e-14);

  Field pert(space, {"u", "v"});
  fill(pert, 0, [](double x, double) { return std::sin(x); });
  Field conv = lin.advect(pert);
  // spectral accuracy at 4 elements per 2*pi, order 7
  CHECK(max_nodal_error(conv, 0, [](double x, double) { return std::cos(x); }) < 1e-5);
  CHECK(max_nodal_error(conv, 1, [](double, double) { return 0.0; }) < 1e-9);

  StepperConfig ncfg;
  ncfg.mode = StepMode::Nonlinear;
  FlowSolver nl(space, ncfg, homogeneous_bc());
  Field shear(space, {"u", "v"});
  fill(shear, 0, [](double, double y) { return y; });
  Field sconv = nl.advect(shear);
  // (u.grad)u = y d/dx (y,0) = 0; interface jumps of the periodic y-ramp stay local
  double interior_max = 0.0;
  for (int e = 0; e < space->mesh.num_leaves(); ++e)
    for (int j = 2; j < space->np - 2; ++j)
      for (int i = 2; i < space->np - 2; ++i)
        interior_max = std::max(interior_max,
                                std::abs(sconv.data[0][e * space->npe + j * space->np + i]));
  CHECK(interior_max < 1e-8);
}

TEST_CASE("zero state with zero boundary data stays zero") {
  auto space = Space::build(
      build_rectangle_mesh(uniform_breaks(0, 1, 2), uniform_breaks(0, 1, 2),
                           {BoundaryTag::Wall, BoundaryTag::Wall, BoundaryTag::Wall,
                            BoundaryTag::Wall}),
      5);
  StepperConfig cfg;
  FlowSolver solver(space, cfg, homogeneous_bc());
  FlowState st = solver.make_state();
  st.dt = 0.01;
  for (int k = 0; k < 5; ++k) solver.step(st);
  for (double v : st.u) CHECK(v == 0.0);
  for (double v : st.v) CHECK(v == 0.0);
}

TEST_CASE("Taylor-Green vortex: energy decay and divergence control") {
  auto space = periodic_box(4, 7);
  StepperConfig cfg;
  cfg.re = 20.0;  // nu = 0.05 in box units
  cfg.dt_max = 0.01;
  FlowSolver solver(space, cfg, homogeneous_bc());

  Field ic(space, {"u", "v"});
  fill(ic, 0, [](double x, double y) { return std::sin(x) * std::cos(y); });
  fill(ic, 1, [](double x, double y) { return -std::cos(x) * std::sin(y); });
  FlowState st = solver.make_state();
  solver.set_velocity(st, ic);

  const double e0 = FlowSolver::perturbation_energy(solver.velocity_field(st));
  const double nu = 1.0 / cfg.re;
  st.dt = 0.01;
  while (st.time < 1.0 - 1e-12) {
    solver.step(st);
    CHECK(st.last_div_norm <= cfg.pressure_tol * 40.0);
  }
  const double e1 = FlowSolver::perturbation_energy(solver.velocity_field(st));
  const double expected = e0 * std::exp(-4.0 * nu * st.time);
  CHECK(std::abs(e1 / expected - 1.0) < 1e-3);
}

TEST_CASE("third-order temporal convergence on a translating Taylor-Green vortex") {
  // order 9 on 6 cells puts the spatial error floor well below the temporal one
  auto space = periodic_box(6, 9);
  const double re = 5.0;
  const double nu = 1.0 / re;
  const double u0 = 1.0, v0 = 0.3;  // mean advection keeps the explicit terms active
  auto exact_u = [&](double x, double y, double t) {
    return u0 + std::exp(-2.0 * nu * t) * std::sin(x - u0 * t) * std::cos(y - v0 * t);
  };
  auto exact_v = [&](double x, double y, double t) {
    return v0 - std::exp(-2.0 * nu * t) * std::cos(x - u0 * t) * std::sin(y - v0 * t);
  };
  auto tg_field = [&](double t) {
    Field f(space, {"u", "v"});
    fill(f, 0, [&](double x, double y) { return exact_u(x, y, t); });
    fill(f, 1, [&](double x, double y) { return exact_v(x, y, t); });
    return f;
  };
  auto tg_pressure = [&](double t) {
    const int npp2 = (space->order - 1) * (space->order - 1);
    std::vector<double> p(static_cast<size_t>(space->mesh.num_leaves()) * npp2);
    const double a = std::exp(-4.0 * nu * t);
    for (int e = 0; e < space->mesh.num_leaves(); ++e)
      for (int i = 0; i < npp2; ++i)
        p[static_cast<size_t>(e) * npp2 + i] =
            -0.25 * a * (std::cos(2.0 * (space->geom[e].p_x[i] - u0 * t)) +
                         std::cos(2.0 * (space->geom[e].p_y[i] - v0 * t)));
    return p;
  };
  // history is seeded from the exact solution so the measured order is the
  // scheme's, not the bootstrap's
  auto run = [&](double dt) {
    StepperConfig cfg;
    cfg.re = re;
    cfg.dt_max = dt;
    cfg.velocity_tol = 1e-11;
    cfg.pressure_tol = 1e-10;
    FlowSolver solver(space, cfg, homogeneous_bc());
    FlowState st = solver.make_state();
    solver.seed_history(st, tg_field(-2.0 * dt), -2.0 * dt);
    solver.seed_history(st, tg_field(-dt), -dt);
    solver.seed_history(st, tg_field(0.0), 0.0);
    solver.seed_pressure(st, tg_pressure(0.0), tg_pressure(-dt));
    st.dt = dt;
    const int steps = static_cast<int>(std::round(0.5 / dt));
    for (int k = 0; k < steps; ++k) solver.step(st);
    Field sol = solver.velocity_field(st);
    const double t = st.time;
    return max_nodal_error(sol, 0, [&](double x, double y) { return exact_u(x, y, t); });
  };
  const double e1 = run(0.01);
  const double e2 = run(0.005);
  const double ratio = e1 / e2;
  CHECK(ratio >= 5.5);
  CHECK(ratio <= 10.5);
}

TEST_CASE("Kovasznay steady solution at Re = 40") {
  const double re = 40.0;
  const double lam = 0.5 * re - std::sqrt(0.25 * re * re + 4.0 * M_PI * M_PI);
  auto exact_u = [=](double x, double y) { return 1.0 - std::exp(lam * x) * std::cos(2 * M_PI * y); };
  auto exact_v = [=](double x, double y) {
    return 0.5 * lam / M_PI * std::exp(lam * x) * std::sin(2 * M_PI * y);
  };

  auto mesh = build_rectangle_mesh(uniform_breaks(-0.5, 1.0, 6), uniform_breaks(-0.5, 1.5, 8),
                                   {BoundaryTag::InflowDirichlet, BoundaryTag::InflowDirichlet,
                                    BoundaryTag::InflowDirichlet, BoundaryTag::InflowDirichlet});
  auto space = Space::build(mesh, 7);
  StepperConfig cfg;
  cfg.re = re;
  cfg.dt_max = 0.02;
  VelocityBC bc = [&](BoundaryTag, Point2 p) -> std::array<double, 2> {
    return {exact_u(p.x, p.y), exact_v(p.x, p.y)};
  };
  FlowSolver solver(space, cfg, bc);

  Field ic(space, {"u", "v"});
  fill(ic, 0, exact_u);
  fill(ic, 1, exact_v);
  FlowState st = solver.make_state();
  solver.set_velocity(st, ic);

  double worst_div = 0.0;
  while (st.time < 6.0) {
    st.dt = std::min(solver.adapt_dt(st), 0.02);
    solver.step(st);
    worst_div = std::max(worst_div, st.last_div_norm);
  }
  CHECK(worst_div <= 1e-8);
  Field sol = solver.velocity_field(st);
  CHECK(max_nodal_error(sol, 0, exact_u) < 1e-6);
  CHECK(max_nodal_error(sol, 1, exact_v) < 1e-6);
}

TEST_CASE("adapt_dt: caps, inverse proportionality, refinement response") {
  auto space = periodic_box(4, 5);
  StepperConfig cfg;
  cfg.dt_max = 1.0;
  FlowSolver solver(space, cfg, homogeneous_bc());
  FlowState st = solver.make_state();
  CHECK(solver.adapt_dt(st) == 1.0);

  Field f(space, {"u", "v"});
  fill(f, 0, [](double, double) { return 0.5; });
  solver.set_velocity(st, f);
  const double dt1 = solver.adapt_dt(st);
  Field g(space, {"u", "v"});
  fill(g, 0, [](double, double) { return 1.0; });
  solver.set_velocity(st, g);
  const double dt2 = solver.adapt_dt(st);
  CHECK(dt2 == doctest::Approx(0.5 * dt1).epsilon(1e-12));

  auto fine_mut = space->mesh.refine({0});
  auto fine = Space::build(fine_mut.mesh, 5);
  FlowSolver fsolver(fine, cfg, homogeneous_bc());
  FlowState fst = fsolver.make_state();
  Field gf = transfer_field(g, fine_mut.corr, fine);
  fsolver.set_velocity(fst, gf);
  CHECK(fsolver.adapt_dt(fst) < dt2);
}

TEST_CASE("perturbation energy") {
  auto space = periodic_box(3, 5, 2.0);
  Field z(space, {"u", "v"});
  CHECK(FlowSolver::perturbation_energy(z) == 0.0);
  fill(z, 0, [](double, double) { return 1.0; });
  CHECK(FlowSolver::perturbation_energy(z) == doctest::Approx(4.0).epsilon(1e-12));

  fill(z, 0, [](double x, double y) { return x * y + 0.3 * x * x; });
  const double e0 = FlowSolver::perturbation_energy(z);
  auto r = space->mesh.refine({2, 5});
  auto fine = Space::build(r.mesh, 5);
  Field zf = transfer_field(z, r.corr, fine);
  CHECK(FlowSolver::perturbation_energy(zf) == doctest::Approx(e0).epsilon(1e-11));
}

TEST_CASE("linearized step is homogeneous of degree one") {
  auto space = periodic_box(3, 6);
  StepperConfig cfg;
  cfg.mode = StepMode::Linearized;
  cfg.re = 30.0;
  FlowSolver solver(space, cfg);
  Field base(space, {"u", "v"});
  fill(base, 0, [](double, double y) { return std::sin(y); });
  solver.set_base_flow(base);

  Field ic(space, {"u", "v"});
  fill(ic, 0, [](double x, double y) { return std::cos(x) * std::sin(2 * y); });
  fill(ic, 1, [](double x, double y) { return -0.5 * std::sin(2 * x) * std::cos(y); });
  FlowState a = solver.make_state();
  solver.set_velocity(a, ic);
  solver.make_divergence_free(a.u, a.v);
  FlowState b = a;
  for (auto& x : b.u) x *= 2.0;
  for (auto& x : b.v) x *= 2.0;

  a.dt = b.dt = 0.01;
  for (int k = 0; k < 3; ++k) {
    solver.step(a);
    solver.step(b);
  }
  double err = 0.0;
  for (size_t g = 0; g < a.u.size(); ++g) {
    err = std::max(err, std::abs(b.u[g] - 2.0 * a.u[g]));
    err = std::max(err, std::abs(b.v[g] - 2.0 * a.v[g]));
  }
  CHECK(err < 1e-12);
}

TEST_CASE("discrete adjoint identity on the periodic box") {
  auto space = periodic_box(3, 7);
  StepperConfig lcfg, acfg;
  lcfg.mode = StepMode::Linearized;
  acfg.mode = StepMode::Adjoint;
  lcfg.re = acfg.re = 25.0;
  FlowSolver lin(space, lcfg), adj(space, acfg);

  Field base(space, {"u", "v"});
  fill(base, 0, [](double, double y) { return 1.0 + 0.4 * std::sin(y); });
  fill(base, 1, [](double x, double) { return 0.2 * std::cos(x); });  // divergence free
  lin.set_base_flow(base);
  adj.set_base_flow(base);

  // zero in, zero out
  std::vector<double> z(lin.ndof(), 0.0);
  auto [zl, zr] = discrete_adjoint_check(lin, adj, z, z, z, z);
  CHECK(zl == 0.0);
  CHECK(zr == 0.0);

  // smooth divergence-free pair from streamfunctions
  Field fu(space, {"u", "v"}), fv(space, {"u", "v"});
  fill(fu, 0, [](double x, double y) { return std::sin(x + 0.3) * std::cos(y - 0.1); });
  fill(fu, 1, [](double x, double y) { return -std::cos(x + 0.3) * std::sin(y - 0.1); });
  fill(fv, 0, [](double x, double y) { return std::sin(2 * x - 0.7) * std::cos(y + 0.4); });
  fill(fv, 1, [](double x, double y) { return -2.0 * std::cos(2 * x - 0.7) * std::sin(y + 0.4); });

  FlowState su = lin.make_state(), sv = lin.make_state();
  lin.set_velocity(su, fu);
  lin.set_velocity(sv, fv);
  lin.make_divergence_free(su.u, su.v);
  lin.make_divergence_free(sv.u, sv.v);

  auto [lhs, rhs] = discrete_adjoint_check(lin, adj, su.u, su.v, sv.u, sv.v);
  CHECK(std::abs(lhs - rhs) / std::abs(lhs) < 1e-6);

  // swapping the arguments transposes the relation
  auto [lhs2, rhs2] = discrete_adjoint_check(lin, adj, sv.u, sv.v, su.u, su.v);
  CHECK(std::abs(lhs2 - rhs2) / std::abs(lhs2) < 1e-6);
}

#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>

#include "sstab/space.hpp"

namespace sstab {

struct SolverDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalBlowup : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class StepMode { Nonlinear, Linearized, Adjoint };

struct StepperConfig {
  StepMode mode = StepMode::Nonlinear;
  double re = 50.0;
  double cfl_target = 0.3;  // kept below 0.3
  double dt_max = 0.05;
  double dt_growth = 1.1;        // max dt growth per step
  double velocity_tol = 1e-8;    // relative residual of the Helmholtz solves
  double pressure_tol = 1e-8;    // L2 norm of the discrete divergence
  int max_cg_iters = 4000;
};

// Dirichlet boundary values by tag and position.
using VelocityBC = std::function<std::array<double, 2>(BoundaryTag, Point2)>;

inline VelocityBC uniform_inflow_bc() {
  return [](BoundaryTag tag, Point2) -> std::array<double, 2> {
    if (tag == BoundaryTag::InflowDirichlet) return {1.0, 0.0};
    return {0.0, 0.0};
  };
}

inline VelocityBC homogeneous_bc() {
  return [](BoundaryTag, Point2) -> std::array<double, 2> { return {0.0, 0.0}; };
}

// Multistep weights on nonuniform time levels.
// bdf_weights: d/dt at times[0] of the interpolant through all times.
inline std::vector<double> bdf_weights(const std::vector<double>& times) {
  const int n = static_cast<int>(times.size());
  std::vector<double> w(n, 0.0);
  for (int j = 0; j < n; ++j) {
    // derivative of the Lagrange basis l_j at times[0]
    double sum = 0.0;
    for (int m = 0; m < n; ++m) {
      if (m == j) continue;
      double prod = 1.0 / (times[j] - times[m]);
      for (int k = 0; k < n; ++k) {
        if (k == j || k == m) continue;
        prod *= (times[0] - times[k]) / (times[j] - times[k]);
      }
      sum += prod;
    }
    w[j] = sum;
  }
  return w;
}

// extrapolation weights: value at t of the interpolant through times
inline std::vector<double> ext_weights(double t, const std::vector<double>& times) {
  const int n = static_cast<int>(times.size());
  std::vector<double> w(n, 1.0);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k) {
      if (k == j) continue;
      w[j] *= (t - times[k]) / (times[j] - times[k]);
    }
  return w;
}

// Recent (solution, operator-image) pairs of the pressure solves; projecting
// each new right-hand side on their span gives the conjugate-gradient warm
// start. Owned by the trajectory so the discrete propagator stays a fixed map.
struct PressureProjection {
  static constexpr int kDim = 12;
  std::vector<std::vector<double>> xs, bs;
  int next = 0;

  void push(const std::vector<double>& x, const std::vector<double>& b) {
    if (static_cast<int>(xs.size()) < kDim) {
      xs.push_back(x);
      bs.push_back(b);
    } else {
      xs[next] = x;
      bs[next] = b;
      next = (next + 1) % kDim;
    }
  }
  void clear() {
    xs.clear();
    bs.clear();
    next = 0;
  }
};

// Time-integration state: current solution, pressure extrapolation levels and
// the multistep history rings (newest first).
struct FlowState {
  std::vector<double> u, v;          // velocity dofs
  std::vector<double> p, p_prev;     // element-local pressure (GL grid)
  std::array<std::vector<double>, 3> u_hist, v_hist;
  std::array<std::vector<double>, 3> fu_hist, fv_hist;  // explicit weak terms
  std::array<double, 3> t_hist{};
  int nhist = 0;
  bool primed = false;  // ring top already holds the current level
  int n_psolves = 0;
  double time = 0.0;
  double dt = 0.0;
  int step_count = 0;
  double last_div_norm = 0.0;
  PressureProjection proj;
};

// Incompressible Navier-Stokes / linearized / adjoint integrator on one space
// snapshot. BDF up to order 3 with matching extrapolation of the explicit
// terms, dealiased convection, velocity Helmholtz solves and an exact
// pressure-Schur correction so every step ends discretely divergence free.
class FlowSolver {
 public:
  std::shared_ptr<const Space> space;
  StepperConfig cfg;

  FlowSolver(std::shared_ptr<const Space> s, StepperConfig c, VelocityBC bc = {})
      : space(std::move(s)), cfg(c) {
    if (cfg.cfl_target > 0.3) throw std::invalid_argument("StepperConfig: CFL target above 0.3");
    if (!bc) bc = (cfg.mode == StepMode::Nonlinear) ? uniform_inflow_bc() : homogeneous_bc();
    build_static(bc);
  }

  int ndof() const { return space->num_dofs; }

  // cumulative iteration counters (profiling)
  mutable long stat_helm_iters = 0;
  mutable long stat_press_iters = 0;
  mutable long stat_steps = 0;
  const std::vector<double>& mask() const { return mask_; }
  const std::vector<double>& dirichlet_values(int comp) const { return ubc_[comp]; }

  // Frozen base flow for Linearized/Adjoint modes (GLL nodal field with
  // components "u", "v"); cached on the velocity and dealiasing grids.
  void set_base_flow(const Field& base) {
    if (base.space.get() != space.get())
      throw std::invalid_argument("set_base_flow: base flow lives on a different space");
    base_u_ = base.data[base.var_index("u")];
    base_v_ = base.data[base.var_index("v")];
    cache_dealias_gradients(base_u_, base_du_);
    cache_dealias_gradients(base_v_, base_dv_);
    has_base_ = true;
  }

  const std::vector<double>& base_u() const { return base_u_; }
  const std::vector<double>& base_v() const { return base_v_; }

  FlowState make_state() const {
    FlowState st;
    st.u.assign(ndof(), 0.0);
    st.v.assign(ndof(), 0.0);
    st.p.assign(static_cast<size_t>(nel_) * npp2_, 0.0);
    st.p_prev = st.p;
    if (cfg.mode == StepMode::Nonlinear) {
      for (int g = 0; g < ndof(); ++g)
        if (space->dof_dirichlet[g]) {
          st.u[g] = ubc_[0][g];
          st.v[g] = ubc_[1][g];
        }
    }
    return st;
  }

  void set_velocity(FlowState& st, const Field& f) const {
    std::vector<double> g;
    space->gather_average(f.data[f.var_index("u")], g);
    st.u = g;
    space->gather_average(f.data[f.var_index("v")], g);
    st.v = g;
    if (cfg.mode == StepMode::Nonlinear)
      for (int gdof = 0; gdof < ndof(); ++gdof)
        if (space->dof_dirichlet[gdof]) {
          st.u[gdof] = ubc_[0][gdof];
          st.v[gdof] = ubc_[1][gdof];
        }
    st.nhist = 0;
    st.step_count = 0;
    st.n_psolves = 0;
  }

  Field velocity_field(const FlowState& st) const {
    Field f(space, {"u", "v"});
    space->scatter(st.u, f.data[0]);
    space->scatter(st.v, f.data[1]);
    f.time = st.time;
    return f;
  }

  // Prime one multistep history level from a known solution at time t (used
  // for warm starts; levels must arrive oldest first).
  void seed_history(FlowState& st, const Field& vel, double t) {
    FlowState tmp = make_state();
    set_velocity(tmp, vel);
    std::vector<double> fu, fv;
    convection_weak(tmp.u, tmp.v, fu, fv);
    for (int g = 0; g < ndof(); ++g) {
      fu[g] = -fu[g];
      fv[g] = -fv[g];
    }
    push_ring(st.u_hist, tmp.u, 0);
    push_ring(st.v_hist, tmp.v, 0);
    push_ring(st.fu_hist, fu, 0);
    push_ring(st.fv_hist, fv, 0);
    for (int k = 2; k > 0; --k) st.t_hist[k] = st.t_hist[k - 1];
    st.t_hist[0] = t;
    st.nhist = std::min(st.nhist + 1, 3);
    st.u = tmp.u;
    st.v = tmp.v;
    st.time = t;
    st.primed = true;
  }

  // Seed the pressure extrapolation levels (element-local GL-grid arrays).
  void seed_pressure(FlowState& st, std::vector<double> p_now, std::vector<double> p_before) {
    st.p = std::move(p_now);
    st.p_prev = std::move(p_before);
    st.n_psolves = 2;
  }

  // CFL-limited time step from per-node grid spacing and speed.
  double adapt_dt(const FlowState& st) const {
    std::vector<double>& ul = scratch(0);
    std::vector<double>& vl = scratch(1);
    const std::vector<double>* uu;
    const std::vector<double>* vv;
    if (cfg.mode == StepMode::Nonlinear) {
      space->scatter(st.u, ul);
      space->scatter(st.v, vl);
      uu = &ul;
      vv = &vl;
    } else {
      uu = &base_u_;  // advection speed is the frozen base flow
      vv = &base_v_;
    }
    double dt = cfg.dt_max;
    for (int e = 0; e < nel_; ++e) {
      const auto& ge = space->geom[e];
      for (int q = 0; q < npe_; ++q) {
        const size_t idx = static_cast<size_t>(e) * npe_ + q;
        const double speed = std::hypot((*uu)[idx], (*vv)[idx]);
        if (speed * dt > cfg.cfl_target * ge.spacing[q]) dt = cfg.cfl_target * ge.spacing[q] / speed;
      }
    }
    if (st.dt > 0.0) dt = std::min(dt, cfg.dt_growth * st.dt);
    if (!(dt > 0.0)) throw std::runtime_error("adapt_dt: degenerate grid spacing");
    return dt;
  }

  // Pointwise convective term of the configured mode, L2-projected back to
  // the velocity grid.
  Field advect(const Field& pert_or_state) const {
    std::vector<double> fu, fv;
    const auto& f = pert_or_state;
    std::vector<double> ug, vg;
    space->gather_average(f.data[f.var_index("u")], ug);
    space->gather_average(f.data[f.var_index("v")], vg);
    convection_weak(ug, vg, fu, fv);
    Field out(space, {"u", "v"});
    std::vector<double> tmp(ndof());
    for (int g = 0; g < ndof(); ++g) tmp[g] = fu[g] / space->dof_mass[g];
    space->scatter(tmp, out.data[0]);
    for (int g = 0; g < ndof(); ++g) tmp[g] = fv[g] / space->dof_mass[g];
    space->scatter(tmp, out.data[1]);
    return out;
  }

  // One time step. Optional pointwise body force on the GLL nodes (local
  // layout), added to the explicit terms.
  void step(FlowState& st, const std::vector<double>* force_u = nullptr,
            const std::vector<double>* force_v = nullptr) {
    const double dt = st.dt;
    if (!(dt > 0.0)) throw std::invalid_argument("step: state has no time step set");

    // explicit term at the current level
    if (st.primed) {
      st.primed = false;  // ring top already holds this level
    } else {
      std::vector<double> fu, fv;
      convection_weak(st.u, st.v, fu, fv);
      for (int g = 0; g < ndof(); ++g) {
        fu[g] = -fu[g];
        fv[g] = -fv[g];
      }
      if (force_u) add_weak_force(*force_u, fu);
      if (force_v) add_weak_force(*force_v, fv);

      push_ring(st.u_hist, st.u, st.nhist);
      push_ring(st.v_hist, st.v, st.nhist);
      push_ring(st.fu_hist, fu, st.nhist);
      push_ring(st.fv_hist, fv, st.nhist);
      for (int k = 2; k > 0; --k) st.t_hist[k] = st.t_hist[k - 1];
      st.t_hist[0] = st.time;
      st.nhist = std::min(st.nhist + 1, 3);
    }

    const int q = st.nhist;  // BDF/EXT order this step
    const double tn1 = st.time + dt;
    std::vector<double> times{tn1};
    for (int j = 0; j < q; ++j) times.push_back(st.t_hist[j]);
    const auto cbdf = bdf_weights(times);
    const double c0 = cbdf[0];
    std::vector<double> htimes(times.begin() + 1, times.end());
    const auto cext = ext_weights(tn1, htimes);

    // assemble RHS: extrapolated explicit terms minus the mass-weighted BDF tail
    std::vector<double>& rhs_u = work_[0];
    std::vector<double>& rhs_v = work_[1];
    rhs_u.assign(ndof(), 0.0);
    rhs_v.assign(ndof(), 0.0);
    for (int j = 0; j < q; ++j) {
      axpy(cext[j], st.fu_hist[j], rhs_u);
      axpy(cext[j], st.fv_hist[j], rhs_v);
    }
    std::vector<double>& hsum_u = work_[2];
    std::vector<double>& hsum_v = work_[3];
    hsum_u.assign(ndof(), 0.0);
    hsum_v.assign(ndof(), 0.0);
    for (int j = 0; j < q; ++j) {
      axpy(-cbdf[j + 1], st.u_hist[j], hsum_u);
      axpy(-cbdf[j + 1], st.v_hist[j], hsum_v);
    }
    mass_apply(hsum_u, work_[4]);
    axpy(1.0, work_[4], rhs_u);
    mass_apply(hsum_v, work_[4]);
    axpy(1.0, work_[4], rhs_v);

    // extrapolated pressure
    std::vector<double>& p_ext = pwork_[0];
    p_ext.assign(st.p.size(), 0.0);
    if (st.n_psolves >= 2)
      for (size_t i = 0; i < st.p.size(); ++i) p_ext[i] = 2.0 * st.p[i] - st.p_prev[i];
    else if (st.n_psolves == 1)
      p_ext = st.p;
    add_gradient(p_ext, rhs_u, rhs_v);

    // velocity Helmholtz solves, warm-started from extrapolated history
    std::vector<double>& un = work_[5];
    std::vector<double>& vn = work_[6];
    std::vector<double>& gu_ext = work_[7];
    std::vector<double>& gv_ext = work_[8];
    gu_ext.assign(ndof(), 0.0);
    gv_ext.assign(ndof(), 0.0);
    for (int j = 0; j < q; ++j) {
      axpy(cext[j], st.u_hist[j], gu_ext);
      axpy(cext[j], st.v_hist[j], gv_ext);
    }
    solve_helmholtz(c0, rhs_u, ubc_[0], un, &gu_ext);
    solve_helmholtz(c0, rhs_v, ubc_[1], vn, &gv_ext);

    // pressure correction: E dp = -c0 D u*, then project the velocity
    std::vector<double>& divu = pwork_[1];
    divergence(un, vn, divu);
    std::vector<double>& b = pwork_[2];
    b.resize(divu.size());
    const double unorm = std::sqrt(dot_mass(un, un) + dot_mass(vn, vn));
    for (size_t i = 0; i < divu.size(); ++i) b[i] = -c0 * divu[i];
    std::vector<double>& dp = pwork_[3];
    st.last_div_norm = solve_pressure(b, c0, unorm, dp, &st.proj);

    std::vector<double>& gu = work_[7];
    std::vector<double>& gv = work_[8];
    gu.assign(ndof(), 0.0);
    gv.assign(ndof(), 0.0);
    add_gradient(dp, gu, gv);
    for (int g = 0; g < ndof(); ++g) {
      un[g] += mask_[g] * gu[g] / (c0 * space->dof_mass[g]);
      vn[g] += mask_[g] * gv[g] / (c0 * space->dof_mass[g]);
    }

    st.p_prev = st.p;
    for (size_t i = 0; i < st.p.size(); ++i) st.p[i] = p_ext[i] + dp[i];
    st.n_psolves += 1;

    st.u = un;
    st.v = vn;
    st.time = tn1;
    st.step_count += 1;
    stat_steps += 1;

    double probe = 0.0;
    for (int g = 0; g < ndof(); g += std::max(1, ndof() / 64)) probe += st.u[g] + st.v[g];
    if (!std::isfinite(probe)) throw NumericalBlowup("step: velocity field left finite range");
  }

  // Integrate the linear (or adjoint) system over a sampling period with a
  // fixed step count; the discrete propagator is identical for every call.
  void propagate(std::vector<double>& u, std::vector<double>& v, double t_sample,
                 int n_steps) {
    FlowState st = make_state();
    st.u = u;
    st.v = v;
    st.dt = t_sample / n_steps;
    for (int k = 0; k < n_steps; ++k) step(st);
    u = st.u;
    v = st.v;
  }

  // L2 norm of the pointwise divergence of a dof velocity field.
  double divergence_norm(const std::vector<double>& u, const std::vector<double>& v) const {
    std::vector<double> d;
    divergence(u, v, d);
    double s = 0.0;
    for (int e = 0; e < nel_; ++e) {
      const auto& pm = space->geom[e].p_mass;
      for (int i = 0; i < npp2_; ++i) {
        const double val = d[static_cast<size_t>(e) * npp2_ + i];
        s += val * val / pm[i];
      }
    }
    return std::sqrt(s);
  }

  // project a dof velocity onto the discretely divergence-free subspace
  void make_divergence_free(std::vector<double>& u, std::vector<double>& v) {
    for (int g = 0; g < ndof(); ++g) {
      u[g] *= mask_[g];
      v[g] *= mask_[g];
    }
    std::vector<double> d, b, dp;
    divergence(u, v, d);
    b.resize(d.size());
    const double unorm = std::sqrt(dot_mass(u, u) + dot_mass(v, v));
    for (size_t i = 0; i < d.size(); ++i) b[i] = -d[i];
    solve_pressure(b, 1.0, unorm, dp);
    std::vector<double> gu(ndof(), 0.0), gv(ndof(), 0.0);
    add_gradient(dp, gu, gv);
    for (int g = 0; g < ndof(); ++g) {
      u[g] += mask_[g] * gu[g] / space->dof_mass[g];
      v[g] += mask_[g] * gv[g] / space->dof_mass[g];
    }
  }

  double dot_mass(const std::vector<double>& a, const std::vector<double>& b) const {
    double s = 0.0;
    for (int g = 0; g < ndof(); ++g) s += space->dof_mass[g] * a[g] * b[g];
    return s;
  }

  // weak spatial operator (convection + viscous stiffness) of the configured
  // mode; used by the adjoint-consistency diagnostic
  void spatial_operator_weak(const std::vector<double>& u, const std::vector<double>& v,
                             std::vector<double>& lu, std::vector<double>& lv) const {
    convection_weak(u, v, lu, lv);
    std::vector<double> au(ndof()), av(ndof());
    stiffness_apply(u, au);
    stiffness_apply(v, av);
    axpy(1.0 / cfg.re, au, lu);
    axpy(1.0 / cfg.re, av, lv);
  }

  // Kinetic energy integral rho |u|^2 dV (rho = 1) of a nodal field.
  static double perturbation_energy(const Field& f) {
    const Space& s = *f.space;
    double e = 0.0;
    for (const auto& comp : f.data)
      e += s.integrate_product(comp, comp);
    return e;
  }

 private:
  static constexpr int kMaxNpe = 432;  // covers order <= 11 on the dealias grid
  int nel_ = 0, npe_ = 0, np_ = 0, npp_ = 0, npp2_ = 0, nd_ = 0, nd2_ = 0;
  std::vector<double> mask_;          // 1 on free dofs, 0 on Dirichlet
  std::array<std::vector<double>, 2> ubc_;  // Dirichlet values
  std::vector<double> ag_diag_;       // assembled stiffness diagonal
  std::vector<Cholesky> p_block_;     // pressure block-Jacobi factors
  std::vector<Mat> p_dx_, p_dy_;      // dense element divergence operators (rows: GL nodes)
  std::array<std::vector<double>, 2> abc_, bbc_;  // stiffness/mass images of the BC lift
  // coarse level: one pressure value per element, exact Galerkin operator
  std::unique_ptr<Cholesky> p_coarse_;
  bool p_has_nullspace_ = false;
  bool bc_cached_ = false;
  bool has_base_ = false;
  std::vector<double> base_u_, base_v_;
  struct DealiasCache {
    std::vector<double> val, dx, dy;  // at dealias points
  };
  DealiasCache base_du_, base_dv_;

  mutable std::array<std::vector<double>, 9> work_;
  mutable std::array<std::vector<double>, 4> pwork_;
  mutable std::vector<std::vector<double>> scratch_;

  std::vector<double>& scratch(int i) const {
    if (scratch_.empty()) scratch_.resize(12);
    return scratch_[i];
  }

  static void push_ring(std::array<std::vector<double>, 3>& ring, const std::vector<double>& x,
                        int) {
    ring[2] = std::move(ring[1]);
    ring[1] = std::move(ring[0]);
    ring[0] = x;
  }

  // ---- static setup ---------------------------------------------------------

  void build_static(const VelocityBC& bc) {
    const auto& re = RefElement::get(space->order);
    nel_ = space->mesh.num_leaves();
    np_ = re.np;
    npe_ = np_ * np_;
    npp_ = re.npp;
    npp2_ = npp_ * npp_;
    nd_ = re.nd;
    nd2_ = nd_ * nd_;

    mask_.assign(space->num_dofs, 1.0);
    ubc_[0].assign(space->num_dofs, 0.0);
    ubc_[1].assign(space->num_dofs, 0.0);
    for (int g = 0; g < space->num_dofs; ++g)
      if (space->dof_dirichlet[g]) {
        mask_[g] = 0.0;
        const auto val = bc(space->dof_tag[g], {space->dof_x[g], space->dof_y[g]});
        ubc_[0][g] = val[0];
        ubc_[1][g] = val[1];
      }

    // assembled stiffness diagonal for the Helmholtz preconditioner
    ag_diag_.assign(space->num_dofs, 0.0);
    const Mat& d1 = re.d1;
    for (int e = 0; e < nel_; ++e) {
      const auto& ge = space->geom[e];
      for (int j = 0; j < np_; ++j)
        for (int i = 0; i < np_; ++i) {
          double a = 0.0;
          for (int k = 0; k < np_; ++k) {
            a += d1(k, i) * d1(k, i) * ge.g11[j * np_ + k];
            a += d1(k, j) * d1(k, j) * ge.g22[k * np_ + i];
          }
          a += 2.0 * d1(i, i) * d1(j, j) * ge.g12[j * np_ + i];
          const int nidx = e * npe_ + j * np_ + i;
          for (int r = space->row_ptr[nidx]; r < space->row_ptr[nidx + 1]; ++r)
            ag_diag_[space->row_gid[r]] += space->row_w[r] * space->row_w[r] * a;
        }
    }

    p_has_nullspace_ = true;
    for (const auto& bf : space->topo.boundary)
      if (bf.tag == BoundaryTag::Outflow) p_has_nullspace_ = false;

    build_pressure_blocks();
    for (int comp = 0; comp < 2; ++comp) {
      stiffness_apply(ubc_[comp], abc_[comp]);
      mass_apply(ubc_[comp], bbc_[comp]);
    }
    bc_cached_ = true;
  }

  void build_pressure_blocks() {
    const auto& re = RefElement::get(space->order);
    p_block_.clear();
    p_block_.reserve(nel_);
    p_dx_.clear();
    p_dy_.clear();
    p_dx_.reserve(nel_);
    p_dy_.reserve(nel_);
    // element-local divergence matrices acting on local velocity nodes
    Mat dxi(npe_, npe_), deta(npe_, npe_);
    for (int j = 0; j < np_; ++j)
      for (int i = 0; i < np_; ++i)
        for (int k = 0; k < np_; ++k) {
          dxi(j * np_ + i, j * np_ + k) = re.d1(i, k);
          deta(j * np_ + i, k * np_ + i) = re.d1(j, k);
        }
    Mat interp(npp2_, npe_);
    for (int j = 0; j < npp_; ++j)
      for (int i = 0; i < npp_; ++i)
        for (int l = 0; l < np_; ++l)
          for (int k = 0; k < np_; ++k)
            interp(j * npp_ + i, l * np_ + k) = re.to_gl(i, k) * re.to_gl(j, l);
    const Mat ixi = matmul(interp, dxi);
    const Mat ieta = matmul(interp, deta);

    std::vector<double> winv(npe_);
    for (int e = 0; e < nel_; ++e) {
      const auto& ge = space->geom[e];
      for (int q = 0; q < npe_; ++q) {
        const int nidx = e * npe_ + q;
        double w = 0.0;
        for (int r = space->row_ptr[nidx]; r < space->row_ptr[nidx + 1]; ++r) {
          const int g = space->row_gid[r];
          w += space->row_w[r] * space->row_w[r] * mask_[g] / space->dof_mass[g];
        }
        winv[q] = w;
      }
      // Dx = diag(pm*rx) ixi + diag(pm*sx) ieta; same with (ry, sy) for Dy
      Mat dx(npp2_, npe_), dy(npp2_, npe_);
      for (int p = 0; p < npp2_; ++p) {
        const double wrx = ge.p_mass[p] * ge.p_rx[p], wsx = ge.p_mass[p] * ge.p_sx[p];
        const double wry = ge.p_mass[p] * ge.p_ry[p], wsy = ge.p_mass[p] * ge.p_sy[p];
        for (int c = 0; c < npe_; ++c) {
          dx(p, c) = wrx * ixi(p, c) + wsx * ieta(p, c);
          dy(p, c) = wry * ixi(p, c) + wsy * ieta(p, c);
        }
      }
      Mat ee(npp2_, npp2_);
      for (int p = 0; p < npp2_; ++p)
        for (int c = 0; c < npe_; ++c) {
          const double a = dx(p, c) * winv[c], b2 = dy(p, c) * winv[c];
          if (a == 0.0 && b2 == 0.0) continue;
          for (int p2 = 0; p2 <= p; ++p2) ee(p, p2) += a * dx(p2, c) + b2 * dy(p2, c);
        }
      for (int p = 0; p < npp2_; ++p)
        for (int p2 = p + 1; p2 < npp2_; ++p2) ee(p, p2) = ee(p2, p);
      // regularize rank-deficient blocks (fully constrained neighborhoods)
      double dmax = 0.0;
      for (int p = 0; p < npp2_; ++p) dmax = std::max(dmax, ee(p, p));
      if (dmax == 0.0) dmax = 1.0;
      for (int p = 0; p < npp2_; ++p) ee(p, p) += 1e-10 * dmax;
      p_block_.emplace_back(std::move(ee));
      p_dx_.push_back(std::move(dx));
      p_dy_.push_back(std::move(dy));
    }
    build_pressure_coarse();
  }

  // Exact coarse operator on piecewise-constant pressures: with the gradient
  // footprint G_e = C^T D_e^T 1_e split into components, (E_c)_{ef} =
  // sum_g W_g (Gx_e Gx_f + Gy_e Gy_f) over shared dofs.
  void build_pressure_coarse() {
    const auto& re = RefElement::get(space->order);
    std::vector<std::vector<std::array<double, 3>>> dof_inc(space->num_dofs);
    std::vector<double> ones(npp2_, 1.0), lu(npe_), lv(npe_);
    std::vector<double> t1(npp2_), t2(npp2_), b1(npe_), b2(npe_), wk(std::max(npe_, npp2_) * 4);
    for (int e = 0; e < nel_; ++e) {
      const auto& ge = space->geom[e];
      std::fill(lu.begin(), lu.end(), 0.0);
      std::fill(lv.begin(), lv.end(), 0.0);
      for (int q = 0; q < npp2_; ++q) {
        t1[q] = ge.p_mass[q] * ge.p_rx[q];
        t2[q] = ge.p_mass[q] * ge.p_sx[q];
      }
      tensor_apply(re.to_gl_t, re.to_gl_t, t1.data(), b1.data(), wk.data());
      tensor_apply(re.to_gl_t, re.to_gl_t, t2.data(), b2.data(), wk.data());
      deriv_xi_t(re, b1.data(), lu.data());
      deriv_eta_t(re, b2.data(), lu.data());
      for (int q = 0; q < npp2_; ++q) {
        t1[q] = ge.p_mass[q] * ge.p_ry[q];
        t2[q] = ge.p_mass[q] * ge.p_sy[q];
      }
      tensor_apply(re.to_gl_t, re.to_gl_t, t1.data(), b1.data(), wk.data());
      tensor_apply(re.to_gl_t, re.to_gl_t, t2.data(), b2.data(), wk.data());
      deriv_xi_t(re, b1.data(), lv.data());
      deriv_eta_t(re, b2.data(), lv.data());
      for (int q = 0; q < npe_; ++q) {
        const int nidx = e * npe_ + q;
        for (int r = space->row_ptr[nidx]; r < space->row_ptr[nidx + 1]; ++r) {
          const int g = space->row_gid[r];
          const double w = space->row_w[r];
          if (dof_inc[g].empty() || dof_inc[g].back()[0] != e)
            dof_inc[g].push_back({double(e), 0.0, 0.0});
          dof_inc[g].back()[1] += w * lu[q];
          dof_inc[g].back()[2] += w * lv[q];
        }
      }
    }
    Mat ec(nel_, nel_);
    for (int g = 0; g < space->num_dofs; ++g) {
      const double wg = mask_[g] / space->dof_mass[g];
      if (wg == 0.0) continue;
      for (const auto& a : dof_inc[g])
        for (const auto& b : dof_inc[g]) {
          const int ea = static_cast<int>(a[0]), eb = static_cast<int>(b[0]);
          ec(ea, eb) += wg * (a[1] * b[1] + a[2] * b[2]);
        }
    }
    double dmax = 0.0;
    for (int e = 0; e < nel_; ++e) dmax = std::max(dmax, ec(e, e));
    for (int e = 0; e < nel_; ++e) ec(e, e) += 1e-10 * std::max(dmax, 1.0);
    p_coarse_ = std::make_unique<Cholesky>(std::move(ec));
  }

  void cache_dealias_gradients(const std::vector<double>& comp, DealiasCache& out) const {
    out.val.resize(static_cast<size_t>(nel_) * nd2_);
    out.dx.resize(out.val.size());
    out.dy.resize(out.val.size());
    const auto& re = RefElement::get(space->order);
    std::vector<double> gx(npe_), gy(npe_), t1(nd2_), t2(nd2_), wk(std::max(npe_, nd2_) * 4);
    for (int e = 0; e < nel_; ++e) {
      const double* ue = comp.data() + static_cast<size_t>(e) * npe_;
      const auto& ge = space->geom[e];
      deriv_xi(re, ue, gx.data());
      deriv_eta(re, ue, gy.data());
      tensor_apply(re.to_da, re.to_da, ue, &out.val[static_cast<size_t>(e) * nd2_], wk.data());
      tensor_apply(re.to_da, re.to_da, gx.data(), t1.data(), wk.data());
      tensor_apply(re.to_da, re.to_da, gy.data(), t2.data(), wk.data());
      for (int qd = 0; qd < nd2_; ++qd) {
        const size_t idx = static_cast<size_t>(e) * nd2_ + qd;
        out.dx[idx] = ge.d_rx[qd] * t1[qd] + ge.d_sx[qd] * t2[qd];
        out.dy[idx] = ge.d_ry[qd] * t1[qd] + ge.d_sy[qd] * t2[qd];
      }
    }
  }

  // ---- element kernels ------------------------------------------------------

  static void deriv_xi(const RefElement& re, const double* in, double* out) {
    const int np = re.np;
    for (int j = 0; j < np; ++j)
      for (int i = 0; i < np; ++i) {
        double s = 0.0;
        const double* row = &re.d1.a[static_cast<size_t>(i) * np];
        for (int k = 0; k < np; ++k) s += row[k] * in[j * np + k];
        out[j * np + i] = s;
      }
  }

  static void deriv_eta(const RefElement& re, const double* in, double* out) {
    const int np = re.np;
    for (int j = 0; j < np; ++j)
      for (int i = 0; i < np; ++i) {
        double s = 0.0;
        const double* row = &re.d1.a[static_cast<size_t>(j) * np];
        for (int k = 0; k < np; ++k) s += row[k] * in[k * np + i];
        out[j * np + i] = s;
      }
  }

  static void deriv_xi_t(const RefElement& re, const double* in, double* out) {
    const int np = re.np;
    for (int j = 0; j < np; ++j)
      for (int i = 0; i < np; ++i) {
        double s = 0.0;
        for (int k = 0; k < np; ++k) s += re.d1(k, i) * in[j * np + k];
        out[j * np + i] += s;
      }
  }

  static void deriv_eta_t(const RefElement& re, const double* in, double* out) {
    const int np = re.np;
    for (int j = 0; j < np; ++j)
      for (int i = 0; i < np; ++i) {
        double s = 0.0;
        for (int k = 0; k < np; ++k) s += re.d1(k, j) * in[k * np + i];
        out[j * np + i] += s;
      }
  }

  // ---- global operators -----------------------------------------------------

  void mass_apply(const std::vector<double>& g, std::vector<double>& out) const {
    std::vector<double>& local = scratch(2);
    space->scatter(g, local);
    for (int e = 0; e < nel_; ++e) {
      const auto& bm = space->geom[e].mass;
      double* le = local.data() + static_cast<size_t>(e) * npe_;
      for (int q = 0; q < npe_; ++q) le[q] *= bm[q];
    }
    out.assign(ndof(), 0.0);
    space->gather_add(local, out);
  }

  void stiffness_apply(const std::vector<double>& g, std::vector<double>& out) const {
    const auto& re = RefElement::get(space->order);
    std::vector<double>& local = scratch(3);
    std::vector<double>& res = scratch(4);
    space->scatter(g, local);
    res.resize(local.size());
#pragma omp parallel for schedule(static)
    for (int e = 0; e < nel_; ++e) {
      double gx[kMaxNpe], gy[kMaxNpe], w1[kMaxNpe], w2[kMaxNpe];
      const auto& ge = space->geom[e];
      const double* ue = local.data() + static_cast<size_t>(e) * npe_;
      deriv_xi(re, ue, gx);
      deriv_eta(re, ue, gy);
      for (int q = 0; q < npe_; ++q) {
        const double a = gx[q], b = gy[q];
        w1[q] = ge.g11[q] * a + ge.g12[q] * b;
        w2[q] = ge.g12[q] * a + ge.g22[q] * b;
      }
      double* oe = res.data() + static_cast<size_t>(e) * npe_;
      std::fill(oe, oe + npe_, 0.0);
      deriv_xi_t(re, w1, oe);
      deriv_eta_t(re, w2, oe);
    }
    out.assign(ndof(), 0.0);
    space->gather_add(res, out);
  }

  void helmholtz_apply(double c0, const std::vector<double>& g, std::vector<double>& out) const {
    const auto& re = RefElement::get(space->order);
    std::vector<double>& local = scratch(3);
    std::vector<double>& res = scratch(4);
    space->scatter(g, local);
    res.resize(local.size());
    const double nu = 1.0 / cfg.re;
#pragma omp parallel for schedule(static)
    for (int e = 0; e < nel_; ++e) {
      double gx[kMaxNpe], gy[kMaxNpe], w1[kMaxNpe], w2[kMaxNpe];
      const auto& ge = space->geom[e];
      const double* ue = local.data() + static_cast<size_t>(e) * npe_;
      deriv_xi(re, ue, gx);
      deriv_eta(re, ue, gy);
      for (int q = 0; q < npe_; ++q) {
        const double a = gx[q], b = gy[q];
        w1[q] = nu * (ge.g11[q] * a + ge.g12[q] * b);
        w2[q] = nu * (ge.g12[q] * a + ge.g22[q] * b);
      }
      double* oe = res.data() + static_cast<size_t>(e) * npe_;
      for (int q = 0; q < npe_; ++q) oe[q] = c0 * ge.mass[q] * ue[q];
      deriv_xi_t(re, w1, oe);
      deriv_eta_t(re, w2, oe);
    }
    out.assign(ndof(), 0.0);
    space->gather_add(res, out);
  }

  // weak divergence into the element-local pressure grid
  void divergence(const std::vector<double>& u, const std::vector<double>& v,
                  std::vector<double>& d) const {
    std::vector<double>& ul = scratch(3);
    std::vector<double>& vl = scratch(4);
    space->scatter(u, ul);
    space->scatter(v, vl);
    d.resize(static_cast<size_t>(nel_) * npp2_);
#pragma omp parallel for schedule(static)
    for (int e = 0; e < nel_; ++e) {
      const double* ue = ul.data() + static_cast<size_t>(e) * npe_;
      const double* ve = vl.data() + static_cast<size_t>(e) * npe_;
      const double* dxa = p_dx_[e].a.data();
      const double* dya = p_dy_[e].a.data();
      double* de = d.data() + static_cast<size_t>(e) * npp2_;
      for (int p = 0; p < npp2_; ++p) {
        const double* rx = dxa + static_cast<size_t>(p) * npe_;
        const double* ry = dya + static_cast<size_t>(p) * npe_;
        double s = 0.0;
        for (int c = 0; c < npe_; ++c) s += rx[c] * ue[c] + ry[c] * ve[c];
        de[p] = s;
      }
    }
  }

  // transpose of `divergence`: adds D^T p into the velocity weak vectors
  void add_gradient(const std::vector<double>& p, std::vector<double>& ru,
                    std::vector<double>& rv) const {
    std::vector<double>& lu = scratch(3);
    std::vector<double>& lv = scratch(4);
    lu.resize(static_cast<size_t>(nel_) * npe_);
    lv.resize(lu.size());
#pragma omp parallel for schedule(static)
    for (int e = 0; e < nel_; ++e) {
      const double* pe = p.data() + static_cast<size_t>(e) * npp2_;
      const double* dxa = p_dx_[e].a.data();
      const double* dya = p_dy_[e].a.data();
      double* ous = lu.data() + static_cast<size_t>(e) * npe_;
      double* ovs = lv.data() + static_cast<size_t>(e) * npe_;
      std::fill(ous, ous + npe_, 0.0);
      std::fill(ovs, ovs + npe_, 0.0);
      for (int q = 0; q < npp2_; ++q) {
        const double w = pe[q];
        if (w == 0.0) continue;
        const double* rx = dxa + static_cast<size_t>(q) * npe_;
        const double* ry = dya + static_cast<size_t>(q) * npe_;
        for (int c = 0; c < npe_; ++c) {
          ous[c] += w * rx[c];
          ovs[c] += w * ry[c];
        }
      }
    }
    space->gather_add(lu, ru);
    space->gather_add(lv, rv);
  }

  // E p = D diag(mask/Bg) D^T p
  void schur_apply(const std::vector<double>& p, std::vector<double>& out) const {
    std::vector<double>& gu = scratch(10);
    std::vector<double>& gv = scratch(11);
    gu.assign(ndof(), 0.0);
    gv.assign(ndof(), 0.0);
    add_gradient(p, gu, gv);
    for (int g = 0; g < ndof(); ++g) {
      const double w = mask_[g] / space->dof_mass[g];
      gu[g] *= w;
      gv[g] *= w;
    }
    divergence(gu, gv, out);
  }

  // ---- solvers ---------------------------------------------------------------

  void solve_helmholtz(double c0, const std::vector<double>& rhs,
                       const std::vector<double>& bc_vals, std::vector<double>& x,
                       const std::vector<double>* guess = nullptr) const {
    // x = bc + x0, solve on free dofs (stiffness/mass images of the lift are cached)
    const int comp = (&bc_vals == &ubc_[1]) ? 1 : 0;
    std::vector<double> hbc(ndof());
    if (bc_cached_ && (&bc_vals == &ubc_[0] || &bc_vals == &ubc_[1])) {
      const double nu0 = 1.0 / cfg.re;
      for (int g = 0; g < ndof(); ++g) hbc[g] = c0 * bbc_[comp][g] + nu0 * abc_[comp][g];
    } else {
      helmholtz_apply(c0, bc_vals, hbc);
    }
    std::vector<double> b(ndof());
    double bnorm2 = 0.0;
    for (int g = 0; g < ndof(); ++g) {
      b[g] = mask_[g] * (rhs[g] - hbc[g]);
      bnorm2 += b[g] * b[g];
    }
    const double tol = cfg.velocity_tol * std::sqrt(bnorm2);
    std::vector<double> diag(ndof());
    const double nu = 1.0 / cfg.re;
    for (int g = 0; g < ndof(); ++g) diag[g] = c0 * space->dof_mass[g] + nu * ag_diag_[g];

    std::vector<double> xk(ndof(), 0.0), r = b, z(ndof()), pk(ndof()), ap(ndof());
    if (guess) {
      for (int g = 0; g < ndof(); ++g) xk[g] = mask_[g] * ((*guess)[g] - bc_vals[g]);
      helmholtz_apply(c0, xk, ap);
      for (int g = 0; g < ndof(); ++g) r[g] = b[g] - mask_[g] * ap[g];
    }
    for (int g = 0; g < ndof(); ++g) z[g] = mask_[g] * r[g] / diag[g];
    pk = z;
    double rz = dot(r, z);
    int it = 0;
    for (; it < cfg.max_cg_iters; ++it) {
      if (std::sqrt(dot(r, r)) <= tol || rz == 0.0) break;
      helmholtz_apply(c0, pk, ap);
      for (int g = 0; g < ndof(); ++g) ap[g] *= mask_[g];
      const double alpha = rz / dot(pk, ap);
      axpy(alpha, pk, xk);
      axpy(-alpha, ap, r);
      for (int g = 0; g < ndof(); ++g) z[g] = mask_[g] * r[g] / diag[g];
      const double rz_new = dot(r, z);
      const double beta = rz_new / rz;
      rz = rz_new;
      for (int g = 0; g < ndof(); ++g) pk[g] = z[g] + beta * pk[g];
    }
    stat_helm_iters += it;
    if (it >= cfg.max_cg_iters)
      throw SolverDiverged("velocity Helmholtz solve stalled, residual " +
                           std::to_string(std::sqrt(dot(r, r))));
    x.resize(ndof());
    for (int g = 0; g < ndof(); ++g) x[g] = bc_vals[g] * (1.0 - mask_[g]) + xk[g];
  }

  double pressure_residual_norm(const std::vector<double>& r, double c0) const {
    double s = 0.0;
    for (int e = 0; e < nel_; ++e) {
      const auto& pm = space->geom[e].p_mass;
      for (int i = 0; i < npp2_; ++i) {
        const double val = r[static_cast<size_t>(e) * npp2_ + i];
        s += val * val / pm[i];
      }
    }
    return std::sqrt(s) / c0;
  }

  // The Schur operator annihilates constants; its range is the Euclidean
  // orthogonal complement of the constant vector, so residual and search
  // directions are kept there with the plain mean.
  void remove_pressure_mean(std::vector<double>& p) const {
    double num = 0.0;
    for (double v : p) num += v;
    const double mean = num / static_cast<double>(p.size());
    for (auto& v : p) v -= mean;
  }

  // two-level additive Schwarz: element block solves plus the coarse
  // piecewise-constant correction
  void block_precond(const std::vector<double>& r, std::vector<double>& z) const {
    z.resize(r.size());
    std::vector<double> coarse(nel_);
#pragma omp parallel for schedule(static)
    for (int e = 0; e < nel_; ++e) {
      const double* re = r.data() + static_cast<size_t>(e) * npp2_;
      double* ze = z.data() + static_cast<size_t>(e) * npp2_;
      std::copy_n(re, npp2_, ze);
      p_block_[e].solve_inplace(ze);
      double s = 0.0;
      for (int i = 0; i < npp2_; ++i) s += re[i];
      coarse[e] = s;
    }
    p_coarse_->solve_inplace(coarse.data());
    for (int e = 0; e < nel_; ++e) {
      double* ze = z.data() + static_cast<size_t>(e) * npp2_;
      const double c = coarse[e];
      for (int i = 0; i < npp2_; ++i) ze[i] += c;
    }
  }

  // warm start from the span of recent solutions; returns the guess and
  // leaves b as the remaining right-hand side
  static void project_initial_guess(PressureProjection& proj, std::vector<double>& b,
                                    std::vector<double>& x0) {
    x0.assign(b.size(), 0.0);
    const int k = static_cast<int>(proj.xs.size());
    if (k == 0) return;
    Mat gram(k, k);
    std::vector<double> rhs(k);
    for (int i = 0; i < k; ++i) {
      rhs[i] = 0.0;
      for (size_t q = 0; q < b.size(); ++q) rhs[i] += proj.xs[i][q] * b[q];
      for (int j = 0; j <= i; ++j) {
        double s = 0.0;
        for (size_t q = 0; q < b.size(); ++q) s += proj.xs[i][q] * proj.bs[j][q];
        gram(i, j) = s;
        gram(j, i) = s;
      }
      gram(i, i) *= 1.0 + 1e-12;
      gram(i, i) += 1e-300;
    }
    std::vector<double> a;
    try {
      a = Cholesky(gram).solve(rhs);
    } catch (const std::runtime_error&) {
      proj.clear();
      return;
    }
    std::vector<double> eb(b.size(), 0.0);
    for (int i = 0; i < k; ++i) {
      for (size_t q = 0; q < b.size(); ++q) {
        x0[q] += a[i] * proj.xs[i][q];
        eb[q] += a[i] * proj.bs[i][q];
      }
    }
    for (size_t q = 0; q < b.size(); ++q) b[q] -= eb[q];
  }

  // returns the achieved divergence norm
  double solve_pressure(const std::vector<double>& b_in, double c0, double unorm,
                        std::vector<double>& x, PressureProjection* proj = nullptr) const {
    const size_t n = b_in.size();
    std::vector<double> b = b_in, x0;
    if (proj) project_initial_guess(*proj, b, x0);
    x.assign(n, 0.0);
    std::vector<double> r = b;
    if (p_has_nullspace_) remove_pressure_mean(r);
    const double target =
        (cfg.mode == StepMode::Nonlinear)
            ? std::max(cfg.pressure_tol, 1e-13 * std::max(unorm, 1.0))
            : cfg.pressure_tol * std::max(unorm, 1e-290);
    std::vector<double> z, pk, ap(n);
    block_precond(r, z);
    if (p_has_nullspace_) remove_pressure_mean(z);
    pk = z;
    double rz = 0.0;
    for (size_t i = 0; i < n; ++i) rz += r[i] * z[i];
    double res = pressure_residual_norm(r, c0);
    std::vector<double> best_x = x, best_r = r;
    double best_res = res;
    int since_best = 0;
    int iters_done = 0;
    for (int it = 0; it < cfg.max_cg_iters; ++it) {
      iters_done = it;
      if (res <= target || rz == 0.0) break;
      if (since_best > 250) break;  // rounding floor reached
      schur_apply(pk, ap);
      double pap = 0.0;
      for (size_t i = 0; i < n; ++i) pap += pk[i] * ap[i];
      if (pap <= 0.0) break;
      const double alpha = rz / pap;
      for (size_t i = 0; i < n; ++i) {
        x[i] += alpha * pk[i];
        r[i] -= alpha * ap[i];
      }
      if (p_has_nullspace_) remove_pressure_mean(r);
      block_precond(r, z);
      if (p_has_nullspace_) remove_pressure_mean(z);
      double rz_new = 0.0;
      for (size_t i = 0; i < n; ++i) rz_new += r[i] * z[i];
      const double beta = rz_new / rz;
      rz = rz_new;
      for (size_t i = 0; i < n; ++i) pk[i] = z[i] + beta * pk[i];
      res = pressure_residual_norm(r, c0);
      if (res < best_res) {
        best_res = res;
        best_x = x;
        best_r = r;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    if (res > best_res) {
      x = best_x;
      r = best_r;
      res = best_res;
    }
    stat_press_iters += iters_done;
    if (res > 10.0 * target)
      throw SolverDiverged("pressure solve stalled, divergence norm " + std::to_string(res));
    if (!x0.empty())
      for (size_t i = 0; i < n; ++i) x[i] += x0[i];
    if (proj) {
      std::vector<double> ex(n);
      for (size_t i = 0; i < n; ++i) ex[i] = b_in[i] - r[i];
      proj->push(x, ex);
    }
    return res;
  }

  void add_weak_force(const std::vector<double>& force_local, std::vector<double>& out) const {
    std::vector<double>& tmp = scratch(2);
    tmp.resize(static_cast<size_t>(nel_) * npe_);
    for (int e = 0; e < nel_; ++e) {
      const auto& bm = space->geom[e].mass;
      for (int q = 0; q < npe_; ++q)
        tmp[static_cast<size_t>(e) * npe_ + q] =
            bm[q] * force_local[static_cast<size_t>(e) * npe_ + q];
    }
    space->gather_add(tmp, out);
  }

  // convection of the configured mode: weak-form global vectors
  void convection_weak(const std::vector<double>& u, const std::vector<double>& v,
                       std::vector<double>& out_u, std::vector<double>& out_v) const {
    if (cfg.mode != StepMode::Nonlinear && !has_base_)
      throw std::runtime_error("convection: no base flow set for linearized/adjoint mode");
    const auto& re = RefElement::get(space->order);
    std::vector<double>& ul = scratch(0);
    std::vector<double>& vl = scratch(1);
    space->scatter(u, ul);
    space->scatter(v, vl);

    std::vector<double>& resu = scratch(2);
    std::vector<double>& resv = scratch(3);
    resu.resize(static_cast<size_t>(nel_) * npe_);
    resv.resize(resu.size());

#pragma omp parallel for schedule(static)
    for (int e = 0; e < nel_; ++e) {
      double gx[kMaxNpe], gy[kMaxNpe], wk[kMaxNpe], t1[kMaxNpe], t2[kMaxNpe];
      double ud[kMaxNpe], vd[kMaxNpe], udx[kMaxNpe], udy[kMaxNpe], vdx[kMaxNpe], vdy[kMaxNpe];
      double cu[kMaxNpe], cv[kMaxNpe];
      const auto& ge = space->geom[e];
      const double* ue = ul.data() + static_cast<size_t>(e) * npe_;
      const double* ve = vl.data() + static_cast<size_t>(e) * npe_;
      auto to_da_grad = [&](const double* comp, double* val, double* ddx, double* ddy) {
        deriv_xi(re, comp, gx);
        deriv_eta(re, comp, gy);
        tensor_apply(re.to_da, re.to_da, comp, val, wk);
        tensor_apply(re.to_da, re.to_da, gx, t1, wk);
        tensor_apply(re.to_da, re.to_da, gy, t2, wk);
        for (int qd = 0; qd < nd2_; ++qd) {
          ddx[qd] = ge.d_rx[qd] * t1[qd] + ge.d_sx[qd] * t2[qd];
          ddy[qd] = ge.d_ry[qd] * t1[qd] + ge.d_sy[qd] * t2[qd];
        }
      };
      to_da_grad(ue, ud, udx, udy);
      to_da_grad(ve, vd, vdx, vdy);

      const size_t off = static_cast<size_t>(e) * nd2_;
      switch (cfg.mode) {
        case StepMode::Nonlinear:
          for (int qd = 0; qd < nd2_; ++qd) {
            cu[qd] = ud[qd] * udx[qd] + vd[qd] * udy[qd];
            cv[qd] = ud[qd] * vdx[qd] + vd[qd] * vdy[qd];
          }
          break;
        case StepMode::Linearized:
          for (int qd = 0; qd < nd2_; ++qd) {
            const double U = base_du_.val[off + qd], V = base_dv_.val[off + qd];
            cu[qd] = U * udx[qd] + V * udy[qd] + ud[qd] * base_du_.dx[off + qd] +
                     vd[qd] * base_du_.dy[off + qd];
            cv[qd] = U * vdx[qd] + V * vdy[qd] + ud[qd] * base_dv_.dx[off + qd] +
                     vd[qd] * base_dv_.dy[off + qd];
          }
          break;
        case StepMode::Adjoint:
          // -(U.grad)u+ + (grad U)^T u+
          for (int qd = 0; qd < nd2_; ++qd) {
            const double U = base_du_.val[off + qd], V = base_dv_.val[off + qd];
            cu[qd] = -(U * udx[qd] + V * udy[qd]) + base_du_.dx[off + qd] * ud[qd] +
                     base_dv_.dx[off + qd] * vd[qd];
            cv[qd] = -(U * vdx[qd] + V * vdy[qd]) + base_du_.dy[off + qd] * ud[qd] +
                     base_dv_.dy[off + qd] * vd[qd];
          }
          break;
      }
      for (int qd = 0; qd < nd2_; ++qd) {
        cu[qd] *= ge.d_mass[qd];
        cv[qd] *= ge.d_mass[qd];
      }
      tensor_apply(re.to_da_t, re.to_da_t, cu, resu.data() + static_cast<size_t>(e) * npe_, wk);
      tensor_apply(re.to_da_t, re.to_da_t, cv, resv.data() + static_cast<size_t>(e) * npe_, wk);
    }
    out_u.assign(ndof(), 0.0);
    out_v.assign(ndof(), 0.0);
    space->gather_add(resu, out_u);
    space->gather_add(resv, out_v);
  }
};

// Consistency diagnostic between the discrete linearized operator and its
// adjoint: returns (<v, L_lin u>, <L_adj v, u>).
inline std::pair<double, double> discrete_adjoint_check(FlowSolver& lin, FlowSolver& adj,
                                                        const std::vector<double>& u0,
                                                        const std::vector<double>& u1,
                                                        const std::vector<double>& v0,
                                                        const std::vector<double>& v1) {
  std::vector<double> lu0, lu1, av0, av1;
  lin.spatial_operator_weak(u0, u1, lu0, lu1);
  adj.spatial_operator_weak(v0, v1, av0, av1);
  const double lhs = dot(v0, lu0) + dot(v1, lu1);
  const double rhs = dot(u0, av0) + dot(u1, av1);
  return {lhs, rhs};
}

}  // namespace sstab

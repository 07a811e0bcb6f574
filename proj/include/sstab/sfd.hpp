#pragma once

#include <complex>

#include "sstab/navier_stokes.hpp"

namespace sstab {

// Selective frequency damping: the forcing -chi (u - w) drives the flow
// toward the fixed point of the low-pass filter w_t = (u - w) / Delta. The
// filter is integrated with the same variable-step BDF/EXT scheme as the
// flow so the coupled update is order consistent.
struct SFDState {
  double chi = 0.5;
  double delta = 4.05;
  std::vector<double> wu, wv;  // filtered velocity dofs
  std::array<std::vector<double>, 3> wu_hist, wv_hist;
  std::array<std::vector<double>, 3> fu_hist, fv_hist;  // filter right-hand sides
  std::array<double, 3> t_hist{};
  int nhist = 0;
  std::vector<std::pair<double, double>> history;  // (t, eps) convergence trace
};

inline SFDState make_sfd_state(const FlowState& flow, double chi, double delta) {
  SFDState s;
  s.chi = chi;
  s.delta = delta;
  s.wu = flow.u;
  s.wv = flow.v;
  return s;
}

// forcing f = -chi (u - w) as pointwise nodal fields (local layout)
inline void sfd_force(const FlowSolver& solver, const FlowState& flow, const SFDState& sfd,
                      std::vector<double>& fu, std::vector<double>& fv) {
  if (sfd.wu.size() != flow.u.size())
    throw std::invalid_argument("sfd_force: filter state lives on a different mesh");
  const int n = solver.ndof();
  std::vector<double> du(n), dv(n);
  for (int g = 0; g < n; ++g) {
    du[g] = -sfd.chi * (flow.u[g] - sfd.wu[g]);
    dv[g] = -sfd.chi * (flow.v[g] - sfd.wv[g]);
  }
  solver.space->scatter(du, fu);
  solver.space->scatter(dv, fv);
}

// one BDF/EXT step of w_t = (u - w) / Delta, matching the flow integrator's
// current order and time levels; called after the flow state advanced to
// time t_new with step dt.
inline void sfd_filter_update(SFDState& s, const std::vector<double>& u_prev,
                              const std::vector<double>& v_prev, double t_prev, double t_new) {
  const int n = static_cast<int>(u_prev.size());
  std::vector<double> fu(n), fv(n);
  for (int g = 0; g < n; ++g) {
    fu[g] = (u_prev[g] - s.wu[g]) / s.delta;
    fv[g] = (v_prev[g] - s.wv[g]) / s.delta;
  }
  // push current level
  auto push = [](std::array<std::vector<double>, 3>& ring, std::vector<double> x) {
    ring[2] = std::move(ring[1]);
    ring[1] = std::move(ring[0]);
    ring[0] = std::move(x);
  };
  push(s.wu_hist, s.wu);
  push(s.wv_hist, s.wv);
  push(s.fu_hist, std::move(fu));
  push(s.fv_hist, std::move(fv));
  for (int k = 2; k > 0; --k) s.t_hist[k] = s.t_hist[k - 1];
  s.t_hist[0] = t_prev;
  s.nhist = std::min(s.nhist + 1, 3);

  const int q = s.nhist;
  std::vector<double> times{t_new};
  for (int j = 0; j < q; ++j) times.push_back(s.t_hist[j]);
  const auto cbdf = bdf_weights(times);
  std::vector<double> htimes(times.begin() + 1, times.end());
  const auto cext = ext_weights(t_new, htimes);

  for (int g = 0; g < n; ++g) {
    double su = 0.0, sv = 0.0;
    for (int j = 0; j < q; ++j) {
      su += cext[j] * s.fu_hist[j][g] - cbdf[j + 1] * s.wu_hist[j][g];
      sv += cext[j] * s.fv_hist[j][g] - cbdf[j + 1] * s.wv_hist[j][g];
    }
    s.wu[g] = su / cbdf[0];
    s.wv[g] = sv / cbdf[0];
  }
}

// L2 norms of u - w per component and combined (the convergence indicator)
struct SFDConvergence {
  double eps_u = 0.0, eps_v = 0.0, eps = 0.0;
};

inline SFDConvergence sfd_convergence(const FlowSolver& solver, const FlowState& flow,
                                      const SFDState& sfd) {
  if (sfd.wu.size() != flow.u.size())
    throw std::invalid_argument("sfd_convergence: filter state lives on a different mesh");
  const Space& sp = *solver.space;
  std::vector<double> du(flow.u.size()), dv(flow.v.size());
  for (size_t g = 0; g < flow.u.size(); ++g) {
    du[g] = flow.u[g] - sfd.wu[g];
    dv[g] = flow.v[g] - sfd.wv[g];
  }
  std::vector<double> dul, dvl;
  sp.scatter(du, dul);
  sp.scatter(dv, dvl);
  SFDConvergence c;
  c.eps_u = std::sqrt(sp.integrate_product(dul, dul));
  c.eps_v = std::sqrt(sp.integrate_product(dvl, dvl));
  c.eps = std::sqrt(c.eps_u * c.eps_u + c.eps_v * c.eps_v);
  return c;
}

// Stability of the target eigenvalue under the SFD feedback: eigenvalues of
// the 2x2 coupled system [[lambda - chi, chi], [1/Delta, -1/Delta]].
inline bool sfd_predicts_stable(std::complex<double> lambda, double chi, double delta) {
  const std::complex<double> a = lambda - chi;
  const std::complex<double> d(-1.0 / delta, 0.0);
  const std::complex<double> tr = a + d;
  const std::complex<double> det = a * d - chi / delta;
  const std::complex<double> disc = std::sqrt(tr * tr - 4.0 * det);
  const std::complex<double> m1 = 0.5 * (tr + disc);
  const std::complex<double> m2 = 0.5 * (tr - disc);
  return m1.real() < 0.0 && m2.real() < 0.0;
}

}  // namespace sstab

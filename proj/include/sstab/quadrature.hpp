#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sstab/linalg.hpp"

namespace sstab {

// Legendre polynomial L_k(x) by the three-term recurrence.
inline double legendre_eval(int k, double x) {
  if (k == 0) return 1.0;
  if (k == 1) return x;
  double lm = 1.0, l = x;
  for (int n = 2; n <= k; ++n) {
    const double ln = ((2 * n - 1) * x * l - (n - 1) * lm) / n;
    lm = l;
    l = ln;
  }
  return l;
}

// L_k and its first derivative.
inline void legendre_eval_deriv(int k, double x, double& value, double& deriv) {
  if (k == 0) { value = 1.0; deriv = 0.0; return; }
  double lm = 1.0, l = x, dm = 0.0, d = 1.0;
  for (int n = 2; n <= k; ++n) {
    const double ln = ((2 * n - 1) * x * l - (n - 1) * lm) / n;
    const double dn = dm + (2 * n - 1) * l;
    lm = l; l = ln;
    dm = d; d = dn;
  }
  value = l;
  deriv = d;
}

enum class QuadKind { GLL, GL };

// One-dimensional quadrature rule on [-1, 1]. For polynomial order N the
// GLL rule carries N+1 points (velocity grid) and the companion GL rule
// carries N-1 interior points (pressure grid).
struct Quadrature1D {
  QuadKind kind = QuadKind::GLL;
  int order = 0;  // N
  std::vector<double> nodes;
  std::vector<double> weights;

  int num_points() const { return static_cast<int>(nodes.size()); }
};

namespace detail {

constexpr double kNewtonTol = 1e-15;
constexpr int kNewtonMaxIter = 100;

// Roots of L'_N (interior GLL nodes), Newton from Chebyshev-Gauss-Lobatto guesses.
inline std::vector<double> gll_interior_nodes(int n) {
  std::vector<double> r;
  r.reserve(n - 1);
  for (int k = 1; k < n; ++k) {
    double x = -std::cos(M_PI * k / n);
    for (int it = 0; it < kNewtonMaxIter; ++it) {
      double l, dl;
      legendre_eval_deriv(n, x, l, dl);
      // L''_N from the Legendre ODE: (1-x^2) L'' = 2x L' - N(N+1) L.
      const double d2l = (2.0 * x * dl - n * (n + 1.0) * l) / (1.0 - x * x);
      const double dx = dl / d2l;
      x -= dx;
      if (std::abs(dx) < kNewtonTol) break;
    }
    r.push_back(x);
  }
  return r;
}

// Roots of L_m (Gauss-Legendre nodes), Newton from Chebyshev guesses.
inline std::vector<double> gauss_nodes(int m) {
  std::vector<double> r;
  r.reserve(m);
  for (int k = 0; k < m; ++k) {
    double x = -std::cos(M_PI * (k + 0.75) / (m + 0.5));
    for (int it = 0; it < kNewtonMaxIter; ++it) {
      double l, dl;
      legendre_eval_deriv(m, x, l, dl);
      const double dx = l / dl;
      x -= dx;
      if (std::abs(dx) < kNewtonTol) break;
    }
    r.push_back(x);
  }
  return r;
}

}  // namespace detail

// Gauss rule with m points (roots of L_m), weights 2/((1-x^2) L'_m^2).
inline Quadrature1D gauss_rule(int m) {
  if (m < 1) throw std::invalid_argument("gauss_rule: need at least one point");
  Quadrature1D q;
  q.kind = QuadKind::GL;
  q.order = m + 1;  // companion velocity order such that num points = order - 1
  q.nodes = detail::gauss_nodes(m);
  q.weights.resize(m);
  for (int i = 0; i < m; ++i) {
    double l, dl;
    legendre_eval_deriv(m, q.nodes[i], l, dl);
    q.weights[i] = 2.0 / ((1.0 - q.nodes[i] * q.nodes[i]) * dl * dl);
  }
  return q;
}

inline Quadrature1D build_quadrature(QuadKind kind, int order) {
  Quadrature1D q;
  q.kind = kind;
  q.order = order;
  if (kind == QuadKind::GLL) {
    if (order < 1)
      throw std::invalid_argument("build_quadrature: GLL requires order >= 1, got " +
                                  std::to_string(order));
    q.nodes.push_back(-1.0);
    for (double x : detail::gll_interior_nodes(order)) q.nodes.push_back(x);
    q.nodes.push_back(1.0);
    q.weights.resize(order + 1);
    for (int i = 0; i <= order; ++i) {
      const double l = legendre_eval(order, q.nodes[i]);
      q.weights[i] = 2.0 / (order * (order + 1.0) * l * l);
    }
  } else {
    if (order < 2)
      throw std::invalid_argument("build_quadrature: GL requires order >= 2, got " +
                                  std::to_string(order));
    // N-1 interior points: the Gauss rule of L_{N-1}, exact through degree 2N-3.
    Quadrature1D g = gauss_rule(order - 1);
    q.nodes = std::move(g.nodes);
    q.weights = std::move(g.weights);
  }
  return q;
}

enum class OperatorRole { Differentiation, Interpolation };

struct OperatorMatrix1D {
  Mat mat;
  OperatorRole role = OperatorRole::Interpolation;
};

namespace detail {

inline std::vector<double> barycentric_weights(const std::vector<double>& x) {
  const int n = static_cast<int>(x.size());
  std::vector<double> w(n, 1.0);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k) {
      if (k == j) continue;
      const double d = x[j] - x[k];
      if (d == 0.0) throw std::invalid_argument("duplicate interpolation nodes");
      w[j] /= d;
    }
  return w;
}

}  // namespace detail

// Derivative of the Lagrange basis at its own nodes (barycentric form).
inline OperatorMatrix1D build_diff_matrix(const Quadrature1D& q) {
  if (q.kind != QuadKind::GLL)
    throw std::invalid_argument("build_diff_matrix: differentiation lives on the GLL grid");
  const auto& x = q.nodes;
  const int n = q.num_points();
  const auto w = detail::barycentric_weights(x);
  OperatorMatrix1D d;
  d.role = OperatorRole::Differentiation;
  d.mat = Mat(n, n);
  for (int i = 0; i < n; ++i) {
    double diag = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double v = (w[j] / w[i]) / (x[i] - x[j]);
      d.mat(i, j) = v;
      diag -= v;
    }
    d.mat(i, i) = diag;
  }
  return d;
}

// Lagrange interpolation from source nodes to arbitrary target points.
inline OperatorMatrix1D build_interp_matrix(const std::vector<double>& source_nodes,
                                            const std::vector<double>& target_points) {
  const int ns = static_cast<int>(source_nodes.size());
  const int nt = static_cast<int>(target_points.size());
  const auto w = detail::barycentric_weights(source_nodes);
  OperatorMatrix1D op;
  op.role = OperatorRole::Interpolation;
  op.mat = Mat(nt, ns);
  for (int t = 0; t < nt; ++t) {
    const double xt = target_points[t];
    int hit = -1;
    for (int j = 0; j < ns; ++j)
      if (xt == source_nodes[j]) { hit = j; break; }
    if (hit >= 0) {
      op.mat(t, hit) = 1.0;
      continue;
    }
    double denom = 0.0;
    for (int j = 0; j < ns; ++j) denom += w[j] / (xt - source_nodes[j]);
    for (int j = 0; j < ns; ++j) op.mat(t, j) = (w[j] / (xt - source_nodes[j])) / denom;
  }
  return op;
}

// Legendre coefficients per direction; index k runs 0..N.
using ModalCoefficients = std::vector<double>;

// Forward (nodal -> modal) Legendre transform on the GLL rule. Row k is
// w_i L_k(x_i) / gamma_k with gamma_k the discrete norm, so the transform
// inverts modal_to_nodal exactly on degree <= N data.
inline Mat nodal_to_modal_matrix(const Quadrature1D& q) {
  const int np = q.num_points();
  const int n = q.order;
  Mat m(n + 1, np);
  for (int k = 0; k <= n; ++k) {
    double gamma = 0.0;
    for (int i = 0; i < np; ++i) {
      const double lk = legendre_eval(k, q.nodes[i]);
      m(k, i) = q.weights[i] * lk;
      gamma += q.weights[i] * lk * lk;
    }
    for (int i = 0; i < np; ++i) m(k, i) /= gamma;
  }
  return m;
}

inline Mat modal_to_nodal_matrix(const Quadrature1D& q) {
  const int np = q.num_points();
  const int n = q.order;
  Mat m(np, n + 1);
  for (int i = 0; i < np; ++i)
    for (int k = 0; k <= n; ++k) m(i, k) = legendre_eval(k, q.nodes[i]);
  return m;
}

inline ModalCoefficients nodal_to_modal(const std::vector<double>& values, const Quadrature1D& q) {
  if (q.kind != QuadKind::GLL)
    throw std::invalid_argument("nodal_to_modal: values must live on the GLL grid");
  return matvec(nodal_to_modal_matrix(q), values);
}

inline std::vector<double> modal_to_nodal(const ModalCoefficients& coeffs, const Quadrature1D& q) {
  return matvec(modal_to_nodal_matrix(q), coeffs);
}

// Exponential decay fit |u_k| ~ c exp(-sigma k) over the tail of the spectrum.
struct DecayFit {
  double c = 0.0;      // amplitude, exp(intercept)
  double sigma = 0.0;  // decay rate, -slope
};

// Least-squares line through (k, log|u_k|) over the last kFitWindow modes.
// Coefficients below the floor are excluded; fewer than two usable points is
// a degenerate fit and yields nullopt. The floor combines an absolute cutoff
// (log of an exact zero is meaningless) with a relative one at the rounding
// noise level of the modal transform, so that machine-noise tails of exactly
// representable data are not mistaken for spectral content.
constexpr int kFitWindow = 4;
constexpr double kZeroFloor = 1e-30;
constexpr double kNoiseFloor = 1e-13;

inline std::optional<DecayFit> fit_decay(const ModalCoefficients& coeffs) {
  const int n = static_cast<int>(coeffs.size()) - 1;
  const int k0 = std::max(0, n - (kFitWindow - 1));
  double amax = 0.0;
  for (double v : coeffs) amax = std::max(amax, std::abs(v));
  const double floor = std::max(kZeroFloor, kNoiseFloor * amax);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (int k = k0; k <= n; ++k) {
    const double a = std::abs(coeffs[k]);
    if (a < floor) continue;
    const double y = std::log(a);
    sx += k; sy += y; sxx += double(k) * k; sxy += k * y;
    ++m;
  }
  if (m < 2) return std::nullopt;
  const double det = m * sxx - sx * sx;
  if (det == 0.0) return std::nullopt;
  const double slope = (m * sxy - sx * sy) / det;
  const double intercept = (sy * sxx - sx * sxy) / det;
  return DecayFit{std::exp(intercept), -slope};
}

}  // namespace sstab

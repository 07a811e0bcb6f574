#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "sstab/linalg.hpp"

namespace sstab {

using cplx = std::complex<double>;

// Dense complex matrix, row-major. Used only for small Rayleigh-quotient
// blocks (dimension <= a few hundred).
struct CMat {
  int rows = 0;
  int cols = 0;
  std::vector<cplx> a;

  CMat() = default;
  CMat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, cplx(0.0)) {}

  cplx& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  cplx operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

  static CMat identity(int n) {
    CMat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

namespace detail {

// Householder reduction to upper Hessenberg form, accumulating Q so that
// A = Q H Q^*.
inline void hessenberg_reduce(CMat& h, CMat& q) {
  const int n = h.rows;
  q = CMat::identity(n);
  for (int k = 0; k + 2 < n; ++k) {
    double xnorm = 0.0;
    for (int i = k + 1; i < n; ++i) xnorm += std::norm(h(i, k));
    xnorm = std::sqrt(xnorm);
    if (xnorm == 0.0) continue;
    cplx x0 = h(k + 1, k);
    cplx alpha = (std::abs(x0) == 0.0) ? cplx(-xnorm) : -x0 / std::abs(x0) * xnorm;
    std::vector<cplx> v(n, cplx(0.0));
    v[k + 1] = x0 - alpha;
    for (int i = k + 2; i < n; ++i) v[i] = h(i, k);
    double vnorm2 = 0.0;
    for (int i = k + 1; i < n; ++i) vnorm2 += std::norm(v[i]);
    if (vnorm2 == 0.0) continue;
    const double beta = 2.0 / vnorm2;
    // H <- P H, P = I - beta v v^*
    for (int j = 0; j < n; ++j) {
      cplx s(0.0);
      for (int i = k + 1; i < n; ++i) s += std::conj(v[i]) * h(i, j);
      s *= beta;
      for (int i = k + 1; i < n; ++i) h(i, j) -= v[i] * s;
    }
    // H <- H P
    for (int i = 0; i < n; ++i) {
      cplx s(0.0);
      for (int j = k + 1; j < n; ++j) s += h(i, j) * v[j];
      s *= beta;
      for (int j = k + 1; j < n; ++j) h(i, j) -= s * std::conj(v[j]);
    }
    // Q <- Q P
    for (int i = 0; i < n; ++i) {
      cplx s(0.0);
      for (int j = k + 1; j < n; ++j) s += q(i, j) * v[j];
      s *= beta;
      for (int j = k + 1; j < n; ++j) q(i, j) -= s * std::conj(v[j]);
    }
    for (int i = k + 2; i < n; ++i) h(i, k) = 0.0;
    h(k + 1, k) = alpha;
  }
}

inline void givens(cplx f, cplx g, cplx& c, cplx& s) {
  // unitary [c conj(s); -s conj(c)]? use standard: G = [[conj(c), conj(s)], [-s, c]] ...
  // We use the simple form: r = sqrt(|f|^2+|g|^2), c = f/r, s = g/r with
  // G^* = [[conj(c), conj(s)], [-s? ...]] -- applied explicitly below instead.
  const double r = std::sqrt(std::norm(f) + std::norm(g));
  if (r == 0.0) { c = 1.0; s = 0.0; return; }
  c = f / r;
  s = g / r;
}

}  // namespace detail

// Shifted QR iteration on an upper Hessenberg complex matrix. On return H is
// upper triangular (the Schur form) and Z accumulates the unitary similarity:
// H_in = Z H_out Z^*.
inline void hessenberg_schur(CMat& h, CMat& z, int max_sweeps_per_eig = 40) {
  const int n = h.rows;
  if (z.rows != n) z = CMat::identity(n);
  const double eps = 1e-15;
  int hi = n - 1;
  int sweeps = 0;
  while (hi > 0) {
    // deflate converged subdiagonals
    int lo = hi;
    while (lo > 0) {
      const double off = std::abs(h(lo, lo - 1));
      if (off <= eps * (std::abs(h(lo, lo)) + std::abs(h(lo - 1, lo - 1)))) {
        h(lo, lo - 1) = 0.0;
        break;
      }
      --lo;
    }
    if (lo == hi) {
      --hi;
      sweeps = 0;
      continue;
    }

    // Wilkinson shift from the trailing 2x2 of the active block
    const cplx a = h(hi - 1, hi - 1), b = h(hi - 1, hi), c = h(hi, hi - 1), d = h(hi, hi);
    const cplx tr = a + d, det = a * d - b * c;
    const cplx disc = std::sqrt(tr * tr - 4.0 * det);
    const cplx mu1 = 0.5 * (tr + disc), mu2 = 0.5 * (tr - disc);
    cplx mu = (std::abs(mu1 - d) < std::abs(mu2 - d)) ? mu1 : mu2;
    if (++sweeps % 14 == 0) mu = d + cplx(std::abs(h(hi, hi - 1)), 0.0);  // exceptional shift
    if (sweeps > max_sweeps_per_eig * (hi - lo + 1))
      throw std::runtime_error("hessenberg_schur: QR iteration failed to converge");

    // explicit-shift QR sweep on the active block: since mu*I commutes with
    // the similarity, shifting, factoring and unshifting is exact
    for (int i = lo; i <= hi; ++i) h(i, i) -= mu;
    std::vector<cplx> cs(hi + 1), sn(hi + 1);
    for (int k = lo; k < hi; ++k) {
      cplx c1, s1;
      detail::givens(h(k, k), h(k + 1, k), c1, s1);
      cs[k] = c1;
      sn[k] = s1;
      for (int j = k; j < n; ++j) {
        const cplx t1 = h(k, j), t2 = h(k + 1, j);
        h(k, j) = std::conj(c1) * t1 + std::conj(s1) * t2;
        h(k + 1, j) = -s1 * t1 + c1 * t2;
      }
      h(k + 1, k) = 0.0;
    }
    for (int k = lo; k < hi; ++k) {
      const cplx c1 = cs[k], s1 = sn[k];
      const int top = std::min(hi, k + 1);
      for (int i = 0; i <= top; ++i) {
        const cplx t1 = h(i, k), t2 = h(i, k + 1);
        h(i, k) = t1 * c1 + t2 * s1;
        h(i, k + 1) = -t1 * std::conj(s1) + t2 * std::conj(c1);
      }
      for (int i = 0; i < n; ++i) {
        const cplx t1 = z(i, k), t2 = z(i, k + 1);
        z(i, k) = t1 * c1 + t2 * s1;
        z(i, k + 1) = -t1 * std::conj(s1) + t2 * std::conj(c1);
      }
    }
    for (int i = lo; i <= hi; ++i) h(i, i) += mu;
  }
  for (int i = 1; i < n; ++i)
    for (int j = 0; j < i; ++j) h(i, j) = 0.0;
}

// Swap adjacent diagonal entries i, i+1 of a triangular Schur form with a
// unitary similarity, updating Z accordingly.
inline void schur_swap(CMat& t, CMat& z, int i) {
  const int n = t.rows;
  const cplx a = t(i, i), b = t(i, i + 1), d = t(i + 1, i + 1);
  // eigenvector of the 2x2 block for eigenvalue d: (a - d) x = -b
  cplx c1, s1;
  detail::givens(b, d - a, c1, s1);
  // rotate so the eigenvector [b; d-a] maps to e1
  for (int j = 0; j < n; ++j) {
    const cplx t1 = t(i, j), t2 = t(i + 1, j);
    t(i, j) = std::conj(c1) * t1 + std::conj(s1) * t2;
    t(i + 1, j) = -s1 * t1 + c1 * t2;
  }
  for (int r = 0; r < n; ++r) {
    const cplx t1 = t(r, i), t2 = t(r, i + 1);
    t(r, i) = t1 * c1 + t2 * s1;
    t(r, i + 1) = -t1 * std::conj(s1) + t2 * std::conj(c1);
    const cplx z1 = z(r, i), z2 = z(r, i + 1);
    z(r, i) = z1 * c1 + z2 * s1;
    z(r, i + 1) = -z1 * std::conj(s1) + z2 * std::conj(c1);
  }
  t(i + 1, i) = 0.0;
}

struct DenseEig {
  std::vector<cplx> values;
  CMat vectors;  // columns are unit-norm right eigenvectors
};

// Full eigendecomposition of a small dense complex matrix: Hessenberg
// reduction, shifted QR, then triangular back-substitution for the vectors.
inline DenseEig eig_dense(CMat a) {
  const int n = a.rows;
  if (n == 0) return {};
  CMat q;
  detail::hessenberg_reduce(a, q);
  hessenberg_schur(a, q);

  DenseEig out;
  out.values.resize(n);
  for (int i = 0; i < n; ++i) out.values[i] = a(i, i);

  CMat y(n, n);
  for (int j = 0; j < n; ++j) {
    const cplx lam = a(j, j);
    y(j, j) = 1.0;
    for (int i = j - 1; i >= 0; --i) {
      cplx s(0.0);
      for (int k = i + 1; k <= j; ++k) s += a(i, k) * y(k, j);
      cplx den = a(i, i) - lam;
      if (std::abs(den) < 1e-300) den = cplx(1e-300);
      y(i, j) = -s / den;
    }
  }
  out.vectors = CMat(n, n);
  for (int j = 0; j < n; ++j) {
    double nrm = 0.0;
    for (int i = 0; i < n; ++i) {
      cplx s(0.0);
      for (int k = 0; k <= j; ++k) s += q(i, k) * y(k, j);
      out.vectors(i, j) = s;
      nrm += std::norm(s);
    }
    nrm = std::sqrt(nrm);
    if (nrm > 0.0)
      for (int i = 0; i < n; ++i) out.vectors(i, j) /= nrm;
  }
  return out;
}

}  // namespace sstab

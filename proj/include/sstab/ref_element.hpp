#pragma once

#include <map>
#include <memory>

#include "sstab/quadrature.hpp"

namespace sstab {

// Cached reference-element operators for one polynomial order: quadrature
// rules, differentiation, interpolation to the pressure and dealiasing grids,
// modal transforms and parent-to-child interpolation.
struct RefElement {
  int n = 0;    // polynomial order
  int np = 0;   // N+1 velocity points per direction
  int npp = 0;  // N-1 pressure points per direction
  int nd = 0;   // dealias points per direction
  Quadrature1D gll;
  Quadrature1D gl;       // pressure rule
  Quadrature1D dealias;  // Gauss rule with ceil(3N/2)+1 points
  Mat d1;                // differentiation on GLL
  Mat to_gl, to_gl_t;    // GLL -> GL interpolation and transpose
  Mat to_da, to_da_t;    // GLL -> dealias interpolation and transpose
  Mat n2m, m2n;          // nodal<->modal Legendre transforms
  Mat child[2];          // GLL -> half-interval GLL, [-1,0] and [0,1]
  std::vector<double> bary;  // barycentric weights of the GLL nodes

  static const RefElement& get(int order) {
    static std::map<int, std::unique_ptr<RefElement>> cache;
    auto it = cache.find(order);
    if (it == cache.end()) {
      auto re = std::make_unique<RefElement>();
      re->build(order);
      it = cache.emplace(order, std::move(re)).first;
    }
    return *it->second;
  }

  void build(int order) {
    n = order;
    np = n + 1;
    npp = n - 1;
    nd = (3 * n + 1) / 2 + 1;  // ceil(3N/2) + 1
    gll = build_quadrature(QuadKind::GLL, n);
    gl = build_quadrature(QuadKind::GL, n);
    dealias = gauss_rule(nd);
    d1 = build_diff_matrix(gll).mat;
    to_gl = build_interp_matrix(gll.nodes, gl.nodes).mat;
    to_gl_t = transpose(to_gl);
    to_da = build_interp_matrix(gll.nodes, dealias.nodes).mat;
    to_da_t = transpose(to_da);
    n2m = nodal_to_modal_matrix(gll);
    m2n = modal_to_nodal_matrix(gll);
    for (int c = 0; c < 2; ++c) {
      std::vector<double> half(np);
      for (int i = 0; i < np; ++i) half[i] = 0.5 * (gll.nodes[i] - 1.0) + c;
      child[c] = build_interp_matrix(gll.nodes, half).mat;
    }
    bary = detail::barycentric_weights(gll.nodes);
  }

  // Lagrange basis values at a point (barycentric form).
  void basis_at(double x, double* out) const {
    for (int j = 0; j < np; ++j)
      if (x == gll.nodes[j]) {
        for (int k = 0; k < np; ++k) out[k] = (k == j) ? 1.0 : 0.0;
        return;
      }
    double denom = 0.0;
    for (int j = 0; j < np; ++j) {
      out[j] = bary[j] / (x - gll.nodes[j]);
      denom += out[j];
    }
    for (int j = 0; j < np; ++j) out[j] /= denom;
  }
};

// out = (B kron A) in : out[jb*ra + ia] = sum_{i,j} A(ia,i) B(jb,j) in[j*na + i]
// A is ra x na (acts along the fast x index), B is rb x nb (slow y index).
inline void tensor_apply(const Mat& a, const Mat& b, const double* in, double* out,
                         double* work) {
  const int ra = a.rows, na = a.cols, rb = b.rows, nb = b.cols;
  // work[j*ra + ia] = sum_i A(ia,i) in[j*na + i]
  for (int j = 0; j < nb; ++j)
    for (int ia = 0; ia < ra; ++ia) {
      double s = 0.0;
      const double* arow = &a.a[static_cast<size_t>(ia) * na];
      const double* inrow = in + static_cast<size_t>(j) * na;
      for (int i = 0; i < na; ++i) s += arow[i] * inrow[i];
      work[static_cast<size_t>(j) * ra + ia] = s;
    }
  for (int jb = 0; jb < rb; ++jb)
    for (int ia = 0; ia < ra; ++ia) {
      double s = 0.0;
      const double* brow = &b.a[static_cast<size_t>(jb) * nb];
      for (int j = 0; j < nb; ++j) s += brow[j] * work[static_cast<size_t>(j) * ra + ia];
      out[static_cast<size_t>(jb) * ra + ia] = s;
    }
}

}  // namespace sstab

#pragma once

#include <cassert>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace sstab {

// Dense row-major matrix, sized for reference-element operators and
// small projection/eigenvalue problems (dimensions up to a few hundred).
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

inline void matvec(const Mat& m, const double* x, double* y) {
  for (int i = 0; i < m.rows; ++i) {
    double s = 0.0;
    const double* row = &m.a[static_cast<size_t>(i) * m.cols];
    for (int j = 0; j < m.cols; ++j) s += row[j] * x[j];
    y[i] = s;
  }
}

inline std::vector<double> matvec(const Mat& m, const std::vector<double>& x) {
  assert(static_cast<int>(x.size()) == m.cols);
  std::vector<double> y(m.rows);
  matvec(m, x.data(), y.data());
  return y;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  assert(a.cols == b.rows);
  Mat c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (int j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline Mat transpose(const Mat& m) {
  Mat t(m.cols, m.rows);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  return t;
}

// In-place Cholesky factorization (lower triangle). Throws on loss of
// positive definiteness.
struct Cholesky {
  Mat l;

  explicit Cholesky(Mat m) : l(std::move(m)) {
    const int n = l.rows;
    assert(n == l.cols);
    for (int j = 0; j < n; ++j) {
      double d = l(j, j);
      for (int k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
      if (!(d > 0.0)) throw std::runtime_error("Cholesky: matrix not positive definite");
      const double dj = std::sqrt(d);
      l(j, j) = dj;
      for (int i = j + 1; i < n; ++i) {
        double s = l(i, j);
        for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
        l(i, j) = s / dj;
      }
    }
  }

  void solve_inplace(double* x) const {
    const int n = l.rows;
    for (int i = 0; i < n; ++i) {
      double s = x[i];
      for (int k = 0; k < i; ++k) s -= l(i, k) * x[k];
      x[i] = s / l(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
      double s = x[i];
      for (int k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
      x[i] = s / l(i, i);
    }
  }

  std::vector<double> solve(std::vector<double> b) const {
    solve_inplace(b.data());
    return b;
  }
};

// LU with partial pivoting for small unsymmetric systems.
struct Lu {
  Mat lu;
  std::vector<int> piv;

  explicit Lu(Mat m) : lu(std::move(m)), piv(lu.rows) {
    const int n = lu.rows;
    assert(n == lu.cols);
    for (int i = 0; i < n; ++i) piv[i] = i;
    for (int k = 0; k < n; ++k) {
      int p = k;
      double best = std::abs(lu(k, k));
      for (int i = k + 1; i < n; ++i)
        if (std::abs(lu(i, k)) > best) { best = std::abs(lu(i, k)); p = i; }
      if (best == 0.0) throw std::runtime_error("Lu: singular matrix");
      if (p != k) {
        for (int j = 0; j < n; ++j) std::swap(lu(k, j), lu(p, j));
        std::swap(piv[k], piv[p]);
      }
      for (int i = k + 1; i < n; ++i) {
        lu(i, k) /= lu(k, k);
        const double lik = lu(i, k);
        for (int j = k + 1; j < n; ++j) lu(i, j) -= lik * lu(k, j);
      }
    }
  }

  std::vector<double> solve(const std::vector<double>& b) const {
    const int n = lu.rows;
    std::vector<double> x(n);
    for (int i = 0; i < n; ++i) x[i] = b[piv[i]];
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < i; ++k) x[i] -= lu(i, k) * x[k];
    for (int i = n - 1; i >= 0; --i) {
      for (int k = i + 1; k < n; ++k) x[i] -= lu(i, k) * x[k];
      x[i] /= lu(i, i);
    }
    return x;
  }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline void axpy(double alpha, const std::vector<double>& x, std::vector<double>& y) {
  assert(x.size() == y.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace sstab

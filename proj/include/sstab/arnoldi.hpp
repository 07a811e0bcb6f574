#pragma once

#include <functional>
#include <random>

#include "sstab/eigen_dense.hpp"

namespace sstab {

using OpApply = std::function<void(const std::vector<double>&, std::vector<double>&)>;
using InnerProduct = std::function<double(const std::vector<double>&, const std::vector<double>&)>;

inline InnerProduct euclidean_inner() {
  return [](const std::vector<double>& a, const std::vector<double>& b) { return dot(a, b); };
}

// Krylov decomposition A V_k = V_k S_k + v_k b^T, stored in extended form:
// `vectors` holds the k orthonormal basis vectors plus the residual direction,
// and `s` is the (m+1) x m Rayleigh matrix whose row k carries the coupling.
// After a restart the square block is dense; while pure Arnoldi columns are
// appended it stays upper Hessenberg.
struct KrylovBasis {
  std::vector<std::vector<double>> vectors;  // size k + 1
  Mat s;                                     // (m+1) x m
  int k = 0;
  int capacity = 0;

  static KrylovBasis start(std::vector<double> v0, int m, const InnerProduct& ip) {
    KrylovBasis b;
    b.capacity = m;
    b.s = Mat(m + 1, m);
    const double nrm = std::sqrt(ip(v0, v0));
    if (!(nrm > 0.0)) throw std::invalid_argument("KrylovBasis: zero start vector");
    for (auto& x : v0) x /= nrm;
    b.vectors.push_back(std::move(v0));
    return b;
  }
};

enum class ExtendResult { Extended, InvariantSubspace };

// Orthogonalize w (= A times the newest basis vector) against the basis by
// modified Gram-Schmidt with one reorthogonalization pass when the norm drops
// below 1/sqrt(2), then append the new column of the Rayleigh matrix.
inline ExtendResult arnoldi_extend(KrylovBasis& b, std::vector<double> w,
                                   const InnerProduct& ip) {
  if (b.k >= b.capacity) throw std::invalid_argument("arnoldi_extend: basis at capacity");
  const int col = b.k;
  const int rows = col + 1;
  const double wnorm_in = std::sqrt(ip(w, w));
  std::vector<double> h(rows, 0.0);
  for (int pass = 0; pass < 2; ++pass) {
    for (int i = 0; i < rows; ++i) {
      const double c = ip(b.vectors[i], w);
      h[i] += c;
      axpy(-c, b.vectors[i], w);
    }
    const double wnorm = std::sqrt(ip(w, w));
    if (pass == 0 && wnorm > wnorm_in / std::sqrt(2.0)) break;
  }
  for (int i = 0; i < rows; ++i) b.s(i, col) = h[i];
  const double hnew = std::sqrt(ip(w, w));
  b.k += 1;
  if (hnew <= 1e-14 * std::max(1.0, wnorm_in)) {
    b.s(rows, col) = 0.0;
    // exact invariant subspace: keep the old residual slot as a placeholder
    b.vectors.push_back(std::vector<double>(w.size(), 0.0));
    return ExtendResult::InvariantSubspace;
  }
  b.s(rows, col) = hnew;
  for (auto& x : w) x /= hnew;
  b.vectors.push_back(std::move(w));
  return ExtendResult::Extended;
}

// Ritz pair of the time-stepper operator: multiplier mu of the propagator and
// physical eigenvalue lambda = log(mu) / T_s.
struct RitzPair {
  cplx mu;
  double sigma = 0.0;
  double omega = 0.0;
  double residual = 0.0;
  bool converged = false;
  std::vector<cplx> y;  // eigenvector coordinates in the Krylov basis
};

inline std::vector<RitzPair> ritz_extract(const KrylovBasis& b, double t_sample, int nev) {
  if (b.k == 0) throw std::invalid_argument("ritz_extract: empty basis");
  const int k = b.k;
  CMat sk(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) sk(i, j) = b.s(i, j);
  DenseEig eig = eig_dense(sk);
  std::vector<RitzPair> pairs(k);
  for (int i = 0; i < k; ++i) {
    RitzPair& p = pairs[i];
    p.mu = eig.values[i];
    p.sigma = std::log(std::abs(p.mu)) / t_sample;
    p.omega = std::arg(p.mu) / t_sample;
    cplx c(0.0);
    for (int j = 0; j < k; ++j) c += b.s(k, j) * eig.vectors(j, i);
    p.residual = std::abs(c);
    p.y.resize(k);
    for (int j = 0; j < k; ++j) p.y[j] = eig.vectors(j, i);
  }
  std::sort(pairs.begin(), pairs.end(), [](const RitzPair& a, const RitzPair& c) {
    if (a.sigma != c.sigma) return a.sigma > c.sigma;
    return a.omega > c.omega;
  });
  if (static_cast<int>(pairs.size()) > nev) pairs.resize(nev);
  return pairs;
}

// Krylov-Schur style compression onto the `keep` leading Ritz directions. The
// complex Schur basis of the Rayleigh block is ordered, closed under
// conjugation, and realified, so the compressed decomposition keeps the exact
// Krylov relation with real vectors.
inline void restart(KrylovBasis& b, int keep, const InnerProduct& ip) {
  const int k = b.k;
  if (keep >= k) return;  // nothing to compress
  CMat t(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) t(i, j) = b.s(i, j);
  CMat q;
  detail::hessenberg_reduce(t, q);
  hessenberg_schur(t, q);
  // order by descending |mu| (selection sort with adjacent swaps)
  for (int target = 0; target < keep; ++target) {
    int best = target;
    for (int i = target; i < k; ++i)
      if (std::abs(t(i, i)) > std::abs(t(best, best)) + 0.0) best = i;
    for (int i = best; i > target; --i) schur_swap(t, q, i - 1);
  }
  int kp = keep;
  // do not split a conjugate pair at the cut
  if (kp < k) {
    const cplx a = t(kp - 1, kp - 1), c = t(kp, kp);
    if (std::abs(std::conj(a) - c) <= 1e-8 * (std::abs(a) + 1e-300) && std::abs(a.imag()) > 0.0)
      kp += 1;
  }
  // realify the leading Schur vectors
  std::vector<std::vector<double>> w;
  w.reserve(kp);
  for (int j = 0; j < kp && static_cast<int>(w.size()) < kp; ++j) {
    for (int part = 0; part < 2; ++part) {
      std::vector<double> cand(k);
      for (int i = 0; i < k; ++i) cand[i] = part == 0 ? q(i, j).real() : q(i, j).imag();
      double n0 = std::sqrt(dot(cand, cand));
      if (n0 < 1e-14) continue;
      for (const auto& prev : w) axpy(-dot(prev, cand), prev, cand);
      for (const auto& prev : w) axpy(-dot(prev, cand), prev, cand);
      const double n1 = std::sqrt(dot(cand, cand));
      if (n1 <= 1e-8 * n0) continue;
      for (auto& x : cand) x /= n1;
      w.push_back(std::move(cand));
      if (static_cast<int>(w.size()) == kp) break;
    }
  }
  const int kw = static_cast<int>(w.size());
  if (kw == 0) throw std::runtime_error("restart: empty compression basis");

  // S' = W^T S_k W, coupling row b' = s(k, :) W
  Mat sp(kw, kw);
  std::vector<double> tmp(k);
  for (int j = 0; j < kw; ++j) {
    for (int i = 0; i < k; ++i) {
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += b.s(i, l) * w[j][l];
      tmp[i] = s;
    }
    for (int i = 0; i < kw; ++i) {
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += w[i][l] * tmp[l];
      sp(i, j) = s;
    }
  }
  std::vector<double> bp(kw, 0.0);
  for (int j = 0; j < kw; ++j)
    for (int l = 0; l < k; ++l) bp[j] += b.s(k, l) * w[j][l];

  // compress the long vectors: new_i = sum_l W[i][l] vectors[l]
  const size_t n = b.vectors[0].size();
  std::vector<std::vector<double>> nv(kw, std::vector<double>(n, 0.0));
  for (int i = 0; i < kw; ++i)
    for (int l = 0; l < k; ++l)
      if (w[i][l] != 0.0) axpy(w[i][l], b.vectors[l], nv[i]);
  nv.push_back(std::move(b.vectors[k]));  // residual direction is unchanged

  b.vectors = std::move(nv);
  b.s = Mat(b.capacity + 1, b.capacity);
  for (int i = 0; i < kw; ++i)
    for (int j = 0; j < kw; ++j) b.s(i, j) = sp(i, j);
  for (int j = 0; j < kw; ++j) b.s(kw, j) = bp[j];
  b.k = kw;
  (void)ip;
}

struct SpectrumConfig {
  int m = 200;             // Krylov dimension
  int nev = 50;            // wanted pairs
  double tol = 1e-6;       // residual tolerance
  double t_sample = 0.5;   // sampling period (propagator units)
  int max_cycles = 12;
  uint64_t seed = 20250808;
};

struct SpectrumResult {
  std::vector<RitzPair> pairs;
  std::vector<std::vector<double>> vec_re, vec_im;  // assembled eigenvectors
  int cycles = 0;
  bool all_converged = false;
};

// Outer Arnoldi loop: extend to capacity, test residuals of the wanted pairs,
// compress and continue until convergence or the cycle cap.
inline SpectrumResult solve_spectrum(const OpApply& apply, std::vector<double> v0,
                                     const SpectrumConfig& cfg, const InnerProduct& ip) {
  KrylovBasis basis = KrylovBasis::start(std::move(v0), cfg.m, ip);
  SpectrumResult out;
  bool invariant = false;
  for (int cycle = 0; cycle < cfg.max_cycles && !invariant; ++cycle) {
    out.cycles = cycle + 1;
    while (basis.k < cfg.m) {
      std::vector<double> w;
      apply(basis.vectors[basis.k], w);
      if (arnoldi_extend(basis, std::move(w), ip) == ExtendResult::InvariantSubspace) {
        invariant = true;
        break;
      }
    }
    auto pairs = ritz_extract(basis, cfg.t_sample, basis.k);
    const int want = std::min(cfg.nev, static_cast<int>(pairs.size()));
    int converged = 0;
    for (int i = 0; i < want; ++i)
      if (pairs[i].residual <= cfg.tol) ++converged;
    if (converged >= want || invariant || cycle + 1 == cfg.max_cycles) {
      pairs.resize(want);
      for (auto& p : pairs) p.converged = p.residual <= cfg.tol;
      out.all_converged = converged >= want;
      // assemble the eigenvectors from the basis
      const size_t n = basis.vectors[0].size();
      for (const auto& p : pairs) {
        std::vector<double> re(n, 0.0), im(n, 0.0);
        for (int l = 0; l < static_cast<int>(p.y.size()); ++l) {
          if (p.y[l].real() != 0.0) axpy(p.y[l].real(), basis.vectors[l], re);
          if (p.y[l].imag() != 0.0) axpy(p.y[l].imag(), basis.vectors[l], im);
        }
        out.vec_re.push_back(std::move(re));
        out.vec_im.push_back(std::move(im));
      }
      out.pairs = std::move(pairs);
      return out;
    }
    const int keep = std::min(cfg.m - 2, cfg.nev + std::max(2, (cfg.m - cfg.nev) / 2));
    restart(basis, keep, ip);
  }
  return out;
}

// spatially uncorrelated noise start vector
inline std::vector<double> noise_vector(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace sstab

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>

#include "sstab/space.hpp"

namespace sstab {

// Per-leaf spectral error indicator: value, decay-fit parameters, and whether
// the tail fit was degenerate (too few usable coefficients).
struct ErrorIndicatorRecord {
  double eps = 0.0;
  double c = 0.0;
  double sigma = 0.0;
  bool degenerate = false;
};

namespace detail {

// Integrand of the truncation term: c^2 exp(-2 sigma k) * 2/(2k+1).
// Integrated over [N, inf) by adaptive Simpson on geometrically growing
// segments; for non-decaying spectra (sigma <= 0) the domain is capped so the
// indicator stays finite while preserving the ordering in sigma.
inline double decay_tail_integral(double c, double sigma, int n, double rel_tol = 1e-8) {
  const double c2 = c * c;
  auto f = [&](double k) { return c2 * std::exp(-2.0 * sigma * k) * 2.0 / (2.0 * k + 1.0); };

  auto simpson = [&](double a, double b, int panels) {
    const double h = (b - a) / panels;
    double s = f(a) + f(b);
    for (int i = 1; i < panels; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
    return s * h / 3.0;
  };
  auto adaptive_segment = [&](double a, double b) {
    int panels = 8;
    double prev = simpson(a, b, panels);
    for (int it = 0; it < 16; ++it) {
      panels *= 2;
      const double cur = simpson(a, b, panels);
      if (std::abs(cur - prev) <= rel_tol * std::abs(cur) || cur == 0.0) return cur;
      prev = cur;
    }
    return prev;
  };

  double total = 0.0;
  double a = n;
  const double seg0 = sigma > 0.0 ? std::max(1.0, 0.5 / sigma) : 25.0;
  double len = seg0;
  const double k_cap = sigma > 0.0 ? std::numeric_limits<double>::infinity() : n + 200.0;
  for (int seg = 0; seg < 64; ++seg) {
    double b = std::min(a + len, k_cap);
    total += adaptive_segment(a, b);
    a = b;
    len *= 2.0;
    if (a >= k_cap) break;
    if (f(a) < 1e-300) break;
    if (sigma > 0.0 && f(a) * 2.0 * len < rel_tol * total) break;
  }
  return total;
}

// Evaluate the indicator from a collapsed 1D spectrum.
inline ErrorIndicatorRecord sei_from_spectrum(const ModalCoefficients& spec) {
  const int n = static_cast<int>(spec.size()) - 1;
  ErrorIndicatorRecord rec;
  const double quad_term = spec[n] * spec[n] * 2.0 / (2.0 * n + 1.0);
  auto fit = fit_decay(spec);
  if (!fit) {
    rec.degenerate = true;
    rec.eps = std::sqrt(quad_term);
    return rec;
  }
  rec.c = fit->c;
  rec.sigma = fit->sigma;
  rec.eps = std::sqrt(decay_tail_integral(fit->c, fit->sigma, n) + quad_term);
  return rec;
}

}  // namespace detail

// Spectral error indicator of a single element: per reference direction the
// 2D Legendre coefficients are collapsed by root-sum-square over the
// transverse index, the tail decay is fitted, and the larger of the two
// directional estimates is kept.
inline ErrorIndicatorRecord sei_element(const double* values, int order) {
  const auto& re = RefElement::get(order);
  const int np = re.np;
  std::vector<double> modal(np * np), work(np * np);
  tensor_apply(re.n2m, re.n2m, values, modal.data(), work.data());

  ErrorIndicatorRecord best;
  double zero_check = 0.0;
  for (double v : modal) zero_check += std::abs(v);
  if (zero_check == 0.0) return best;

  for (int dir = 0; dir < 2; ++dir) {
    ModalCoefficients collapsed(np, 0.0);
    for (int k = 0; k < np; ++k) {
      double s = 0.0;
      for (int l = 0; l < np; ++l) {
        const double v = dir == 0 ? modal[l * np + k] : modal[k * np + l];
        s += v * v;
      }
      collapsed[k] = std::sqrt(s);
    }
    ErrorIndicatorRecord rec = detail::sei_from_spectrum(collapsed);
    if (rec.eps >= best.eps) best = rec;
  }
  return best;
}

// Max over velocity components, one record per leaf.
inline std::vector<ErrorIndicatorRecord> sei_field(const Field& f,
                                                   const std::vector<int>& components) {
  if (components.empty()) throw std::invalid_argument("sei_field: need at least one component");
  const Space& s = *f.space;
  std::vector<ErrorIndicatorRecord> out(s.mesh.num_leaves());
  for (int e = 0; e < s.mesh.num_leaves(); ++e) {
    ErrorIndicatorRecord best;
    for (int v : components) {
      ErrorIndicatorRecord rec = sei_element(f.data[v].data() + static_cast<size_t>(e) * s.npe,
                                             s.order);
      if (rec.eps >= best.eps) best = rec;
    }
    out[e] = best;
  }
  return out;
}

// Running time average of the indicator over a sampling window.
struct AveragedIndicator {
  std::vector<double> mean;
  std::vector<uint8_t> degenerate;
  int samples = 0;
  double t_begin = 0.0, t_end = 0.0;

  AveragedIndicator() = default;
  AveragedIndicator(int n_leaves, double t0, double t1)
      : mean(n_leaves, 0.0), degenerate(n_leaves, 0), t_begin(t0), t_end(t1) {}
};

// Normalization contract: exponentially growing linear perturbations are
// rescaled by the field's max amplitude before the indicator is measured, so
// samples taken at different growth stages are comparable.
inline double max_amplitude(const Field& f, const std::vector<int>& components) {
  double m = 0.0;
  for (int v : components)
    for (double x : f.data[v]) m = std::max(m, std::abs(x));
  return m;
}

inline void accumulate(AveragedIndicator& avg, const std::vector<ErrorIndicatorRecord>& sample,
                       double t) {
  if (t < avg.t_begin - 1e-12 || t > avg.t_end + 1e-12)
    throw std::invalid_argument("accumulate: sample time outside the averaging window");
  if (sample.size() != avg.mean.size())
    throw std::invalid_argument("accumulate: sample size does not match window");
  const double w = 1.0 / (avg.samples + 1);
  for (size_t i = 0; i < sample.size(); ++i) {
    avg.mean[i] += w * (sample[i].eps - avg.mean[i]);
    if (sample[i].degenerate) avg.degenerate[i] = 1;
  }
  avg.samples += 1;
}

// Mark the ceil(fraction * n / 3) leaves with the largest averaged indicator:
// each refined quad adds three net leaves, so the marked count grows the mesh
// by about the requested fraction. Ties break toward the smaller leaf id.
inline std::set<int> mark_top_fraction(const AveragedIndicator& avg, double budget_fraction) {
  if (!(budget_fraction > 0.0) || budget_fraction > 1.0)
    throw std::invalid_argument("mark_top_fraction: fraction must be in (0, 1]");
  const int n = static_cast<int>(avg.mean.size());
  if (n == 0) return {};
  const int count = std::min<int>(n, static_cast<int>(std::ceil(budget_fraction * n / 3.0)));
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  std::sort(ids.begin(), ids.end(), [&](int a, int b) {
    if (avg.mean[a] != avg.mean[b]) return avg.mean[a] > avg.mean[b];
    return a < b;
  });
  return std::set<int>(ids.begin(), ids.begin() + count);
}

}  // namespace sstab

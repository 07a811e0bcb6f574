#pragma once

#include <cmath>
#include <map>

#include "sstab/mesh.hpp"

namespace sstab {

namespace detail {

class VertexPool {
 public:
  int add(std::vector<Point2>& verts, double x, double y) {
    const auto key = std::make_pair(llround(x * 1e9), llround(y * 1e9));
    auto it = ids_.find(key);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(verts.size());
    verts.push_back({x, y});
    ids_[key] = id;
    return id;
  }

 private:
  std::map<std::pair<long long, long long>, int> ids_;
};

inline void validate_jacobians(const AdaptiveMesh& mesh) {
  for (const auto& m : mesh.macros) {
    const GeomQuad q = mesh.macro_geometry(m.id);
    for (int j = 0; j <= 4; ++j)
      for (int i = 0; i <= 4; ++i) {
        Point2 dxi, deta;
        q.jacobian(-1.0 + 0.5 * i, -1.0 + 0.5 * j, dxi, deta);
        if (dxi.x * deta.y - deta.x * dxi.y <= 0.0)
          throw std::runtime_error("mesh builder: non-positive Jacobian in macro element " +
                                   std::to_string(m.id));
      }
  }
}

}  // namespace detail

// Structured rectangle of macro elements. Tags are {south, east, north, west};
// periodic directions override the corresponding tags.
inline AdaptiveMesh build_rectangle_mesh(const std::vector<double>& x_breaks,
                                         const std::vector<double>& y_breaks,
                                         std::array<BoundaryTag, 4> tags,
                                         bool periodic_x = false, bool periodic_y = false,
                                         int element_budget = 8192) {
  if (x_breaks.size() < 2 || y_breaks.size() < 2)
    throw std::invalid_argument("build_rectangle_mesh: need at least one cell per direction");
  AdaptiveMesh mesh;
  mesh.element_budget = element_budget;
  const int nx = static_cast<int>(x_breaks.size()) - 1;
  const int ny = static_cast<int>(y_breaks.size()) - 1;
  auto vid = [&](int i, int j) { return j * (nx + 1) + i; };
  for (int j = 0; j <= ny; ++j)
    for (int i = 0; i <= nx; ++i) mesh.macro_vertices.push_back({x_breaks[i], y_breaks[j]});
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      MacroElement m;
      m.id = static_cast<int>(mesh.macros.size());
      m.verts = {vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)};
      if (j == 0 && !periodic_y) m.link[0].tag = tags[0];
      if (i == nx - 1 && !periodic_x) m.link[1].tag = tags[1];
      if (j == ny - 1 && !periodic_y) m.link[2].tag = tags[2];
      if (i == 0 && !periodic_x) m.link[3].tag = tags[3];
      mesh.macros.push_back(m);
    }
  auto cell = [&](int i, int j) { return j * nx + i; };
  if (periodic_y)
    for (int i = 0; i < nx; ++i) mesh.add_periodic_pair(cell(i, 0), 0, cell(i, ny - 1), 2, false);
  if (periodic_x)
    for (int j = 0; j < ny; ++j) mesh.add_periodic_pair(cell(0, j), 3, cell(nx - 1, j), 1, false);
  mesh.finalize_macros();
  mesh.seed_leaves();
  detail::validate_jacobians(mesh);
  return mesh;
}

inline std::vector<double> uniform_breaks(double a, double b, int n) {
  std::vector<double> v(n + 1);
  for (int i = 0; i <= n; ++i) v[i] = a + (b - a) * i / n;
  return v;
}

// Body-fitted cylinder mesh: an O-grid around the unit-diameter cylinder at
// the origin blended out to a square block, embedded in a rectangular far
// field spanning [-15, 35] x [-15, 15]. Inflow at x = -15, outflow at x = 35,
// periodic at y = +-15, no-slip wall on the cylinder.
struct CylinderMeshConfig {
  double radius = 0.5;
  double square_half = 3.0;   // O-grid outer square half-width
  int n_theta = 20;           // sectors, multiple of 4
  int n_rings = 5;
  double ring_grading = 1.5;  // geometric growth of ring thickness
  double x_min = -15.0, x_max = 35.0, y_half = 15.0;
  std::vector<double> x_left, x_right, y_outer;  // optional far-field breaks
  int element_budget = 8192;
};

inline AdaptiveMesh build_cylinder_mesh(const CylinderMeshConfig& cfg = {}) {
  if (cfg.n_theta % 4 != 0 || cfg.n_theta < 8)
    throw std::invalid_argument("build_cylinder_mesh: n_theta must be a multiple of 4, >= 8");
  const double S = cfg.square_half;
  const int q = cfg.n_theta / 4;
  AdaptiveMesh mesh;
  mesh.element_budget = cfg.element_budget;
  detail::VertexPool pool;
  auto add = [&](double x, double y) { return pool.add(mesh.macro_vertices, x, y); };

  // ring vertices: blend circle -> square along matched perimeter parameters
  auto square_pt = [&](int m) -> Point2 {
    const int side = (m / q) % 4;
    const double f = 2.0 * S * (m % q) / q;
    switch (side) {
      case 0: return {-S + f, -S};
      case 1: return {S, -S + f};
      case 2: return {S - f, S};
      default: return {-S, S - f};
    }
  };
  auto circle_pt = [&](int m) -> Point2 {
    const double th = -0.75 * M_PI + 2.0 * M_PI * m / cfg.n_theta;
    return {cfg.radius * std::cos(th), cfg.radius * std::sin(th)};
  };
  const double g = cfg.ring_grading;
  auto blend = [&](int k) {
    return (std::pow(g, k) - 1.0) / (std::pow(g, cfg.n_rings) - 1.0);
  };
  std::vector<std::vector<int>> ring(cfg.n_rings + 1, std::vector<int>(cfg.n_theta));
  for (int k = 0; k <= cfg.n_rings; ++k)
    for (int m = 0; m < cfg.n_theta; ++m) {
      const double s = blend(k);
      const Point2 c = circle_pt(m), b = square_pt(m);
      ring[k][m] = add((1.0 - s) * c.x + s * b.x, (1.0 - s) * c.y + s * b.y);
    }
  for (int k = 0; k < cfg.n_rings; ++k)
    for (int m = 0; m < cfg.n_theta; ++m) {
      MacroElement e;
      e.id = static_cast<int>(mesh.macros.size());
      const int m1 = (m + 1) % cfg.n_theta;
      e.verts = {ring[k][m], ring[k + 1][m], ring[k + 1][m1], ring[k][m1]};
      if (k == 0) {
        e.curve[3] = {EdgeCurve::CircularArc, 0.0, 0.0, cfg.radius};
        e.link[3].tag = BoundaryTag::Wall;
      }
      mesh.macros.push_back(e);
    }

  // far-field breaks
  std::vector<double> xl = cfg.x_left, xr = cfg.x_right, yo = cfg.y_outer;
  if (xl.empty()) xl = {cfg.x_min, -10.4, -6.8, -4.6, -S};
  if (xr.empty()) xr = {S, 5.0, 7.3, 10.0, 13.1, 16.7, 20.8, 25.2, 30.0, cfg.x_max};
  if (yo.empty()) yo = {S, 4.6, 6.8, 10.4, cfg.y_half};
  std::vector<double> xb = xl;
  for (int i = 1; i <= q; ++i) xb.push_back(-S + 2.0 * S * i / q);
  xb.insert(xb.end(), xr.begin() + 1, xr.end());
  std::vector<double> yb;
  for (auto it = yo.rbegin(); it != yo.rend(); ++it) yb.push_back(-*it);
  for (int i = 1; i <= q; ++i) yb.push_back(-S + 2.0 * S * i / q);
  yb.insert(yb.end(), yo.begin() + 1, yo.end());

  const int nx = static_cast<int>(xb.size()) - 1;
  const int ny = static_cast<int>(yb.size()) - 1;
  std::vector<int> bottom_row, top_row;
  std::vector<double> bottom_x, top_x;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const double cx = 0.5 * (xb[i] + xb[i + 1]);
      const double cy = 0.5 * (yb[j] + yb[j + 1]);
      if (std::abs(cx) < S && std::abs(cy) < S) continue;  // O-grid occupies this block
      MacroElement e;
      e.id = static_cast<int>(mesh.macros.size());
      e.verts = {add(xb[i], yb[j]), add(xb[i + 1], yb[j]), add(xb[i + 1], yb[j + 1]),
                 add(xb[i], yb[j + 1])};
      if (i == 0) e.link[3].tag = BoundaryTag::InflowDirichlet;
      if (i == nx - 1) e.link[1].tag = BoundaryTag::Outflow;
      if (j == 0) {
        bottom_row.push_back(e.id);
        bottom_x.push_back(cx);
      }
      if (j == ny - 1) {
        top_row.push_back(e.id);
        top_x.push_back(cx);
      }
      mesh.macros.push_back(e);
    }
  if (bottom_row.size() != top_row.size())
    throw std::runtime_error("build_cylinder_mesh: periodic rows do not match");
  for (size_t i = 0; i < bottom_row.size(); ++i)
    mesh.add_periodic_pair(bottom_row[i], 0, top_row[i], 2, false);

  mesh.finalize_macros();
  mesh.seed_leaves();
  detail::validate_jacobians(mesh);
  return mesh;
}

}  // namespace sstab

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "sstab/mesh.hpp"
#include "sstab/ref_element.hpp"

namespace sstab {

struct ExtrapolationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Geometry factors of one leaf at the velocity (GLL^2), pressure (GL^2) and
// dealiasing point sets.
struct ElementGeometry {
  std::vector<double> x, y;                // GLL^2 physical coordinates
  std::vector<double> jac;                 // Jacobian at GLL^2
  std::vector<double> rx, ry, sx, sy;      // dxi/dx, dxi/dy, deta/dx, deta/dy at GLL^2
  std::vector<double> mass;                // w_i w_j J at GLL^2
  std::vector<double> g11, g12, g22;       // mass-weighted metric products (stiffness)
  std::vector<double> p_x, p_y;            // pressure-grid physical coordinates
  std::vector<double> p_mass;              // pressure-grid w w J
  std::vector<double> p_rx, p_ry, p_sx, p_sy;
  std::vector<double> d_mass;              // dealias-grid w w J
  std::vector<double> d_rx, d_ry, d_sx, d_sy;
  std::vector<double> spacing;             // min adjacent GLL node distance, per node
  double diameter = 0.0;
};

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

// Newton inversion of the Gordon-Hall map. Returns false if the iteration
// leaves the search region.
inline bool invert_map(const GeomQuad& g, Point2 target, double& xi, double& eta) {
  xi = 0.0;
  eta = 0.0;
  for (int it = 0; it < 50; ++it) {
    const Point2 p = g.map(xi, eta);
    const double fx = p.x - target.x, fy = p.y - target.y;
    Point2 dxi, deta;
    g.jacobian(xi, eta, dxi, deta);
    const double det = dxi.x * deta.y - deta.x * dxi.y;
    if (det == 0.0) return false;
    const double dx = (deta.y * fx - deta.x * fy) / det;
    const double dy = (-dxi.y * fx + dxi.x * fy) / det;
    xi -= dx;
    eta -= dy;
    if (std::abs(xi) > 4.0 || std::abs(eta) > 4.0) return false;
    if (std::abs(dx) + std::abs(dy) < 1e-14) return true;
  }
  return true;
}

}  // namespace detail

// Discrete velocity space on an adaptive mesh snapshot: continuity (and
// hanging-node) constraints, Dirichlet masks, assembled diagonal mass, and
// point location. Immutable after construction.
class Space {
 public:
  AdaptiveMesh mesh;
  MeshTopology topo;
  int order = 0;
  int np = 0;   // points per direction
  int npe = 0;  // points per element
  std::vector<ElementGeometry> geom;

  // per element-node constraint rows (CSR): local value = sum w * dof[gid]
  std::vector<int> row_ptr;
  std::vector<int> row_gid;
  std::vector<double> row_w;
  std::vector<uint8_t> node_primary;  // node carries its own dof

  int num_dofs = 0;
  std::vector<uint8_t> dof_dirichlet;
  std::vector<BoundaryTag> dof_tag;
  std::vector<double> dof_mass;   // diagonal of the assembled mass matrix
  std::vector<double> dof_mult;   // primary-node multiplicity
  std::vector<double> dof_x, dof_y;

  double domain_area = 0.0;

  static std::shared_ptr<const Space> build(AdaptiveMesh m, int order) {
    auto s = std::make_shared<Space>();
    s->construct(std::move(m), order);
    return s;
  }

  // ---- gather / scatter ----------------------------------------------------

  void scatter(const std::vector<double>& g, std::vector<double>& local) const {
    local.resize(static_cast<size_t>(mesh.num_leaves()) * npe);
    const int total = mesh.num_leaves() * npe;
    for (int nidx = 0; nidx < total; ++nidx) {
      double v = 0.0;
      for (int k = row_ptr[nidx]; k < row_ptr[nidx + 1]; ++k) v += row_w[k] * g[row_gid[k]];
      local[nidx] = v;
    }
  }

  // g += C^T local
  void gather_add(const std::vector<double>& local, std::vector<double>& g) const {
    const int total = mesh.num_leaves() * npe;
    for (int nidx = 0; nidx < total; ++nidx) {
      const double v = local[nidx];
      if (v == 0.0) continue;
      for (int k = row_ptr[nidx]; k < row_ptr[nidx + 1]; ++k) g[row_gid[k]] += row_w[k] * v;
    }
  }

  // inverse-multiplicity average of primary nodes into dof values
  void gather_average(const std::vector<double>& local, std::vector<double>& g) const {
    g.assign(num_dofs, 0.0);
    const int total = mesh.num_leaves() * npe;
    for (int nidx = 0; nidx < total; ++nidx) {
      if (!node_primary[nidx]) continue;
      const int gid = row_gid[row_ptr[nidx]];
      g[gid] += local[nidx] / dof_mult[gid];
    }
  }

  void constrain_component(std::vector<double>& local) const {
    std::vector<double> g;
    gather_average(local, g);
    scatter(g, local);
  }

  // ---- element access -------------------------------------------------------

  int node_index(int leaf, int i, int j) const { return leaf * npe + j * np + i; }

  static int face_node(int side, int k, int np) {
    switch (side) {
      case 0: return k;                       // (k, 0)
      case 1: return k * np + (np - 1);       // (N, k)
      case 2: return (np - 1) * np + k;       // (k, N)
      default: return k * np;                 // (0, k)
    }
  }

  // quadrature-exact integral of a product of nodal fields
  double integrate_product(const std::vector<double>& a, const std::vector<double>& b) const {
    double s = 0.0;
    for (int e = 0; e < mesh.num_leaves(); ++e) {
      const auto& ge = geom[e];
      const double* pa = a.data() + static_cast<size_t>(e) * npe;
      const double* pb = b.data() + static_cast<size_t>(e) * npe;
      double se = 0.0;
      for (int q = 0; q < npe; ++q) se += ge.mass[q] * pa[q] * pb[q];
      s += se;
    }
    return s;
  }

  // ---- point location -------------------------------------------------------

  struct Location {
    int leaf = -1;
    double xi = 0.0, eta = 0.0;
  };

  std::optional<Location> locate(Point2 p, double tol = 1e-8) const {
    double best_dist = 1e300;
    Location best;
    for (int cand : locator_candidates(p)) {
      const GeomQuad g = quad_[cand];
      double xi, eta;
      if (!detail::invert_map(g, p, xi, eta)) continue;
      if (std::abs(xi) <= 1.0 + 1e-10 && std::abs(eta) <= 1.0 + 1e-10)
        return Location{cand, std::clamp(xi, -1.0, 1.0), std::clamp(eta, -1.0, 1.0)};
      const double cx = std::clamp(xi, -1.0, 1.0), cy = std::clamp(eta, -1.0, 1.0);
      const Point2 q = g.map(cx, cy);
      const double d = std::hypot(q.x - p.x, q.y - p.y);
      if (d < best_dist) {
        best_dist = d;
        best = {cand, cx, cy};
      }
    }
    if (best_dist <= tol) return best;
    return std::nullopt;
  }

  double eval_component(const std::vector<double>& comp, const Location& loc) const {
    const auto& re = RefElement::get(order);
    std::vector<double> bx(np), by(np);
    re.basis_at(loc.xi, bx.data());
    re.basis_at(loc.eta, by.data());
    const double* v = comp.data() + static_cast<size_t>(loc.leaf) * npe;
    double s = 0.0;
    for (int j = 0; j < np; ++j) {
      double row = 0.0;
      for (int i = 0; i < np; ++i) row += bx[i] * v[j * np + i];
      s += by[j] * row;
    }
    return s;
  }

  const GeomQuad& leaf_quad(int leaf) const { return quad_[leaf]; }

 private:
  std::vector<GeomQuad> quad_;
  // uniform background grid for candidate lookup
  double bb_x0_ = 0, bb_y0_ = 0, bb_dx_ = 1, bb_dy_ = 1;
  int bb_nx_ = 1, bb_ny_ = 1;
  std::vector<std::vector<int>> bb_cells_;

  std::vector<int> locator_candidates(Point2 p) const {
    const int cx = std::clamp(static_cast<int>((p.x - bb_x0_) / bb_dx_), 0, bb_nx_ - 1);
    const int cy = std::clamp(static_cast<int>((p.y - bb_y0_) / bb_dy_), 0, bb_ny_ - 1);
    return bb_cells_[static_cast<size_t>(cy) * bb_nx_ + cx];
  }

  void construct(AdaptiveMesh m, int n) {
    mesh = std::move(m);
    topo = mesh.build_topology();
    order = n;
    np = n + 1;
    npe = np * np;
    const auto& re = RefElement::get(n);
    const int nel = mesh.num_leaves();

    // geometry
    geom.resize(nel);
    quad_.resize(nel);
    domain_area = 0.0;
    for (int e = 0; e < nel; ++e) {
      quad_[e] = mesh.leaf_geometry(e);
      build_geometry(quad_[e], re, geom[e], e);
      for (double v : geom[e].mass) domain_area += v;
    }
    build_locator();

    // ---- dof classes ----
    const int total = nel * npe;
    detail::UnionFind uf(total);
    const int N = n;
    for (const auto& f : topo.conforming)
      for (int k = 0; k <= N; ++k)
        uf.unite(f.leaf_a * npe + face_node(f.side_a, k, np),
                 f.leaf_b * npe + face_node(f.side_b, f.reversed ? N - k : k, np));
    for (const auto& h : topo.hanging) {
      const int p0 = h.parent * npe + face_node(h.parent_side, 0, np);
      const int pN = h.parent * npe + face_node(h.parent_side, N, np);
      const auto& c0 = h.child[0];
      const auto& c1 = h.child[1];
      uf.unite(c0.leaf * npe + face_node(c0.side, c0.reversed ? N : 0, np), p0);
      uf.unite(c1.leaf * npe + face_node(c1.side, c1.reversed ? 0 : N, np), pN);
    }

    // slave rows per class root, expressed over parent-face class roots
    std::map<int, std::vector<std::pair<int, double>>> slave_rows;
    std::vector<double> basis(np);
    for (const auto& h : topo.hanging) {
      std::vector<int> parent_root(np);
      for (int k = 0; k <= N; ++k)
        parent_root[k] = uf.find(h.parent * npe + face_node(h.parent_side, k, np));
      for (int half = 0; half < 2; ++half) {
        const auto& ch = h.child[half];
        for (int i = 0; i <= N; ++i) {
          const double t = re.gll.nodes[i];
          double p;
          if (half == 0) p = ch.reversed ? -(t + 1.0) / 2.0 : (t - 1.0) / 2.0;
          else p = ch.reversed ? (1.0 - t) / 2.0 : (t + 1.0) / 2.0;
          if (p == -1.0 || p == 1.0) continue;  // unified with parent corners
          const int root = uf.find(ch.leaf * npe + face_node(ch.side, i, np));
          if (slave_rows.count(root)) continue;
          re.basis_at(p, basis.data());
          auto& row = slave_rows[root];
          for (int k = 0; k <= N; ++k)
            if (basis[k] != 0.0) row.push_back({parent_root[k], basis[k]});
        }
      }
    }
    for (const auto& [root, row] : slave_rows)
      for (const auto& [pr, w] : row)
        if (slave_rows.count(pr))
          throw std::runtime_error("space: hanging constraint chains to a slave node");

    // Dirichlet classes
    std::map<int, BoundaryTag> dir_root;
    for (const auto& bf : topo.boundary) {
      if (bf.tag != BoundaryTag::InflowDirichlet && bf.tag != BoundaryTag::Wall) continue;
      for (int k = 0; k <= N; ++k) {
        const int root = uf.find(bf.leaf * npe + face_node(bf.side, k, np));
        auto it = dir_root.find(root);
        if (it == dir_root.end() || bf.tag == BoundaryTag::Wall) dir_root[root] = bf.tag;
      }
    }

    // gid assignment in element-node order
    std::map<int, int> gid_of_root;
    row_ptr.assign(total + 1, 0);
    node_primary.assign(total, 0);
    for (int nidx = 0; nidx < total; ++nidx) {
      const int root = uf.find(nidx);
      if (slave_rows.count(root)) {
        row_ptr[nidx + 1] = static_cast<int>(slave_rows[root].size());
      } else {
        if (!gid_of_root.count(root)) gid_of_root[root] = static_cast<int>(gid_of_root.size());
        node_primary[nidx] = 1;
        row_ptr[nidx + 1] = 1;
      }
    }
    num_dofs = static_cast<int>(gid_of_root.size());
    for (int i = 0; i < total; ++i) row_ptr[i + 1] += row_ptr[i];
    row_gid.resize(row_ptr[total]);
    row_w.resize(row_ptr[total]);
    for (int nidx = 0; nidx < total; ++nidx) {
      const int root = uf.find(nidx);
      int k = row_ptr[nidx];
      auto it = slave_rows.find(root);
      if (it == slave_rows.end()) {
        row_gid[k] = gid_of_root[root];
        row_w[k] = 1.0;
      } else {
        for (const auto& [pr, w] : it->second) {
          row_gid[k] = gid_of_root.at(pr);
          row_w[k] = w;
          ++k;
        }
      }
    }

    dof_dirichlet.assign(num_dofs, 0);
    dof_tag.assign(num_dofs, BoundaryTag::None);
    for (const auto& [root, tag] : dir_root) {
      if (slave_rows.count(root))
        throw std::runtime_error("space: Dirichlet node is constraint slave");
      const int g = gid_of_root.at(root);
      dof_dirichlet[g] = 1;
      dof_tag[g] = tag;
    }

    dof_mass.assign(num_dofs, 0.0);
    dof_mult.assign(num_dofs, 0.0);
    dof_x.assign(num_dofs, 0.0);
    dof_y.assign(num_dofs, 0.0);
    std::vector<uint8_t> seen(num_dofs, 0);
    for (int e = 0; e < nel; ++e)
      for (int q = 0; q < npe; ++q) {
        const int nidx = e * npe + q;
        const double bm = geom[e].mass[q];
        for (int k = row_ptr[nidx]; k < row_ptr[nidx + 1]; ++k)
          dof_mass[row_gid[k]] += bm * row_w[k] * row_w[k];
        if (node_primary[nidx]) {
          const int g = row_gid[row_ptr[nidx]];
          dof_mult[g] += 1.0;
          if (!seen[g]) {
            seen[g] = 1;
            dof_x[g] = geom[e].x[q];
            dof_y[g] = geom[e].y[q];
          }
        }
      }
  }

  void build_geometry(const GeomQuad& q, const RefElement& re, ElementGeometry& g,
                      int leaf_id) const {
    auto fill = [&](const Quadrature1D& rule, std::vector<double>* xs, std::vector<double>* ys,
                    std::vector<double>* jac, std::vector<double>& wmass, std::vector<double>& rx,
                    std::vector<double>& ry, std::vector<double>& sx, std::vector<double>& sy) {
      const int k = rule.num_points();
      wmass.resize(static_cast<size_t>(k) * k);
      rx.resize(wmass.size());
      ry.resize(wmass.size());
      sx.resize(wmass.size());
      sy.resize(wmass.size());
      if (xs) xs->resize(wmass.size());
      if (ys) ys->resize(wmass.size());
      if (jac) jac->resize(wmass.size());
      for (int j = 0; j < k; ++j)
        for (int i = 0; i < k; ++i) {
          const int idx = j * k + i;
          const double xi = rule.nodes[i], eta = rule.nodes[j];
          Point2 dxi, deta;
          q.jacobian(xi, eta, dxi, deta);
          const double J = dxi.x * deta.y - deta.x * dxi.y;
          if (!(J > 0.0))
            throw std::runtime_error("space: non-positive Jacobian in leaf " +
                                     std::to_string(leaf_id));
          rx[idx] = deta.y / J;
          ry[idx] = -deta.x / J;
          sx[idx] = -dxi.y / J;
          sy[idx] = dxi.x / J;
          wmass[idx] = rule.weights[i] * rule.weights[j] * J;
          if (jac) (*jac)[idx] = J;
          if (xs) {
            const Point2 p = q.map(xi, eta);
            (*xs)[idx] = p.x;
            (*ys)[idx] = p.y;
          }
        }
    };
    fill(re.gll, &g.x, &g.y, &g.jac, g.mass, g.rx, g.ry, g.sx, g.sy);
    fill(re.gl, &g.p_x, &g.p_y, nullptr, g.p_mass, g.p_rx, g.p_ry, g.p_sx, g.p_sy);
    fill(re.dealias, nullptr, nullptr, nullptr, g.d_mass, g.d_rx, g.d_ry, g.d_sx, g.d_sy);

    g.g11.resize(g.mass.size());
    g.g12.resize(g.mass.size());
    g.g22.resize(g.mass.size());
    for (size_t idx = 0; idx < g.mass.size(); ++idx) {
      const double w = g.mass[idx];
      g.g11[idx] = w * (g.rx[idx] * g.rx[idx] + g.ry[idx] * g.ry[idx]);
      g.g12[idx] = w * (g.rx[idx] * g.sx[idx] + g.ry[idx] * g.sy[idx]);
      g.g22[idx] = w * (g.sx[idx] * g.sx[idx] + g.sy[idx] * g.sy[idx]);
    }

    g.spacing.assign(g.mass.size(), 1e300);
    const int k = np;
    auto dist = [&](int a, int b) {
      return std::hypot(g.x[a] - g.x[b], g.y[a] - g.y[b]);
    };
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < k; ++i) {
        const int idx = j * k + i;
        if (i > 0) g.spacing[idx] = std::min(g.spacing[idx], dist(idx, idx - 1));
        if (i + 1 < k) g.spacing[idx] = std::min(g.spacing[idx], dist(idx, idx + 1));
        if (j > 0) g.spacing[idx] = std::min(g.spacing[idx], dist(idx, idx - k));
        if (j + 1 < k) g.spacing[idx] = std::min(g.spacing[idx], dist(idx, idx + k));
      }
    double dmax = 0.0;
    for (int c = 1; c < 4; ++c)
      dmax = std::max(dmax, std::hypot(q.corner[c].x - q.corner[0].x,
                                       q.corner[c].y - q.corner[0].y));
    g.diameter = dmax;
  }

  void build_locator() {
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    const int nel = mesh.num_leaves();
    std::vector<std::array<double, 4>> boxes(nel);
    for (int e = 0; e < nel; ++e) {
      double bx0 = 1e300, by0 = 1e300, bx1 = -1e300, by1 = -1e300;
      const GeomQuad& q = quad_[e];
      for (int s = 0; s < 4; ++s)
        for (double t = -1.0; t <= 1.0; t += 0.25) {
          const Point2 p = q.edge_point(s, t);
          bx0 = std::min(bx0, p.x);
          by0 = std::min(by0, p.y);
          bx1 = std::max(bx1, p.x);
          by1 = std::max(by1, p.y);
        }
      const double pad = 1e-6 + 0.02 * std::max(bx1 - bx0, by1 - by0);
      boxes[e] = {bx0 - pad, by0 - pad, bx1 + pad, by1 + pad};
      x0 = std::min(x0, bx0);
      y0 = std::min(y0, by0);
      x1 = std::max(x1, bx1);
      y1 = std::max(y1, by1);
    }
    bb_x0_ = x0;
    bb_y0_ = y0;
    bb_nx_ = std::max(1, std::min(256, static_cast<int>(std::sqrt(double(nel))) * 2));
    bb_ny_ = bb_nx_;
    bb_dx_ = (x1 - x0) / bb_nx_ + 1e-300;
    bb_dy_ = (y1 - y0) / bb_ny_ + 1e-300;
    bb_cells_.assign(static_cast<size_t>(bb_nx_) * bb_ny_, {});
    for (int e = 0; e < nel; ++e) {
      const auto& b = boxes[e];
      const int cx0 = std::clamp(static_cast<int>((b[0] - x0) / bb_dx_), 0, bb_nx_ - 1);
      const int cy0 = std::clamp(static_cast<int>((b[1] - y0) / bb_dy_), 0, bb_ny_ - 1);
      const int cx1 = std::clamp(static_cast<int>((b[2] - x0) / bb_dx_), 0, bb_nx_ - 1);
      const int cy1 = std::clamp(static_cast<int>((b[3] - y0) / bb_dy_), 0, bb_ny_ - 1);
      for (int cy = cy0; cy <= cy1; ++cy)
        for (int cx = cx0; cx <= cx1; ++cx)
          bb_cells_[static_cast<size_t>(cy) * bb_nx_ + cx].push_back(e);
    }
  }
};

// Named nodal variables on a space snapshot.
struct Field {
  std::shared_ptr<const Space> space;
  std::vector<std::string> vars;
  std::vector<std::vector<double>> data;  // [var][leaf*npe + node]
  double time = 0.0;

  Field() = default;
  Field(std::shared_ptr<const Space> s, std::vector<std::string> names)
      : space(std::move(s)), vars(std::move(names)) {
    data.assign(vars.size(),
                std::vector<double>(static_cast<size_t>(space->mesh.num_leaves()) * space->npe, 0.0));
  }

  int var_index(const std::string& name) const {
    for (size_t i = 0; i < vars.size(); ++i)
      if (vars[i] == name) return static_cast<int>(i);
    throw std::invalid_argument("Field: no variable named " + name);
  }

  std::vector<double>& comp(int i) { return data[i]; }
  const std::vector<double>& comp(int i) const { return data[i]; }
};

inline Field constrain_continuity(Field f) {
  for (auto& c : f.data) f.space->constrain_component(c);
  return f;
}

inline std::vector<double> evaluate_at(const Field& f, Point2 p) {
  auto loc = f.space->locate(p);
  if (!loc)
    throw ExtrapolationError("evaluate_at: point (" + std::to_string(p.x) + ", " +
                             std::to_string(p.y) + ") outside the mesh");
  std::vector<double> out(f.vars.size());
  for (size_t v = 0; v < f.vars.size(); ++v) out[v] = f.space->eval_component(f.data[v], *loc);
  return out;
}

namespace detail {

inline bool all_straight(const GeomQuad& q) {
  for (int s = 0; s < 4; ++s)
    if (q.curve[s].type != EdgeCurve::Straight) return false;
  return true;
}

// parent-basis evaluation matrix at the nodes of one child (child cell
// geometry need not nest inside the parent map for curved elements, so the
// preimages are found by Newton inversion of the parent map)
inline Mat child_eval_matrix(const Space& src, const GeomQuad& parent_quad,
                             const GeomQuad& child_quad, int cx, int cy, bool nested) {
  const auto& re = RefElement::get(src.order);
  const int np = src.np;
  if (nested) {
    Mat out(np * np, np * np);
    const Mat& ax = re.child[cx];
    const Mat& ay = re.child[cy];
    for (int j2 = 0; j2 < np; ++j2)
      for (int i2 = 0; i2 < np; ++i2)
        for (int j = 0; j < np; ++j)
          for (int i = 0; i < np; ++i)
            out(j2 * np + i2, j * np + i) = ax(i2, i) * ay(j2, j);
    return out;
  }
  Mat out(np * np, np * np);
  std::vector<double> bx(np), by(np);
  for (int j2 = 0; j2 < np; ++j2)
    for (int i2 = 0; i2 < np; ++i2) {
      const Point2 X = child_quad.map(re.gll.nodes[i2], re.gll.nodes[j2]);
      double xi, eta;
      if (!invert_map(parent_quad, X, xi, eta))
        throw std::runtime_error("transfer: parent map inversion failed");
      xi = std::clamp(xi, -1.0, 1.0);
      eta = std::clamp(eta, -1.0, 1.0);
      re.basis_at(xi, bx.data());
      re.basis_at(eta, by.data());
      for (int j = 0; j < np; ++j)
        for (int i = 0; i < np; ++i) out(j2 * np + i2, j * np + i) = bx[i] * by[j];
    }
  return out;
}

}  // namespace detail

// Move a field across one refine/coarsen step: children by spectral
// interpolation, parents by L2 projection of their four children.
inline Field transfer_field(const Field& f, const MeshCorrespondence& corr,
                            const std::shared_ptr<const Space>& target) {
  const Space& src = *f.space;
  if (corr.src_version != src.mesh.version || corr.dst_version != target->mesh.version)
    throw std::invalid_argument("transfer_field: stale correspondence for this mesh pair");
  Field out(target, f.vars);
  out.time = f.time;
  const int npe = src.npe;

  for (int old_id = 0; old_id < static_cast<int>(corr.old_to_new.size()); ++old_id) {
    const int nw = corr.old_to_new[old_id];
    if (nw < 0) continue;
    for (size_t v = 0; v < f.vars.size(); ++v)
      std::copy_n(f.data[v].begin() + static_cast<size_t>(old_id) * npe, npe,
                  out.data[v].begin() + static_cast<size_t>(nw) * npe);
  }

  for (const auto& [old_id, kids] : corr.refined) {
    const GeomQuad parent = src.leaf_quad(old_id);
    const bool nested = detail::all_straight(parent);
    for (int cy = 0; cy < 2; ++cy)
      for (int cx = 0; cx < 2; ++cx) {
        const int kid = kids[cy * 2 + cx];
        const Mat t = detail::child_eval_matrix(src, parent, target->leaf_quad(kid), cx, cy, nested);
        for (size_t v = 0; v < f.vars.size(); ++v)
          matvec(t, f.data[v].data() + static_cast<size_t>(old_id) * npe,
                 out.data[v].data() + static_cast<size_t>(kid) * npe);
      }
  }

  for (const auto& [new_id, kids] : corr.coarsened) {
    const GeomQuad parent = target->leaf_quad(new_id);
    const bool nested = detail::all_straight(parent);
    Mat mp(npe, npe);
    std::array<Mat, 4> t;
    for (int cy = 0; cy < 2; ++cy)
      for (int cx = 0; cx < 2; ++cx) {
        const int c = cy * 2 + cx;
        t[c] = detail::child_eval_matrix(src, parent, src.leaf_quad(kids[c]), cx, cy, nested);
        const auto& bm = src.geom[kids[c]].mass;
        for (int r = 0; r < npe; ++r)
          for (int a = 0; a < npe; ++a) {
            if (t[c](r, a) == 0.0) continue;
            for (int b2 = 0; b2 < npe; ++b2) mp(a, b2) += t[c](r, a) * bm[r] * t[c](r, b2);
          }
      }
    const Cholesky chol(mp);
    for (size_t v = 0; v < f.vars.size(); ++v) {
      std::vector<double> rhs(npe, 0.0);
      for (int c = 0; c < 4; ++c) {
        const double* cv = f.data[v].data() + static_cast<size_t>(kids[c]) * npe;
        const auto& bm = src.geom[kids[c]].mass;
        for (int r = 0; r < npe; ++r) {
          const double w = bm[r] * cv[r];
          for (int a = 0; a < npe; ++a) rhs[a] += t[c](r, a) * w;
        }
      }
      chol.solve_inplace(rhs.data());
      std::copy_n(rhs.begin(), npe, out.data[v].begin() + static_cast<size_t>(new_id) * npe);
    }
  }
  return out;
}

// Spectral interpolation onto an arbitrary covering mesh: locate each target
// node in the source mesh and evaluate the source polynomial there.
inline Field interpolate_to_mesh(const Field& f, const std::shared_ptr<const Space>& target) {
  const Space& src = *f.space;
  Field out(target, f.vars);
  out.time = f.time;
  const int npe = target->npe;
  for (int e = 0; e < target->mesh.num_leaves(); ++e) {
    const auto& ge = target->geom[e];
    for (int q = 0; q < npe; ++q) {
      const auto loc = src.locate({ge.x[q], ge.y[q]});
      if (!loc)
        throw ExtrapolationError("interpolate_to_mesh: target node outside source mesh");
      for (size_t v = 0; v < f.vars.size(); ++v)
        out.data[v][static_cast<size_t>(e) * npe + q] = src.eval_component(f.data[v], *loc);
    }
  }
  return out;
}

}  // namespace sstab

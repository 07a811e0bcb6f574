#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace sstab {

struct Point2 {
  double x = 0.0, y = 0.0;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }

enum class BoundaryTag { None, InflowDirichlet, Periodic, Outflow, Wall };

enum class EdgeCurve { Straight, CircularArc };

struct CurveDesc {
  EdgeCurve type = EdgeCurve::Straight;
  double cx = 0.0, cy = 0.0, r = 0.0;  // arc center and radius
};

// Quad sides: 0 = south (eta=-1), 1 = east (xi=+1), 2 = north (eta=+1),
// 3 = west (xi=-1). Side parameter is the reference coordinate that varies
// along the side, always ascending.
struct MacroElement {
  int id = -1;
  std::array<int, 4> verts{-1, -1, -1, -1};  // corners c0(-1,-1) c1(1,-1) c2(1,1) c3(-1,1)
  std::array<CurveDesc, 4> curve{};
  struct SideLink {
    int macro = -1;
    int side = -1;
    bool reversed = false;  // neighbor's side parameter descends w.r.t. ours
    BoundaryTag tag = BoundaryTag::None;
    int edge_pair = -1;  // id shared by both sides of a linked pair
  };
  std::array<SideLink, 4> link{};
};

// corner indices of side s in ascending-parameter order
inline std::array<int, 2> side_corners(int s) {
  switch (s) {
    case 0: return {0, 1};
    case 1: return {1, 2};
    case 2: return {3, 2};
    default: return {0, 3};
  }
}

// Geometry of one quad: corner points plus per-side curve descriptors.
// Children of a refined quad are built by curve-aware subdivision so that
// faces of adjacent cells coincide exactly.
struct GeomQuad {
  std::array<Point2, 4> corner{};
  std::array<CurveDesc, 4> curve{};

  Point2 corner_of_side(int s, int which) const { return corner[side_corners(s)[which]]; }

  // point on side s at parameter t in [-1, 1]
  Point2 edge_point(int s, double t) const {
    const Point2 a = corner_of_side(s, 0), b = corner_of_side(s, 1);
    if (curve[s].type == EdgeCurve::Straight) return 0.5 * (1.0 - t) * a + 0.5 * (1.0 + t) * b;
    const auto& c = curve[s];
    const double ta = std::atan2(a.y - c.cy, a.x - c.cx);
    double tb = std::atan2(b.y - c.cy, b.x - c.cx);
    double d = tb - ta;
    while (d > M_PI) d -= 2.0 * M_PI;
    while (d < -M_PI) d += 2.0 * M_PI;
    const double th = ta + 0.5 * (t + 1.0) * d;
    return {c.cx + c.r * std::cos(th), c.cy + c.r * std::sin(th)};
  }

  Point2 edge_tangent(int s, double t) const {
    const Point2 a = corner_of_side(s, 0), b = corner_of_side(s, 1);
    if (curve[s].type == EdgeCurve::Straight) return 0.5 * (b - a);
    const auto& c = curve[s];
    const double ta = std::atan2(a.y - c.cy, a.x - c.cx);
    double tb = std::atan2(b.y - c.cy, b.x - c.cx);
    double d = tb - ta;
    while (d > M_PI) d -= 2.0 * M_PI;
    while (d < -M_PI) d += 2.0 * M_PI;
    const double th = ta + 0.5 * (t + 1.0) * d;
    return {-c.r * std::sin(th) * 0.5 * d, c.r * std::cos(th) * 0.5 * d};
  }

  // Gordon-Hall transfinite map of the reference square
  Point2 map(double xi, double eta) const {
    const Point2 e0 = edge_point(0, xi), e2 = edge_point(2, xi);
    const Point2 e3 = edge_point(3, eta), e1 = edge_point(1, eta);
    Point2 p = 0.5 * (1.0 - eta) * e0 + 0.5 * (1.0 + eta) * e2 + 0.5 * (1.0 - xi) * e3 +
               0.5 * (1.0 + xi) * e1;
    const Point2 blin = 0.25 * (1.0 - xi) * (1.0 - eta) * corner[0] +
                        0.25 * (1.0 + xi) * (1.0 - eta) * corner[1] +
                        0.25 * (1.0 + xi) * (1.0 + eta) * corner[2] +
                        0.25 * (1.0 - xi) * (1.0 + eta) * corner[3];
    return p - blin;
  }

  void jacobian(double xi, double eta, Point2& dxi, Point2& deta) const {
    const Point2 e0 = edge_point(0, xi), e2 = edge_point(2, xi);
    const Point2 e3 = edge_point(3, eta), e1 = edge_point(1, eta);
    const Point2 t0 = edge_tangent(0, xi), t2 = edge_tangent(2, xi);
    const Point2 t3 = edge_tangent(3, eta), t1 = edge_tangent(1, eta);
    const Point2 bx = 0.25 * (1.0 - eta) * (corner[1] - corner[0]) +
                      0.25 * (1.0 + eta) * (corner[2] - corner[3]);
    const Point2 by = 0.25 * (1.0 - xi) * (corner[3] - corner[0]) +
                      0.25 * (1.0 + xi) * (corner[2] - corner[1]);
    dxi = 0.5 * (1.0 - eta) * t0 + 0.5 * (1.0 + eta) * t2 + (-0.5) * e3 + 0.5 * e1 - bx;
    deta = (-0.5) * e0 + 0.5 * e2 + 0.5 * (1.0 - xi) * t3 + 0.5 * (1.0 + xi) * t1 - by;
  }

  Point2 edge_midpoint(int s) const { return edge_point(s, 0.0); }

  static CurveDesc half_curve(const CurveDesc& c) { return c; }  // arcs keep center/radius

  // child (cx, cy) with cx, cy in {0, 1}
  GeomQuad child(int cx, int cy) const {
    const Point2 m0 = edge_midpoint(0), m1 = edge_midpoint(1), m2 = edge_midpoint(2),
                 m3 = edge_midpoint(3);
    const Point2 ctr = map(0.0, 0.0);
    GeomQuad q;
    auto straight = CurveDesc{};
    if (cx == 0 && cy == 0) {
      q.corner = {corner[0], m0, ctr, m3};
      q.curve = {curve[0], straight, straight, curve[3]};
    } else if (cx == 1 && cy == 0) {
      q.corner = {m0, corner[1], m1, ctr};
      q.curve = {curve[0], curve[1], straight, straight};
    } else if (cx == 0 && cy == 1) {
      q.corner = {m3, ctr, m2, corner[3]};
      q.curve = {straight, straight, curve[2], curve[3]};
    } else {
      q.corner = {ctr, m1, corner[2], m2};
      q.curve = {straight, curve[1], curve[2], straight};
    }
    return q;
  }
};

// Leaf of a macro-element quadtree. (ix, iy) is the dyadic position of the
// cell inside the macro reference square at the given level.
struct QuadCell {
  int macro = 0;
  int level = 0;
  int ix = 0, iy = 0;

  std::vector<int> path() const {
    std::vector<int> p(level);
    for (int d = 0; d < level; ++d) {
      const int bx = (ix >> (level - 1 - d)) & 1;
      const int by = (iy >> (level - 1 - d)) & 1;
      p[d] = by * 2 + bx;
    }
    return p;
  }

  static QuadCell from_path(int macro, const std::vector<int>& p) {
    QuadCell c;
    c.macro = macro;
    c.level = static_cast<int>(p.size());
    for (int v : p) {
      c.ix = (c.ix << 1) | (v & 1);
      c.iy = (c.iy << 1) | ((v >> 1) & 1);
    }
    return c;
  }
};

struct BudgetExceeded : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// dyadic unit: reference square is [0, kDyadicUnit] in integer face coordinates
constexpr int64_t kDyadicShift = 24;
constexpr int64_t kDyadicUnit = int64_t(1) << kDyadicShift;

struct ConformingFace {
  int leaf_a = -1, side_a = -1;
  int leaf_b = -1, side_b = -1;
  bool reversed = false;  // b's face parameter descends w.r.t. a's
};

struct HangingChild {
  int leaf = -1, side = -1;
  bool reversed = false;  // child's face parameter descends w.r.t. parent's
};

struct HangingFace {
  int parent = -1, parent_side = -1;
  std::array<HangingChild, 2> child{};  // [0] covers parent param [-1,0], [1] covers [0,1]
};

struct BoundaryFace {
  int leaf = -1, side = -1;
  BoundaryTag tag = BoundaryTag::None;
};

struct MeshTopology {
  std::vector<ConformingFace> conforming;
  std::vector<HangingFace> hanging;
  std::vector<BoundaryFace> boundary;
};

namespace detail {

struct FaceRec {
  int leaf = -1, side = -1;
  int64_t lo = 0, hi = 0;  // canonical line interval
  bool flip = false;       // face param descends w.r.t. canonical param
  int group = 0;           // 0/1: which side of the line the cell lies on
  int level = 0;
};

// key identifying a 1D line that can carry faces
struct LineKey {
  int type = 0;  // 0: interior macro line, 1: linked macro edge pair
  int a = 0;     // macro id | edge pair id
  int b = 0;     // axis (0: vertical line x=const, 1: horizontal) | unused
  int64_t c = 0; // line coordinate | unused
  bool operator<(const LineKey& o) const {
    return std::tie(type, a, b, c) < std::tie(o.type, o.a, o.b, o.c);
  }
};

}  // namespace detail

struct MeshMutation;

class AdaptiveMesh {
 public:
  std::vector<Point2> macro_vertices;
  std::vector<MacroElement> macros;
  std::vector<QuadCell> leaves;
  int element_budget = 8192;
  int max_level = 12;
  uint64_t version = next_version();

  static uint64_t next_version() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  int num_leaves() const { return static_cast<int>(leaves.size()); }

  // Establish macro adjacency from shared vertex pairs; remaining sides keep
  // their boundary tags. Call once after building macros.
  void finalize_macros() {
    std::map<std::pair<int, int>, std::pair<int, int>> open;  // vertex pair -> (macro, side)
    int next_pair = edge_pair_count_;
    for (auto& m : macros)
      for (int s = 0; s < 4; ++s) {
        if (m.link[s].tag == BoundaryTag::Periodic || m.link[s].macro >= 0) continue;
        auto sc = side_corners(s);
        int va = m.verts[sc[0]], vb = m.verts[sc[1]];
        auto key = std::minmax(va, vb);
        auto it = open.find({key.first, key.second});
        if (it == open.end()) {
          open[{key.first, key.second}] = {m.id, s};
        } else {
          auto [m2, s2] = it->second;
          auto sc2 = side_corners(s2);
          const bool rev = macros[m2].verts[sc2[0]] != va;
          m.link[s] = {m2, s2, rev, BoundaryTag::None, next_pair};
          macros[m2].link[s2] = {m.id, s, rev, BoundaryTag::None, next_pair};
          ++next_pair;
          open.erase(it);
        }
      }
    edge_pair_count_ = next_pair;
    for (auto& [k, v] : open) {
      auto& lnk = macros[v.first].link[v.second];
      if (lnk.tag == BoundaryTag::None)
        throw std::runtime_error("finalize_macros: untagged open side on macro " +
                                 std::to_string(v.first));
    }
  }

  int edge_pair_count() const { return edge_pair_count_; }
  void set_edge_pair_count(int n) { edge_pair_count_ = n; }

  // Explicit periodic pairing of two macro sides (e.g. y = -15D with y = +15D).
  void add_periodic_pair(int ma, int sa, int mb, int sb, bool reversed) {
    const int id = edge_pair_count_++;
    macros[ma].link[sa] = {mb, sb, reversed, BoundaryTag::Periodic, id};
    macros[mb].link[sb] = {ma, sa, reversed, BoundaryTag::Periodic, id};
  }

  void seed_leaves() {
    leaves.clear();
    for (const auto& m : macros) leaves.push_back({m.id, 0, 0, 0});
    version = next_version();
  }

  GeomQuad macro_geometry(int macro_id) const {
    const auto& m = macros[macro_id];
    GeomQuad g;
    for (int c = 0; c < 4; ++c) g.corner[c] = macro_vertices[m.verts[c]];
    g.curve = m.curve;
    return g;
  }

  GeomQuad leaf_geometry(int leaf_id) const {
    const auto& c = leaves[leaf_id];
    GeomQuad g = macro_geometry(c.macro);
    for (int d = 0; d < c.level; ++d) {
      const int bx = (c.ix >> (c.level - 1 - d)) & 1;
      const int by = (c.iy >> (c.level - 1 - d)) & 1;
      g = g.child(bx, by);
    }
    return g;
  }

  // ---- topology -----------------------------------------------------------

  MeshTopology build_topology() const {
    MeshTopology topo;
    std::map<detail::LineKey, std::vector<detail::FaceRec>> lines;
    collect_faces(leaves, lines, &topo.boundary);
    for (auto& [key, recs] : lines) match_line(key, recs, topo);
    return topo;
  }

  // ---- refinement / coarsening --------------------------------------------
  // (definitions follow the class; the result type embeds an AdaptiveMesh)

  MeshMutation refine(const std::set<int>& marks) const;
  MeshMutation coarsen(const std::vector<std::array<int, 4>>& groups) const;

  // sibling quartets currently present in the mesh (coarsening candidates)
  std::vector<std::array<int, 4>> sibling_groups() const {
    std::map<std::tuple<int, int, int, int>, std::array<int, 4>> parents;
    std::map<std::tuple<int, int, int, int>, int> counts;
    for (int i = 0; i < num_leaves(); ++i) {
      const auto& c = leaves[i];
      if (c.level == 0) continue;
      auto key = std::make_tuple(c.macro, c.level, c.ix >> 1, c.iy >> 1);
      parents[key][(c.iy & 1) * 2 + (c.ix & 1)] = i;
      counts[key]++;
    }
    std::vector<std::array<int, 4>> out;
    for (auto& [k, v] : parents)
      if (counts[k] == 4) out.push_back(v);
    return out;
  }

 private:
  int edge_pair_count_ = 0;

  void collect_faces(const std::vector<QuadCell>& cells,
                     std::map<detail::LineKey, std::vector<detail::FaceRec>>& lines,
                     std::vector<BoundaryFace>* boundary) const {
    for (int i = 0; i < static_cast<int>(cells.size()); ++i) {
      const auto& c = cells[i];
      const int64_t h = kDyadicUnit >> c.level;
      const int64_t x0 = c.ix * h, y0 = c.iy * h;
      for (int s = 0; s < 4; ++s) {
        detail::FaceRec rec;
        rec.leaf = i;
        rec.side = s;
        rec.level = c.level;
        // side geometry in macro reference dyadic coords
        int64_t coord, lo;
        int axis;  // 0: vertical line (x = coord), 1: horizontal line (y = coord)
        switch (s) {
          case 0: axis = 1; coord = y0;     lo = x0; break;
          case 1: axis = 0; coord = x0 + h; lo = y0; break;
          case 2: axis = 1; coord = y0 + h; lo = x0; break;
          default: axis = 0; coord = x0;    lo = y0; break;
        }
        const bool on_macro_boundary = (coord == 0 || coord == kDyadicUnit);
        if (!on_macro_boundary) {
          rec.lo = lo;
          rec.hi = lo + h;
          rec.flip = false;
          rec.group = (s == 0 || s == 3) ? 0 : 1;
          lines[{0, c.macro, axis, coord}].push_back(rec);
          continue;
        }
        // which macro side are we on?
        int mside;
        if (axis == 1) mside = (coord == 0) ? 0 : 2;
        else mside = (coord == 0) ? 3 : 1;
        const auto& lnk = macros[c.macro].link[mside];
        if (lnk.macro < 0) {
          if (boundary) boundary->push_back({i, s, lnk.tag});
          continue;
        }
        // canonical param = side param of the pair owner (smaller (macro, side))
        const bool owner = std::make_pair(c.macro, mside) <=
                           std::make_pair(lnk.macro, lnk.side);
        if (owner) {
          rec.lo = lo;
          rec.hi = lo + h;
          rec.flip = false;
        } else if (!lnk.reversed) {
          rec.lo = lo;
          rec.hi = lo + h;
          rec.flip = false;
        } else {
          rec.lo = kDyadicUnit - (lo + h);
          rec.hi = kDyadicUnit - lo;
          rec.flip = true;
        }
        rec.group = owner ? 0 : 1;
        // self-linked pairs (same macro both sides) still split into groups by side
        if (lnk.macro == c.macro && lnk.side == mside)
          throw std::runtime_error("mesh: side linked to itself");
        lines[{1, lnk.edge_pair, 0, 0}].push_back(rec);
      }
    }
  }

  static void match_line(const detail::LineKey&, std::vector<detail::FaceRec>& recs,
                         MeshTopology& topo) {
    std::vector<detail::FaceRec> g0, g1;
    for (auto& r : recs) (r.group == 0 ? g0 : g1).push_back(r);
    auto bylo = [](const detail::FaceRec& a, const detail::FaceRec& b) { return a.lo < b.lo; };
    std::sort(g0.begin(), g0.end(), bylo);
    std::sort(g1.begin(), g1.end(), bylo);
    size_t i = 0, j = 0;
    while (i < g0.size() && j < g1.size()) {
      auto& a = g0[i];
      auto& b = g1[j];
      if (a.lo == b.lo && a.hi == b.hi) {
        topo.conforming.push_back({a.leaf, a.side, b.leaf, b.side, a.flip != b.flip});
        ++i;
        ++j;
      } else if (a.lo <= b.lo && b.hi <= a.hi) {
        // a is the parent face; expect exactly two children from g1
        if (j + 1 >= g1.size() || g1[j].hi != g1[j + 1].lo || g1[j + 1].hi != a.hi ||
            g1[j].lo != a.lo)
          throw std::runtime_error("mesh: non 2:1 interface (balance violated)");
        HangingFace hf;
        hf.parent = a.leaf;
        hf.parent_side = a.side;
        const detail::FaceRec* c0 = &g1[j];
        const detail::FaceRec* c1 = &g1[j + 1];
        if (a.flip) std::swap(c0, c1);  // order children by parent's ascending param
        hf.child[0] = {c0->leaf, c0->side, a.flip != c0->flip};
        hf.child[1] = {c1->leaf, c1->side, a.flip != c1->flip};
        topo.hanging.push_back(hf);
        i += 1;
        j += 2;
      } else if (b.lo <= a.lo && a.hi <= b.hi) {
        if (i + 1 >= g0.size() || g0[i].hi != g0[i + 1].lo || g0[i + 1].hi != b.hi ||
            g0[i].lo != b.lo)
          throw std::runtime_error("mesh: non 2:1 interface (balance violated)");
        HangingFace hf;
        hf.parent = b.leaf;
        hf.parent_side = b.side;
        const detail::FaceRec* c0 = &g0[i];
        const detail::FaceRec* c1 = &g0[i + 1];
        if (b.flip) std::swap(c0, c1);
        hf.child[0] = {c0->leaf, c0->side, b.flip != c0->flip};
        hf.child[1] = {c1->leaf, c1->side, b.flip != c1->flip};
        topo.hanging.push_back(hf);
        i += 2;
        j += 1;
      } else {
        throw std::runtime_error("mesh: inconsistent face intervals");
      }
    }
    if (i != g0.size() || j != g1.size())
      throw std::runtime_error("mesh: unmatched faces on interior line");
  }

  // Expand `marks` until refining every marked leaf keeps the 2:1 balance.
  void balance_closure(std::set<int>& marks) const {
    // hypothetical level per leaf after refinement (refined leaf acts as level+1)
    for (bool changed = true; changed;) {
      changed = false;
      std::map<detail::LineKey, std::vector<detail::FaceRec>> lines;
      collect_faces(leaves, lines, nullptr);
      for (auto& [key, recs] : lines) {
        for (auto& ra : recs)
          for (auto& rb : recs) {
            if (ra.group == rb.group) continue;
            if (ra.hi <= rb.lo || rb.hi <= ra.lo) continue;  // no overlap
            const int la = ra.level + (marks.count(ra.leaf) ? 1 : 0);
            const int lb = rb.level + (marks.count(rb.leaf) ? 1 : 0);
            if (lb - la >= 2 && !marks.count(ra.leaf)) {
              marks.insert(ra.leaf);
              changed = true;
            } else if (la - lb >= 2 && !marks.count(rb.leaf)) {
              marks.insert(rb.leaf);
              changed = true;
            }
          }
      }
    }
  }

  bool merge_keeps_balance(const std::array<int, 4>& group) const {
    const auto& c0 = leaves[group[0]];
    const int parent_level = c0.level - 1;
    std::map<detail::LineKey, std::vector<detail::FaceRec>> lines;
    collect_faces(leaves, lines, nullptr);
    std::set<int> members(group.begin(), group.end());
    for (auto& [key, recs] : lines)
      for (auto& ra : recs) {
        if (!members.count(ra.leaf)) continue;
        for (auto& rb : recs) {
          if (rb.group == ra.group || members.count(rb.leaf)) continue;
          if (ra.hi <= rb.lo || rb.hi <= ra.lo) continue;
          if (rb.level - parent_level >= 2) return false;
        }
      }
    return true;
  }
};

struct MeshCorrespondence {
  uint64_t src_version = 0, dst_version = 0;
  std::vector<int> old_to_new;  // -1 where the old leaf was replaced
  std::vector<std::pair<int, std::array<int, 4>>> refined;    // old id -> children new ids
  std::vector<std::pair<int, std::array<int, 4>>> coarsened;  // new id -> old children ids
};

struct MeshMutation {
  AdaptiveMesh mesh;
  MeshCorrespondence corr;
};

inline MeshMutation AdaptiveMesh::refine(const std::set<int>& marks) const {
  for (int id : marks)
    if (id < 0 || id >= num_leaves())
      throw std::invalid_argument("refine: unknown leaf id " + std::to_string(id));
  std::set<int> all = marks;
  balance_closure(all);
  const int new_count = num_leaves() + 3 * static_cast<int>(all.size());
  if (new_count > element_budget)
    throw BudgetExceeded("refine: element budget " + std::to_string(element_budget) +
                         " exceeded (would need " + std::to_string(new_count) + " elements)");
  MeshMutation out;
  out.mesh.macro_vertices = macro_vertices;
  out.mesh.macros = macros;
  out.mesh.element_budget = element_budget;
  out.mesh.max_level = max_level;
  out.mesh.edge_pair_count_ = edge_pair_count_;
  out.corr.src_version = version;
  out.corr.old_to_new.assign(num_leaves(), -1);
  for (int i = 0; i < num_leaves(); ++i) {
    const auto& c = leaves[i];
    if (all.count(i)) {
      if (c.level + 1 > max_level)
        throw BudgetExceeded("refine: max refinement level reached on leaf " + std::to_string(i));
      std::array<int, 4> kids{};
      for (int cy = 0; cy < 2; ++cy)
        for (int cx = 0; cx < 2; ++cx) {
          kids[cy * 2 + cx] = static_cast<int>(out.mesh.leaves.size());
          out.mesh.leaves.push_back({c.macro, c.level + 1, (c.ix << 1) | cx, (c.iy << 1) | cy});
        }
      out.corr.refined.push_back({i, kids});
    } else {
      out.corr.old_to_new[i] = static_cast<int>(out.mesh.leaves.size());
      out.mesh.leaves.push_back(c);
    }
  }
  out.corr.dst_version = out.mesh.version;
  return out;
}

inline MeshMutation AdaptiveMesh::coarsen(const std::vector<std::array<int, 4>>& groups) const {
  std::vector<int> group_of(num_leaves(), -1);
  std::vector<bool> group_ok;
  for (size_t g = 0; g < groups.size(); ++g) {
    auto ids = groups[g];
    for (int id : ids)
      if (id < 0 || id >= num_leaves()) throw std::invalid_argument("coarsen: unknown leaf id");
    const auto& c0 = leaves[ids[0]];
    if (c0.level == 0) throw std::invalid_argument("coarsen: level-0 leaves have no parent");
    const int px = c0.ix >> 1, py = c0.iy >> 1;
    std::set<std::pair<int, int>> found;
    for (int id : ids) {
      const auto& c = leaves[id];
      if (c.macro != c0.macro || c.level != c0.level || (c.ix >> 1) != px || (c.iy >> 1) != py)
        throw std::invalid_argument("coarsen: group is not a sibling quartet");
      found.insert({c.ix & 1, c.iy & 1});
    }
    if (found.size() != 4) throw std::invalid_argument("coarsen: duplicate sibling in group");
    for (int id : ids) group_of[id] = static_cast<int>(g);
    group_ok.push_back(merge_keeps_balance(ids));
  }

  MeshMutation out;
  out.mesh.macro_vertices = macro_vertices;
  out.mesh.macros = macros;
  out.mesh.element_budget = element_budget;
  out.mesh.max_level = max_level;
  out.mesh.edge_pair_count_ = edge_pair_count_;
  out.corr.src_version = version;
  out.corr.old_to_new.assign(num_leaves(), -1);
  std::vector<bool> emitted(groups.size(), false);
  for (int i = 0; i < num_leaves(); ++i) {
    const int g = group_of[i];
    if (g >= 0 && group_ok[g]) {
      if (!emitted[g]) {
        emitted[g] = true;
        const auto& c0 = leaves[groups[g][0]];
        const int parent = static_cast<int>(out.mesh.leaves.size());
        out.mesh.leaves.push_back({c0.macro, c0.level - 1, c0.ix >> 1, c0.iy >> 1});
        std::array<int, 4> ordered{};
        for (int id : groups[g]) {
          const auto& c = leaves[id];
          ordered[(c.iy & 1) * 2 + (c.ix & 1)] = id;
        }
        out.corr.coarsened.push_back({parent, ordered});
      }
    } else {
      out.corr.old_to_new[i] = static_cast<int>(out.mesh.leaves.size());
      out.mesh.leaves.push_back(leaves[i]);
    }
  }
  out.corr.dst_version = out.mesh.version;
  return out;
}

}  // namespace sstab

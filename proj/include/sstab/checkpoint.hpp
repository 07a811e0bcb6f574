#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <algorithm>
#include <map>

#include "sstab/mesh.hpp"

namespace sstab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Self-contained restart/visualization container: mesh snapshot plus named
// scalar metadata and named double arrays.
struct Checkpoint {
  int order = 7;
  uint64_t config_hash = 0;
  AdaptiveMesh mesh;
  std::map<std::string, double> meta;
  std::map<std::string, std::vector<double>> arrays;

  double meta_or(const std::string& key, double fallback) const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
  }
  const std::vector<double>& array(const std::string& key) const {
    auto it = arrays.find(key);
    if (it == arrays.end()) throw CheckpointError("checkpoint: missing array '" + key + "'");
    return it->second;
  }
  bool has_array(const std::string& key) const { return arrays.count(key) > 0; }
};

namespace detail {

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("checkpoint: truncated file");
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<uint16_t>(out, static_cast<uint16_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
  const auto n = get<uint16_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw CheckpointError("checkpoint: truncated string");
  return s;
}

}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  out.write("SSTB", 4);
  detail::put<uint32_t>(out, kCheckpointVersion);
  detail::put<uint32_t>(out, 0x01020304u);
  detail::put<uint32_t>(out, static_cast<uint32_t>(c.order));
  detail::put<uint64_t>(out, c.config_hash);

  const AdaptiveMesh& m = c.mesh;
  detail::put<uint32_t>(out, static_cast<uint32_t>(m.macro_vertices.size()));
  for (const auto& v : m.macro_vertices) {
    detail::put<double>(out, v.x);
    detail::put<double>(out, v.y);
  }
  detail::put<uint32_t>(out, static_cast<uint32_t>(m.macros.size()));
  for (const auto& e : m.macros) {
    for (int k = 0; k < 4; ++k) detail::put<int32_t>(out, e.verts[k]);
    for (int s = 0; s < 4; ++s) {
      detail::put<uint8_t>(out, static_cast<uint8_t>(e.curve[s].type));
      detail::put<double>(out, e.curve[s].cx);
      detail::put<double>(out, e.curve[s].cy);
      detail::put<double>(out, e.curve[s].r);
      detail::put<int32_t>(out, e.link[s].macro);
      detail::put<int32_t>(out, e.link[s].side);
      detail::put<uint8_t>(out, e.link[s].reversed ? 1 : 0);
      detail::put<uint8_t>(out, static_cast<uint8_t>(e.link[s].tag));
      detail::put<int32_t>(out, e.link[s].edge_pair);
    }
  }
  detail::put<int32_t>(out, m.element_budget);
  detail::put<int32_t>(out, m.max_level);
  // per-tree leaf path lists
  detail::put<uint32_t>(out, static_cast<uint32_t>(m.leaves.size()));
  for (const auto& leaf : m.leaves) {
    detail::put<int32_t>(out, leaf.macro);
    const auto path = leaf.path();
    detail::put<uint8_t>(out, static_cast<uint8_t>(path.size()));
    for (int p : path) detail::put<uint8_t>(out, static_cast<uint8_t>(p));
  }

  detail::put<uint32_t>(out, static_cast<uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    detail::put_string(out, k);
    detail::put<double>(out, v);
  }
  detail::put<uint32_t>(out, static_cast<uint32_t>(c.arrays.size()));
  for (const auto& [k, v] : c.arrays) {
    detail::put_string(out, k);
    detail::put<uint64_t>(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SSTB", 4) != 0)
    throw CheckpointError("checkpoint: bad magic in '" + path + "'");
  const auto version = detail::get<uint32_t>(in);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  if (detail::get<uint32_t>(in) != 0x01020304u)
    throw CheckpointError("checkpoint: endianness marker mismatch");

  Checkpoint c;
  c.order = static_cast<int>(detail::get<uint32_t>(in));
  c.config_hash = detail::get<uint64_t>(in);

  AdaptiveMesh& m = c.mesh;
  const auto nv = detail::get<uint32_t>(in);
  m.macro_vertices.resize(nv);
  for (auto& v : m.macro_vertices) {
    v.x = detail::get<double>(in);
    v.y = detail::get<double>(in);
  }
  const auto nm = detail::get<uint32_t>(in);
  m.macros.resize(nm);
  for (uint32_t i = 0; i < nm; ++i) {
    auto& e = m.macros[i];
    e.id = static_cast<int>(i);
    for (int k = 0; k < 4; ++k) e.verts[k] = detail::get<int32_t>(in);
    for (int s = 0; s < 4; ++s) {
      e.curve[s].type = static_cast<EdgeCurve>(detail::get<uint8_t>(in));
      e.curve[s].cx = detail::get<double>(in);
      e.curve[s].cy = detail::get<double>(in);
      e.curve[s].r = detail::get<double>(in);
      e.link[s].macro = detail::get<int32_t>(in);
      e.link[s].side = detail::get<int32_t>(in);
      e.link[s].reversed = detail::get<uint8_t>(in) != 0;
      e.link[s].tag = static_cast<BoundaryTag>(detail::get<uint8_t>(in));
      e.link[s].edge_pair = detail::get<int32_t>(in);
    }
  }
  m.element_budget = detail::get<int32_t>(in);
  m.max_level = detail::get<int32_t>(in);
  int pairs = 0;
  for (const auto& e : m.macros)
    for (int s = 0; s < 4; ++s) pairs = std::max(pairs, e.link[s].edge_pair + 1);
  m.set_edge_pair_count(pairs);
  const auto nl = detail::get<uint32_t>(in);
  m.leaves.resize(nl);
  for (auto& leaf : m.leaves) {
    const int macro = detail::get<int32_t>(in);
    const auto depth = detail::get<uint8_t>(in);
    std::vector<int> path(depth);
    for (auto& p : path) p = detail::get<uint8_t>(in);
    leaf = QuadCell::from_path(macro, path);
  }

  const auto nmeta = detail::get<uint32_t>(in);
  for (uint32_t i = 0; i < nmeta; ++i) {
    const std::string key = detail::get_string(in);
    c.meta[key] = detail::get<double>(in);
  }
  const auto narr = detail::get<uint32_t>(in);
  for (uint32_t i = 0; i < narr; ++i) {
    const std::string key = detail::get_string(in);
    const auto size = detail::get<uint64_t>(in);
    std::vector<double> data(size);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(size * sizeof(double)));
    if (!in) throw CheckpointError("checkpoint: truncated array '" + key + "'");
    c.arrays[key] = std::move(data);
  }
  return c;
}

}  // namespace sstab

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sstab/mesh_builders.hpp"

namespace sstab {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Run configuration. Defaults follow the validated cylinder case: N = 7,
// CFL 0.3, SFD (chi, Delta) = (0.5, 4.05) with threshold 1e-10, 20% element
// budget per refinement round, transient T_d = 2, Krylov (m, nev, tol) =
// (200, 50, 1e-6).
struct RunConfig {
  // case
  double re = 50.0;
  int order = 7;
  double cfl = 0.3;
  double dt_max = 0.05;
  double velocity_tol = 1e-10;
  double pressure_tol = 1e-8;

  // baseflow
  bool potential_ic = true;  // potential-flow start (shorter startup transient)

  // sfd
  double sfd_chi = 0.5;
  double sfd_delta = 4.05;
  double sfd_threshold = 1e-10;

  // refinement
  double budget_fraction = 0.20;
  int baseflow_rounds = 4;
  int linear_rounds = 8;
  double window = 0.0;        // SEI averaging window T; 0 = two shedding periods
  double transient = 2.0;     // T_d before indicator collection starts
  int element_budget = 8192;
  double sample_every = 0.25; // indicator/probe sampling interval
  double stop_rel_change = 0.01;
  double stagnation_window = 200.0;

  // linear runs
  bool fresh_mesh = true;             // start from Mesh A2 instead of Mesh A
  double initial_refine_radius = 1.5; // one refinement pass within this radius
  double noise_amplitude = 1e-4;
  double linear_time_cap = 400.0;

  // eigensolver
  int eig_m = 200;
  int eig_nev = 50;
  double eig_tol = 1e-6;
  double eig_ts = 0.5;
  int eig_cycles = 12;

  // probes and output
  std::vector<Point2> probes{{6.0, 1.0}};
  uint64_t seed = 20250808;
  std::string outdir = "out";

  CylinderMeshConfig mesh;

  double shedding_period() const { return 2.0 * M_PI / 0.768; }
  double sei_window() const { return window > 0.0 ? window : 2.0 * shedding_period(); }

  void validate() const {
    if (order < 2 || order > 11) throw ConfigError("config: order out of range [2, 11]");
    if (cfl > 0.3 || cfl <= 0.0) throw ConfigError("config: cfl must be in (0, 0.3]");
    if (!(budget_fraction > 0.0) || budget_fraction > 1.0)
      throw ConfigError("config: refine.budget_fraction must be in (0, 1]");
    if (noise_amplitude <= 0.0)
      throw ConfigError("config: linear.noise_amplitude must be positive");
    if (eig_m < 2 || eig_nev < 1 || eig_nev > eig_m)
      throw ConfigError("config: eigensolver sizes invalid");
    if (!(eig_ts > 0.0)) throw ConfigError("config: eigensolver.t_sample must be positive");
    if (sfd_threshold <= 0.0) throw ConfigError("config: sfd.threshold must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

// Flat key = value text, dotted section names, # comments.
inline std::map<std::string, std::string> parse_config_text(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
    kv[key] = val;
  }
  return kv;
}

inline RunConfig config_from_map(const std::map<std::string, std::string>& kv) {
  RunConfig c;
  auto num = [](const std::string& v, const std::string& key) {
    try {
      size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing characters");
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' has non-numeric value '" + v + "'");
    }
  };
  for (const auto& [key, val] : kv) {
    if (key == "case.re") c.re = num(val, key);
    else if (key == "case.order") c.order = static_cast<int>(num(val, key));
    else if (key == "case.cfl") c.cfl = num(val, key);
    else if (key == "case.dt_max") c.dt_max = num(val, key);
    else if (key == "case.velocity_tol") c.velocity_tol = num(val, key);
    else if (key == "case.pressure_tol") c.pressure_tol = num(val, key);
    else if (key == "baseflow.potential_ic") c.potential_ic = num(val, key) != 0.0;
    else if (key == "sfd.chi") c.sfd_chi = num(val, key);
    else if (key == "sfd.delta") c.sfd_delta = num(val, key);
    else if (key == "sfd.threshold") c.sfd_threshold = num(val, key);
    else if (key == "refine.budget_fraction") c.budget_fraction = num(val, key);
    else if (key == "refine.baseflow_rounds") c.baseflow_rounds = static_cast<int>(num(val, key));
    else if (key == "refine.linear_rounds") c.linear_rounds = static_cast<int>(num(val, key));
    else if (key == "refine.window") c.window = num(val, key);
    else if (key == "refine.transient") c.transient = num(val, key);
    else if (key == "refine.element_budget") c.element_budget = static_cast<int>(num(val, key));
    else if (key == "refine.sample_every") c.sample_every = num(val, key);
    else if (key == "refine.stop_rel_change") c.stop_rel_change = num(val, key);
    else if (key == "refine.stagnation_window") c.stagnation_window = num(val, key);
    else if (key == "linear.fresh_mesh") c.fresh_mesh = num(val, key) != 0.0;
    else if (key == "linear.initial_refine_radius") c.initial_refine_radius = num(val, key);
    else if (key == "linear.noise_amplitude") c.noise_amplitude = num(val, key);
    else if (key == "linear.time_cap") c.linear_time_cap = num(val, key);
    else if (key == "eigensolver.m") c.eig_m = static_cast<int>(num(val, key));
    else if (key == "eigensolver.nev") c.eig_nev = static_cast<int>(num(val, key));
    else if (key == "eigensolver.tol") c.eig_tol = num(val, key);
    else if (key == "eigensolver.t_sample") c.eig_ts = num(val, key);
    else if (key == "eigensolver.cycles") c.eig_cycles = static_cast<int>(num(val, key));
    else if (key == "run.seed") c.seed = static_cast<uint64_t>(num(val, key));
    else if (key == "run.outdir") c.outdir = val;
    else if (key == "probes.locations") {
      c.probes.clear();
      std::istringstream ss(val);
      double x, y;
      char sep;
      while (ss >> x >> sep >> y) {
        c.probes.push_back({x, y});
        ss >> std::ws;
        if (ss.peek() == ';') ss.get();
      }
      if (c.probes.empty()) throw ConfigError("config: probes.locations parsed empty");
    } else if (key == "mesh.n_theta") c.mesh.n_theta = static_cast<int>(num(val, key));
    else if (key == "mesh.n_rings") c.mesh.n_rings = static_cast<int>(num(val, key));
    else if (key == "mesh.square_half") c.mesh.square_half = num(val, key);
    else if (key == "mesh.ring_grading") c.mesh.ring_grading = num(val, key);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  c.mesh.element_budget = c.element_budget;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides = {}) {
  std::map<std::string, std::string> kv;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    kv = parse_config_text(in);
  }
  for (const auto& ov : overrides) {
    std::istringstream ss(ov);
    auto extra = parse_config_text(ss);
    for (auto& [k, v] : extra) kv[k] = v;
  }
  return config_from_map(kv);
}

inline std::string config_echo(const RunConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "case.re = " << c.re << "\n";
  out << "case.order = " << c.order << "\n";
  out << "case.cfl = " << c.cfl << "\n";
  out << "case.dt_max = " << c.dt_max << "\n";
  out << "case.velocity_tol = " << c.velocity_tol << "\n";
  out << "case.pressure_tol = " << c.pressure_tol << "\n";
  out << "baseflow.potential_ic = " << (c.potential_ic ? 1 : 0) << "\n";
  out << "sfd.chi = " << c.sfd_chi << "\n";
  out << "sfd.delta = " << c.sfd_delta << "\n";
  out << "sfd.threshold = " << c.sfd_threshold << "\n";
  out << "refine.budget_fraction = " << c.budget_fraction << "\n";
  out << "refine.baseflow_rounds = " << c.baseflow_rounds << "\n";
  out << "refine.linear_rounds = " << c.linear_rounds << "\n";
  out << "refine.window = " << c.sei_window() << "\n";
  out << "refine.transient = " << c.transient << "\n";
  out << "refine.element_budget = " << c.element_budget << "\n";
  out << "refine.sample_every = " << c.sample_every << "\n";
  out << "refine.stop_rel_change = " << c.stop_rel_change << "\n";
  out << "refine.stagnation_window = " << c.stagnation_window << "\n";
  out << "linear.fresh_mesh = " << (c.fresh_mesh ? 1 : 0) << "\n";
  out << "linear.initial_refine_radius = " << c.initial_refine_radius << "\n";
  out << "linear.noise_amplitude = " << c.noise_amplitude << "\n";
  out << "linear.time_cap = " << c.linear_time_cap << "\n";
  out << "eigensolver.m = " << c.eig_m << "\n";
  out << "eigensolver.nev = " << c.eig_nev << "\n";
  out << "eigensolver.tol = " << c.eig_tol << "\n";
  out << "eigensolver.t_sample = " << c.eig_ts << "\n";
  out << "eigensolver.cycles = " << c.eig_cycles << "\n";
  out << "run.seed = " << c.seed << "\n";
  out << "run.outdir = " << c.outdir << "\n";
  out << "probes.locations =";
  for (size_t i = 0; i < c.probes.size(); ++i)
    out << (i ? "; " : " ") << c.probes[i].x << " , " << c.probes[i].y;
  out << "\n";
  out << "mesh.n_theta = " << c.mesh.n_theta << "\n";
  out << "mesh.n_rings = " << c.mesh.n_rings << "\n";
  out << "mesh.square_half = " << c.mesh.square_half << "\n";
  out << "mesh.ring_grading = " << c.mesh.ring_grading << "\n";
  return out.str();
}

inline uint64_t config_hash(const RunConfig& c) {
  const std::string s = config_echo(c);
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace sstab

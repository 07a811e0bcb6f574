#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include "sstab/workbench.hpp"

using namespace sstab;

namespace {

RunConfig tiny_config(const std::string& outdir) {
  RunConfig c;
  c.order = 4;
  c.mesh.n_theta = 8;
  c.mesh.n_rings = 2;
  c.mesh.x_left = {-15.0, -8.0, -3.0};
  c.mesh.x_right = {3.0, 10.0, 20.0, 35.0};
  c.mesh.y_outer = {3.0, 8.0, 15.0};
  c.outdir = outdir;
  c.sample_every = 0.5;
  return c;
}

Checkpoint tiny_uniform_checkpoint(const RunConfig& cfg) {
  AdaptiveMesh mesh = build_cylinder_mesh(cfg.mesh);
  auto space = Space::build(mesh, cfg.order);
  Checkpoint ck;
  ck.order = cfg.order;
  ck.mesh = mesh;
  const size_t n = static_cast<size_t>(mesh.num_leaves()) * space->npe;
  std::vector<double> u(n, 1.0), v(n, 0.0);
  ck.arrays["field.u"] = u;
  ck.arrays["field.v"] = v;
  ck.meta["time"] = 0.0;
  return ck;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config defaults pin the validated parameter set") {
  RunConfig c;
  CHECK(c.order == 7);
  CHECK(c.cfl == 0.3);
  CHECK(c.sfd_chi == 0.5);
  CHECK(c.sfd_delta == 4.05);
  CHECK(c.sfd_threshold == 1e-10);
  CHECK(c.budget_fraction == 0.20);
  CHECK(c.transient == 2.0);
  CHECK(c.eig_m == 200);
  CHECK(c.eig_nev == 50);
  CHECK(c.eig_tol == 1e-6);
  CHECK(c.element_budget == 8192);
  CHECK(c.velocity_tol <= 1e-8);
  CHECK(c.pressure_tol <= 1e-8);
  CHECK(c.sei_window() == doctest::Approx(2.0 * 2.0 * M_PI / 0.768));
}

TEST_CASE("config parsing, overrides and validation") {
  std::istringstream in(
      "# comment line\n"
      "case.re = 48     # inline comment\n"
      "eigensolver.m = 80\n"
      "probes.locations = 6 , 1; -14 , 14\n");
  auto kv = parse_config_text(in);
  RunConfig c = config_from_map(kv);
  CHECK(c.re == 48.0);
  CHECK(c.eig_m == 80);
  REQUIRE(c.probes.size() == 2);
  CHECK(c.probes[1].x == -14.0);

  std::istringstream bad("unknown.key = 3\n");
  CHECK_THROWS_AS(config_from_map(parse_config_text(bad)), ConfigError);
  std::istringstream bad2("case.re = fast\n");
  CHECK_THROWS_AS(config_from_map(parse_config_text(bad2)), ConfigError);
  std::istringstream bad3("linear.noise_amplitude = 0\n");
  CHECK_THROWS_AS(config_from_map(parse_config_text(bad3)), ConfigError);

  // echo -> parse round trip preserves the configuration
  RunConfig d = c;
  d.seed = 77;
  std::istringstream echo(config_echo(d));
  RunConfig back = config_from_map(parse_config_text(echo));
  CHECK(config_hash(back) == config_hash(d));
}

TEST_CASE("checkpoint write/read round trip is bit exact") {
  RunConfig cfg = tiny_config("wb_out");
  AdaptiveMesh mesh = build_cylinder_mesh(cfg.mesh);
  mesh = mesh.refine({0, 5}).mesh;

  Checkpoint ck;
  ck.order = 5;
  ck.config_hash = 0x1234abcd5678ull;
  ck.mesh = mesh;
  ck.meta["time"] = 12.5;
  ck.meta["sfd.eps"] = 3.25e-11;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> data(1000);
  for (auto& x : data) x = u(rng) * std::pow(10.0, int(rng() % 40) - 20);
  ck.arrays["field.u"] = data;
  ck.arrays["weird"] = {0.0, -0.0, 1e-300, 1e300, 0.1 + 0.2};

  std::filesystem::create_directories("wb_out");
  write_checkpoint("wb_out/trip.ck", ck);
  Checkpoint rd = read_checkpoint("wb_out/trip.ck");
  CHECK(rd.order == ck.order);
  CHECK(rd.config_hash == ck.config_hash);
  CHECK(rd.meta == ck.meta);
  REQUIRE(rd.arrays.count("field.u") == 1);
  CHECK(std::memcmp(rd.arrays["field.u"].data(), ck.arrays["field.u"].data(),
                    data.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(rd.arrays["weird"].data(), ck.arrays["weird"].data(),
                    5 * sizeof(double)) == 0);
  REQUIRE(rd.mesh.num_leaves() == mesh.num_leaves());
  for (int i = 0; i < mesh.num_leaves(); ++i) {
    CHECK(rd.mesh.leaves[i].macro == mesh.leaves[i].macro);
    CHECK(rd.mesh.leaves[i].level == mesh.leaves[i].level);
    CHECK(rd.mesh.leaves[i].ix == mesh.leaves[i].ix);
    CHECK(rd.mesh.leaves[i].iy == mesh.leaves[i].iy);
  }
  // a loaded mesh supports further topology work
  CHECK_NOTHROW(Space::build(rd.mesh, 4));

  CHECK_THROWS_AS(read_checkpoint("wb_out/nonexistent.ck"), CheckpointError);
}

TEST_CASE("vtk export round trip and cell quality") {
  RunConfig cfg = tiny_config("wb_out");
  std::filesystem::create_directories(cfg.outdir);
  Checkpoint ck = tiny_uniform_checkpoint(cfg);
  // one refinement so a hanging face exists
  auto mut = ck.mesh.refine({3});
  auto space = Space::build(mut.mesh, cfg.order);
  REQUIRE(!space->topo.hanging.empty());
  Field f(space, {"u", "v"});
  for (int e = 0; e < space->mesh.num_leaves(); ++e)
    for (int q = 0; q < space->npe; ++q) {
      f.data[0][e * space->npe + q] = std::sin(0.3 * space->geom[e].x[q]) +
                                      0.1 * space->geom[e].y[q];
      f.data[1][e * space->npe + q] = 2.75;
    }
  Checkpoint out;
  out.order = cfg.order;
  out.mesh = mut.mesh;
  out.arrays["field.u"] = f.data[0];
  out.arrays["field.v"] = f.data[1];
  export_vtk(out, "wb_out/fields.vtk");

  // parse the ASCII back
  std::ifstream in("wb_out/fields.vtk");
  REQUIRE(in.good());
  std::string tok;
  int n_points = 0;
  std::vector<Point2> pts;
  std::vector<std::array<int, 4>> cells;
  std::map<std::string, std::vector<double>> scalars;
  while (in >> tok) {
    if (tok == "POINTS") {
      in >> n_points >> tok;
      pts.resize(n_points);
      for (auto& p : pts) {
        double z;
        in >> p.x >> p.y >> z;
      }
    } else if (tok == "CELLS") {
      int ncells, total;
      in >> ncells >> total;
      cells.resize(ncells);
      for (auto& c : cells) {
        int four;
        in >> four >> c[0] >> c[1] >> c[2] >> c[3];
        REQUIRE(four == 4);
      }
    } else if (tok == "SCALARS") {
      std::string name, type;
      int comps;
      in >> name >> type >> comps;
      in >> tok >> tok;  // LOOKUP_TABLE default
      auto& v = scalars[name];
      v.resize(n_points);
      for (auto& x : v) in >> x;
    }
  }
  REQUIRE(n_points == space->mesh.num_leaves() * space->npe);
  // constant component stays constant
  for (double v : scalars["field_v"]) CHECK(v == doctest::Approx(2.75).epsilon(1e-9));
  // no degenerate quads: 4 distinct vertices and nonzero area
  for (const auto& c : cells) {
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) CHECK(c[a] != c[b]);
    const auto &p0 = pts[c[0]], &p1 = pts[c[1]], &p2 = pts[c[2]];
    const double area2 = (p1.x - p0.x) * (p2.y - p0.y) - (p2.x - p0.x) * (p1.y - p0.y);
    CHECK(std::abs(area2) > 1e-12);
  }
  // sampled values agree with evaluate_at to ASCII precision
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ur(0.0, 1.0);
  int tested = 0;
  for (int k = 0; k < 400 && tested < 100; ++k) {
    const int e = static_cast<int>(rng() % space->mesh.num_leaves());
    const int q = static_cast<int>(rng() % space->npe);
    const size_t idx = static_cast<size_t>(e) * space->npe + q;
    (void)ur;
    const double vtk_val = scalars["field_u"][idx];
    const auto vals = evaluate_at(f, {space->geom[e].x[q], space->geom[e].y[q]});
    CHECK(vtk_val == doctest::Approx(vals[0]).epsilon(1e-6));
    ++tested;
  }
}

TEST_CASE("probe series on constant and zero fields") {
  RunConfig cfg = tiny_config("wb_out");
  std::filesystem::create_directories(cfg.outdir);
  Checkpoint ck = tiny_uniform_checkpoint(cfg);
  write_checkpoint("wb_out/probe_src.ck", ck);
  probe_series({"wb_out/probe_src.ck"}, {{6.0, 1.0}, {-14.0, 14.0}}, "wb_out/probes.csv");
  std::ifstream in("wb_out/probes.csv");
  std::string header, l1, l2;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(header == "t,x,y,u,v");
  for (const std::string& line : {l1, l2}) {
    std::istringstream ls(line);
    double t, x, y, uu, vv;
    char c;
    ls >> t >> c >> x >> c >> y >> c >> uu >> c >> vv;
    CHECK(t == 0.0);
    CHECK(uu == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(vv == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
  }
}

TEST_CASE("restart reproduces the uninterrupted trajectory") {
  RunConfig cfg = tiny_config("wb_out");
  std::filesystem::create_directories(cfg.outdir);
  AdaptiveMesh mesh = build_cylinder_mesh(cfg.mesh);
  auto space = Space::build(mesh, cfg.order);
  StepperConfig scfg;
  scfg.mode = StepMode::Linearized;
  scfg.re = 50.0;
  FlowSolver solver(space, scfg);
  Field base(space, {"u", "v"});
  for (auto& v : base.data[0]) v = 1.0;
  solver.set_base_flow(base);

  FlowState st = solver.make_state();
  auto noise = noise_vector(2 * solver.ndof(), 11);
  for (int g = 0; g < solver.ndof(); ++g) {
    st.u[g] = 1e-3 * noise[g] * solver.mask()[g];
    st.v[g] = 1e-3 * noise[solver.ndof() + g] * solver.mask()[g];
  }
  solver.make_divergence_free(st.u, st.v);
  st.dt = 0.01;

  for (int k = 0; k < 10; ++k) solver.step(st);
  Checkpoint ck;
  ck.order = cfg.order;
  ck.mesh = mesh;
  save_flow_state(ck, "state", st);
  write_checkpoint("wb_out/restart.ck", ck);

  FlowState direct = st;
  for (int k = 0; k < 10; ++k) solver.step(direct);

  Checkpoint rd = read_checkpoint("wb_out/restart.ck");
  FlowState resumed = load_flow_state(rd, "state", solver);
  resumed.dt = st.dt;
  for (int k = 0; k < 10; ++k) solver.step(resumed);

  double dmax = 0.0;
  for (int g = 0; g < solver.ndof(); ++g) {
    dmax = std::max(dmax, std::abs(direct.u[g] - resumed.u[g]));
    dmax = std::max(dmax, std::abs(direct.v[g] - resumed.v[g]));
  }
  CHECK(dmax < 1e-12);
}

TEST_CASE("spectrum runs are deterministic byte for byte") {
  RunConfig cfg = tiny_config("wb_det1");
  cfg.eig_m = 12;
  cfg.eig_nev = 3;
  cfg.eig_ts = 0.1;
  cfg.eig_cycles = 2;
  cfg.eig_tol = 1e-4;
  Checkpoint ck = tiny_uniform_checkpoint(cfg);
  auto r1 = run_spectrum(cfg, ck, StepMode::Linearized);
  RunConfig cfg2 = cfg;
  cfg2.outdir = "wb_det2";
  auto r2 = run_spectrum(cfg2, ck, StepMode::Linearized);
  const std::string a = slurp(r1.csv_path), b = slurp(r2.csv_path);
  REQUIRE(!a.empty());
  CHECK(a == b);
}

TEST_CASE("mesh info summarizes a checkpoint") {
  RunConfig cfg = tiny_config("wb_out");
  Checkpoint ck = tiny_uniform_checkpoint(cfg);
  const std::string info = mesh_info(ck);
  CHECK(info.find("macro elements") != std::string::npos);
  CHECK(info.find("level 0") != std::string::npos);
}

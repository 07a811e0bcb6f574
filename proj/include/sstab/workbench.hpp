#pragma once

#include <filesystem>
#include <iomanip>

#include "sstab/arnoldi.hpp"
#include "sstab/checkpoint.hpp"
#include "sstab/config.hpp"
#include "sstab/error_indicator.hpp"
#include "sstab/sfd.hpp"

namespace sstab {

struct StagnationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- CSV output -------------------------------------------------------------

class CsvWriter {
 public:
  CsvWriter() = default;
  CsvWriter(const std::string& path, const std::string& header) { open(path, header); }

  void open(const std::string& path, const std::string& header) {
    f_.open(path);
    if (!f_) throw std::runtime_error("cannot open '" + path + "' for writing");
    f_ << header << "\n";
  }
  void row(std::initializer_list<double> values) {
    bool first = true;
    for (double v : values) {
      if (!first) f_ << ",";
      first = false;
      f_ << format(v);
    }
    f_ << "\n" << std::flush;
  }
  static std::string format(double v) {
    char buf[32];
    snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
  }
  bool is_open() const { return f_.is_open(); }

 private:
  std::ofstream f_;
};

// probe locations resolved once per mesh
struct ProbeSet {
  std::vector<Point2> points;
  std::vector<Space::Location> locations;

  void bind(const Space& space) {
    locations.clear();
    for (const auto& p : points) {
      auto loc = space.locate(p);
      if (!loc)
        throw ConfigError("probe location (" + std::to_string(p.x) + ", " +
                          std::to_string(p.y) + ") lies outside the domain");
      locations.push_back(*loc);
    }
  }
};

// ---- flow state (de)serialization -------------------------------------------

inline void save_flow_state(Checkpoint& ck, const std::string& prefix, const FlowState& st) {
  ck.arrays[prefix + ".u"] = st.u;
  ck.arrays[prefix + ".v"] = st.v;
  ck.arrays[prefix + ".p"] = st.p;
  ck.arrays[prefix + ".p_prev"] = st.p_prev;
  ck.meta[prefix + ".time"] = st.time;
  ck.meta[prefix + ".dt"] = st.dt;
  ck.meta[prefix + ".step_count"] = st.step_count;
  ck.meta[prefix + ".nhist"] = st.nhist;
  ck.meta[prefix + ".n_psolves"] = st.n_psolves;
  for (int j = 0; j < st.nhist; ++j) {
    const std::string sj = std::to_string(j);
    ck.arrays[prefix + ".u_hist" + sj] = st.u_hist[j];
    ck.arrays[prefix + ".v_hist" + sj] = st.v_hist[j];
    ck.arrays[prefix + ".fu_hist" + sj] = st.fu_hist[j];
    ck.arrays[prefix + ".fv_hist" + sj] = st.fv_hist[j];
    ck.meta[prefix + ".t_hist" + sj] = st.t_hist[j];
  }
  ck.meta[prefix + ".proj_count"] = static_cast<double>(st.proj.xs.size());
  ck.meta[prefix + ".proj_next"] = st.proj.next;
  for (size_t i = 0; i < st.proj.xs.size(); ++i) {
    ck.arrays[prefix + ".proj_x" + std::to_string(i)] = st.proj.xs[i];
    ck.arrays[prefix + ".proj_b" + std::to_string(i)] = st.proj.bs[i];
  }
}

inline FlowState load_flow_state(const Checkpoint& ck, const std::string& prefix,
                                 const FlowSolver& solver) {
  FlowState st = solver.make_state();
  st.u = ck.array(prefix + ".u");
  st.v = ck.array(prefix + ".v");
  st.p = ck.array(prefix + ".p");
  st.p_prev = ck.array(prefix + ".p_prev");
  st.time = ck.meta_or(prefix + ".time", 0.0);
  st.dt = ck.meta_or(prefix + ".dt", 0.0);
  st.step_count = static_cast<int>(ck.meta_or(prefix + ".step_count", 0));
  st.nhist = static_cast<int>(ck.meta_or(prefix + ".nhist", 0));
  st.n_psolves = static_cast<int>(ck.meta_or(prefix + ".n_psolves", 0));
  for (int j = 0; j < st.nhist; ++j) {
    const std::string sj = std::to_string(j);
    st.u_hist[j] = ck.array(prefix + ".u_hist" + sj);
    st.v_hist[j] = ck.array(prefix + ".v_hist" + sj);
    st.fu_hist[j] = ck.array(prefix + ".fu_hist" + sj);
    st.fv_hist[j] = ck.array(prefix + ".fv_hist" + sj);
    st.t_hist[j] = ck.meta_or(prefix + ".t_hist" + sj, 0.0);
  }
  const int pc = static_cast<int>(ck.meta_or(prefix + ".proj_count", 0));
  st.proj.next = static_cast<int>(ck.meta_or(prefix + ".proj_next", 0));
  for (int i = 0; i < pc; ++i) {
    st.proj.xs.push_back(ck.array(prefix + ".proj_x" + std::to_string(i)));
    st.proj.bs.push_back(ck.array(prefix + ".proj_b" + std::to_string(i)));
  }
  return st;
}

// ---- run drivers -------------------------------------------------------------

namespace detail {

inline void log_line(std::ostream* log, const std::string& s) {
  if (log) (*log) << s << "\n" << std::flush;
}

inline std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace detail

struct BaseflowResult {
  std::shared_ptr<const Space> space;
  Field velocity;        // converged base flow
  double final_eps = 0.0;
  double time = 0.0;
  int rounds_done = 0;
  std::string checkpoint_path;
};

// Checkpoint layout shared by the drivers: "field.*" holds nodal fields on
// the checkpoint mesh, "base.*" the frozen base flow of linear runs.
inline Checkpoint make_checkpoint(const RunConfig& cfg, const Space& space,
                                  const FlowState& st) {
  Checkpoint ck;
  ck.order = cfg.order;
  ck.config_hash = config_hash(cfg);
  ck.mesh = space.mesh;
  ck.meta["re"] = cfg.re;
  ck.meta["time"] = st.time;
  std::vector<double> lu, lv;
  space.scatter(st.u, lu);
  space.scatter(st.v, lv);
  ck.arrays["field.u"] = std::move(lu);
  ck.arrays["field.v"] = std::move(lv);
  save_flow_state(ck, "state", st);
  return ck;
}

inline Field checkpoint_velocity_field(const Checkpoint& ck,
                                       const std::shared_ptr<const Space>& space,
                                       const std::string& u_key = "field.u",
                                       const std::string& v_key = "field.v") {
  Field f(space, {"u", "v"});
  f.data[0] = ck.array(u_key);
  f.data[1] = ck.array(v_key);
  f.time = ck.meta_or("time", 0.0);
  if (f.data[0].size() != static_cast<size_t>(space->mesh.num_leaves()) * space->npe)
    throw CheckpointError("checkpoint velocity array does not match the mesh");
  return f;
}

// Nonlinear run with selective frequency damping: adapt the mesh for the
// configured number of rounds, then freeze it and converge the steady state.
inline BaseflowResult run_baseflow(const RunConfig& cfg, std::ostream* log = nullptr,
                                   const Checkpoint* resume = nullptr) {
  cfg.validate();
  std::filesystem::create_directories(cfg.outdir);
  {
    std::ofstream echo(cfg.outdir + "/config.effective");
    echo << config_echo(cfg);
  }
  CsvWriter sfd_csv(cfg.outdir + "/sfd_history.csv", "t,eps_u,eps_v,eps_total,n_elements");
  CsvWriter sei_csv(cfg.outdir + "/sei_history.csv", "round,leaf_id,level,eps_mean,degenerate");

  AdaptiveMesh mesh = resume ? resume->mesh : build_cylinder_mesh(cfg.mesh);
  auto space = Space::build(mesh, cfg.order);

  StepperConfig scfg;
  scfg.mode = StepMode::Nonlinear;
  scfg.re = cfg.re;
  scfg.cfl_target = cfg.cfl;
  scfg.dt_max = cfg.dt_max;
  scfg.velocity_tol = cfg.velocity_tol;
  scfg.pressure_tol = cfg.pressure_tol;
  auto solver = std::make_unique<FlowSolver>(space, scfg);

  FlowState st = solver->make_state();
  SFDState sfd;
  if (resume) {
    st = load_flow_state(*resume, "state", *solver);
    sfd = make_sfd_state(st, cfg.sfd_chi, cfg.sfd_delta);
    if (resume->has_array("sfd.wu")) {
      sfd.wu = resume->array("sfd.wu");
      sfd.wv = resume->array("sfd.wv");
    }
  } else {
    Field ic(space, {"u", "v"});
    if (cfg.potential_ic) {
      // potential flow around the cylinder: much shorter startup transient
      // than a uniform impulsive start
      const double r2c = cfg.mesh.radius * cfg.mesh.radius;
      for (int e = 0; e < space->mesh.num_leaves(); ++e)
        for (int q = 0; q < space->npe; ++q) {
          const double x = space->geom[e].x[q], y = space->geom[e].y[q];
          const double r4 = std::pow(x * x + y * y, 2);
          const size_t idx = static_cast<size_t>(e) * space->npe + q;
          ic.data[0][idx] = 1.0 - r2c * (x * x - y * y) / r4;
          ic.data[1][idx] = -2.0 * r2c * x * y / r4;
        }
    } else {
      for (auto& v : ic.data[0]) v = 1.0;
    }
    solver->set_velocity(st, ic);
    sfd = make_sfd_state(st, cfg.sfd_chi, cfg.sfd_delta);
  }

  int round = 0;
  AveragedIndicator avg(space->mesh.num_leaves(), 0.0, 1e300);
  double window_start = st.time + cfg.transient;
  double next_sample = st.time;
  double eps = 1e300;
  double last_decade_eps = 1e300, last_decade_t = st.time;
  bool frozen = cfg.baseflow_rounds == 0;

  std::vector<double> fu, fv;
  while (true) {
    st.dt = solver->adapt_dt(st);
    if (cfg.sfd_chi != 0.0) {
      sfd_force(*solver, st, sfd, fu, fv);
      solver->step(st, &fu, &fv);
    } else {
      solver->step(st);
    }
    sfd_filter_update(sfd, st.u_hist[0], st.v_hist[0], st.t_hist[0], st.time);

    if (st.time >= next_sample) {
      next_sample = st.time + cfg.sample_every;
      const auto conv = sfd_convergence(*solver, st, sfd);
      eps = conv.eps;
      sfd_csv.row({st.time, conv.eps_u, conv.eps_v, conv.eps,
                   static_cast<double>(space->mesh.num_leaves())});
      sfd.history.push_back({st.time, eps});
      if (log && sfd.history.size() % 40 == 0) {
        const long steps = std::max(1L, solver->stat_steps);
        detail::log_line(log, "baseflow: t = " + detail::fmt(st.time, 5) + ", eps = " +
                                  detail::fmt(eps, 4) + ", dt = " + detail::fmt(st.dt, 3) +
                                  ", cg/step p = " + detail::fmt(double(solver->stat_press_iters) / steps, 3) +
                                  " v = " + detail::fmt(double(solver->stat_helm_iters) / steps, 3));
        solver->stat_steps = solver->stat_press_iters = solver->stat_helm_iters = 0;
      }

      if (!frozen && st.time >= window_start) {
        Field vel = solver->velocity_field(st);
        accumulate(avg, sei_field(vel, {0, 1}), st.time);
      }
      if (eps < last_decade_eps / 10.0) {
        last_decade_eps = eps;
        last_decade_t = st.time;
      }
      if (frozen && eps < cfg.sfd_threshold) break;
      if (st.time - last_decade_t > cfg.stagnation_window && frozen) {
        const bool pred = sfd_predicts_stable({0.0178, 0.768}, cfg.sfd_chi, cfg.sfd_delta);
        throw StagnationError(
            "sfd convergence stagnated: eps = " + detail::fmt(eps) + " at t = " +
            detail::fmt(st.time) + "; feedback predictor for the nominal wake mode says " +
            (pred ? "stable" : "UNSTABLE") + " (chi = " + detail::fmt(cfg.sfd_chi) +
            ", Delta = " + detail::fmt(cfg.sfd_delta) + ")");
      }
    }

    if (!frozen && st.time >= window_start + cfg.sei_window() && avg.samples >= 2) {
      for (int e = 0; e < space->mesh.num_leaves(); ++e)
        sei_csv.row({static_cast<double>(round), static_cast<double>(e),
                     static_cast<double>(space->mesh.leaves[e].level), avg.mean[e],
                     static_cast<double>(avg.degenerate[e])});
      const auto marks = mark_top_fraction(avg, cfg.budget_fraction);
      const int old_count = space->mesh.num_leaves();
      auto mut = space->mesh.refine(marks);
      auto fine = Space::build(mut.mesh, cfg.order);
      Field vel = constrain_continuity(
          transfer_field(solver->velocity_field(st), mut.corr, fine));
      Field wf(space, {"u", "v"});
      space->scatter(sfd.wu, wf.data[0]);
      space->scatter(sfd.wv, wf.data[1]);
      Field wfine = constrain_continuity(transfer_field(wf, mut.corr, fine));

      space = fine;
      solver = std::make_unique<FlowSolver>(space, scfg);
      const double t_now = st.time;
      st = solver->make_state();
      solver->set_velocity(st, vel);
      st.time = t_now;
      sfd = make_sfd_state(st, cfg.sfd_chi, cfg.sfd_delta);
      solver->space->gather_average(wfine.data[0], sfd.wu);
      solver->space->gather_average(wfine.data[1], sfd.wv);

      round += 1;
      detail::log_line(log, "baseflow: round " + std::to_string(round) + " refined " +
                                std::to_string(static_cast<int>(marks.size())) + " leaves, " +
                                std::to_string(old_count) + " -> " +
                                std::to_string(space->mesh.num_leaves()) + " elements (closure +" +
                                std::to_string(space->mesh.num_leaves() - old_count -
                                               3 * static_cast<int>(marks.size())) +
                                ")");
      avg = AveragedIndicator(space->mesh.num_leaves(), 0.0, 1e300);
      window_start = st.time;
      if (round >= cfg.baseflow_rounds) {
        frozen = true;
        detail::log_line(log, "baseflow: mesh frozen at " +
                                  std::to_string(space->mesh.num_leaves()) + " elements");
      }
    }
  }

  BaseflowResult out;
  out.space = space;
  out.velocity = solver->velocity_field(st);
  out.final_eps = eps;
  out.time = st.time;
  out.rounds_done = round;
  Checkpoint ck = make_checkpoint(cfg, *space, st);
  ck.arrays["sfd.wu"] = sfd.wu;
  ck.arrays["sfd.wv"] = sfd.wv;
  ck.meta["sfd.chi"] = sfd.chi;
  ck.meta["sfd.delta"] = sfd.delta;
  ck.meta["sfd.eps"] = eps;
  out.checkpoint_path = cfg.outdir + "/baseflow.ck";
  write_checkpoint(out.checkpoint_path, ck);
  detail::log_line(log, "baseflow: converged, eps = " + detail::fmt(eps) + " at t = " +
                            detail::fmt(st.time) + ", checkpoint " + out.checkpoint_path);
  return out;
}

struct LinearRunResult {
  std::shared_ptr<const Space> space;  // Mesh B
  Field base;                          // frozen base flow on Mesh B
  Field perturbation;
  int rounds_done = 0;
  double probe_frequency = 0.0;
  std::string checkpoint_path;
};

// Direct or adjoint linear run: march the perturbation from seeded noise,
// adapt the mesh on the normalized perturbation indicator, freeze on
// round-over-round convergence of the leading indicators.
inline LinearRunResult run_linear(const RunConfig& cfg, const Checkpoint& base_ck,
                                  StepMode mode, std::ostream* log = nullptr) {
  if (mode == StepMode::Nonlinear)
    throw std::invalid_argument("run_linear: mode must be Linearized or Adjoint");
  cfg.validate();
  std::filesystem::create_directories(cfg.outdir);
  const std::string tag = mode == StepMode::Linearized ? "direct" : "adjoint";
  CsvWriter probes_csv(cfg.outdir + "/probes_" + tag + ".csv", "t,x,y,u,v");
  CsvWriter energy_csv(cfg.outdir + "/energy_" + tag + ".csv", "t,E_pert");
  CsvWriter sei_csv(cfg.outdir + "/sei_history_" + tag + ".csv",
                    "round,leaf_id,level,eps_mean,degenerate");

  // base flow source
  auto base_space = Space::build(base_ck.mesh, base_ck.order);
  Field base_src = checkpoint_velocity_field(base_ck, base_space);

  // starting mesh: fresh Mesh A2 (macro mesh, one refinement pass near the
  // cylinder) or the base flow's Mesh A
  std::shared_ptr<const Space> space;
  if (cfg.fresh_mesh) {
    AdaptiveMesh m = build_cylinder_mesh(cfg.mesh);
    if (cfg.initial_refine_radius > 0.0) {
      std::set<int> marks;
      for (int e = 0; e < m.num_leaves(); ++e) {
        const GeomQuad q = m.leaf_geometry(e);
        for (int cnr = 0; cnr < 4; ++cnr)
          if (std::hypot(q.corner[cnr].x, q.corner[cnr].y) < cfg.initial_refine_radius)
            marks.insert(e);
      }
      m = m.refine(marks).mesh;
    }
    space = Space::build(m, cfg.order);
  } else {
    space = base_space;
  }

  StepperConfig scfg;
  scfg.mode = mode;
  scfg.re = cfg.re;
  scfg.cfl_target = cfg.cfl;
  scfg.dt_max = cfg.dt_max;
  scfg.velocity_tol = cfg.velocity_tol;
  scfg.pressure_tol = cfg.pressure_tol;
  auto solver = std::make_unique<FlowSolver>(space, scfg);
  Field base = space.get() == base_space.get()
                   ? base_src
                   : constrain_continuity(interpolate_to_mesh(base_src, space));
  solver->set_base_flow(base);

  FlowState st = solver->make_state();
  {
    auto noise = noise_vector(2 * solver->ndof(), cfg.seed);
    for (int g = 0; g < solver->ndof(); ++g) {
      st.u[g] = cfg.noise_amplitude * noise[g] * solver->mask()[g];
      st.v[g] = cfg.noise_amplitude * noise[solver->ndof() + g] * solver->mask()[g];
    }
    solver->make_divergence_free(st.u, st.v);
  }
  ProbeSet probes{cfg.probes, {}};
  probes.bind(*space);

  st.dt = solver->adapt_dt(st);
  int round = 0;
  AveragedIndicator avg(space->mesh.num_leaves(), 0.0, 1e300);
  double window_start = cfg.transient;
  double next_sample = 0.0;
  double prev_freq = 0.0, prev_sei = 0.0;
  double freq = 0.0;
  bool frozen = cfg.linear_rounds == 0;
  std::vector<std::pair<double, double>> probe_trace;  // (t, v at probe 0)

  auto estimate_frequency = [&](double t_begin) {
    int crossings = 0;
    double t_first = 0.0, t_last = 0.0;
    for (size_t i = 1; i < probe_trace.size(); ++i) {
      if (probe_trace[i - 1].first < t_begin) continue;
      if ((probe_trace[i - 1].second < 0.0) != (probe_trace[i].second < 0.0)) {
        if (crossings == 0) t_first = probe_trace[i].first;
        t_last = probe_trace[i].first;
        ++crossings;
      }
    }
    if (crossings < 2 || t_last <= t_first) return 0.0;
    return M_PI * (crossings - 1) / (t_last - t_first);  // angular frequency
  };

  while (true) {
    try {
      solver->step(st);
    } catch (const NumericalBlowup&) {
      throw NumericalBlowup(
          "linear run diverged at t = " + detail::fmt(st.time) +
          "; consider a shorter refine.transient or a finer starting mesh "
          "(coarse-mesh noise can trigger spurious transition)");
    }
    if (st.time >= next_sample) {
      next_sample = st.time + cfg.sample_every;
      Field vel = solver->velocity_field(st);
      for (size_t pidx = 0; pidx < probes.locations.size(); ++pidx) {
        const double up = space->eval_component(vel.data[0], probes.locations[pidx]);
        const double vp = space->eval_component(vel.data[1], probes.locations[pidx]);
        probes_csv.row({st.time, probes.points[pidx].x, probes.points[pidx].y, up, vp});
        if (pidx == 0) probe_trace.push_back({st.time, vp});
      }
      energy_csv.row({st.time, FlowSolver::perturbation_energy(vel)});

      if (!frozen && st.time >= window_start) {
        const double amp = max_amplitude(vel, {0, 1});
        auto recs = sei_field(vel, {0, 1});
        if (amp > 0.0)
          for (auto& r : recs) {
            r.eps /= amp;
            r.c /= amp;
          }
        accumulate(avg, recs, st.time);
      }
    }

    if (!frozen && st.time >= window_start + cfg.sei_window() && avg.samples >= 2) {
      for (int e = 0; e < space->mesh.num_leaves(); ++e)
        sei_csv.row({static_cast<double>(round), static_cast<double>(e),
                     static_cast<double>(space->mesh.leaves[e].level), avg.mean[e],
                     static_cast<double>(avg.degenerate[e])});
      double max_sei = 0.0;
      for (double m : avg.mean) max_sei = std::max(max_sei, m);
      freq = estimate_frequency(window_start);

      const bool freq_settled =
          prev_freq > 0.0 && freq > 0.0 &&
          std::abs(freq - prev_freq) / prev_freq < cfg.stop_rel_change;
      const bool sei_settled =
          prev_sei > 0.0 && std::abs(max_sei - prev_sei) / prev_sei < cfg.stop_rel_change;
      prev_freq = freq;
      prev_sei = max_sei;
      if ((freq_settled && sei_settled) || round >= cfg.linear_rounds ||
          st.time > cfg.linear_time_cap) {
        frozen = true;
        detail::log_line(log, "linear " + tag + ": mesh frozen (Mesh B) at " +
                                  std::to_string(space->mesh.num_leaves()) +
                                  " elements after round " + std::to_string(round));
        break;
      }

      const auto marks = mark_top_fraction(avg, cfg.budget_fraction);
      const int old_count = space->mesh.num_leaves();
      auto mut = space->mesh.refine(marks);
      auto fine = Space::build(mut.mesh, cfg.order);
      Field vel = constrain_continuity(
          transfer_field(solver->velocity_field(st), mut.corr, fine));
      // the frozen base flow follows the mesh by interpolation, never recomputed
      Field base_fine = constrain_continuity(transfer_field(base, mut.corr, fine));

      space = fine;
      solver = std::make_unique<FlowSolver>(space, scfg);
      base = std::move(base_fine);
      solver->set_base_flow(base);
      const double t_now = st.time;
      st = solver->make_state();
      solver->set_velocity(st, vel);
      st.time = t_now;
      st.dt = solver->adapt_dt(st);
      probes.bind(*space);

      round += 1;
      detail::log_line(log, "linear " + tag + ": round " + std::to_string(round) + " refined " +
                                std::to_string(static_cast<int>(marks.size())) + " leaves, " +
                                std::to_string(old_count) + " -> " +
                                std::to_string(space->mesh.num_leaves()) + " elements (closure +" +
                                std::to_string(space->mesh.num_leaves() - old_count -
                                               3 * static_cast<int>(marks.size())) +
                                ")");
      avg = AveragedIndicator(space->mesh.num_leaves(), 0.0, 1e300);
      window_start = st.time;
    }
  }

  LinearRunResult out;
  out.space = space;
  out.base = base;
  out.perturbation = solver->velocity_field(st);
  out.rounds_done = round;
  out.probe_frequency = freq;
  Checkpoint ck = make_checkpoint(cfg, *space, st);
  ck.arrays["base.u"] = base.data[0];
  ck.arrays["base.v"] = base.data[1];
  ck.meta["mode.adjoint"] = mode == StepMode::Adjoint ? 1.0 : 0.0;
  out.checkpoint_path = cfg.outdir + "/linear_" + tag + ".ck";
  write_checkpoint(out.checkpoint_path, ck);
  return out;
}

struct SpectrumRunResult {
  std::vector<RitzPair> pairs;
  bool all_converged = false;
  int cycles = 0;
  std::string csv_path;
};

// Matrix-free spectrum of the linearized (or adjoint) operator on a frozen
// mesh with its frozen base flow.
inline SpectrumRunResult run_spectrum(const RunConfig& cfg, const Checkpoint& mesh_ck,
                                      StepMode mode, std::ostream* log = nullptr) {
  if (mode == StepMode::Nonlinear)
    throw std::invalid_argument("run_spectrum: mode must be Linearized or Adjoint");
  cfg.validate();
  std::filesystem::create_directories(cfg.outdir);
  auto space = Space::build(mesh_ck.mesh, mesh_ck.order);
  const bool has_base = mesh_ck.has_array("base.u");
  Field base = checkpoint_velocity_field(mesh_ck, space, has_base ? "base.u" : "field.u",
                                         has_base ? "base.v" : "field.v");

  StepperConfig scfg;
  scfg.mode = mode;
  scfg.re = cfg.re;
  scfg.cfl_target = cfg.cfl;
  scfg.dt_max = cfg.dt_max;
  scfg.velocity_tol = cfg.velocity_tol;
  scfg.pressure_tol = cfg.pressure_tol;
  FlowSolver solver(space, scfg);
  solver.set_base_flow(base);

  FlowState probe = solver.make_state();
  probe.dt = solver.adapt_dt(probe);
  const int n_steps = static_cast<int>(std::ceil(cfg.eig_ts / probe.dt));
  const int n = solver.ndof();
  detail::log_line(log, "spectrum " + std::string(mode == StepMode::Adjoint ? "adjoint" : "direct") +
                            ": " + std::to_string(space->mesh.num_leaves()) + " elements, " +
                            std::to_string(n_steps) + " steps per application");

  long applications = 0;
  OpApply apply = [&](const std::vector<double>& x, std::vector<double>& y) {
    std::vector<double> u(x.begin(), x.begin() + n), v(x.begin() + n, x.end());
    solver.propagate(u, v, cfg.eig_ts, n_steps);
    y.resize(2 * n);
    std::copy(u.begin(), u.end(), y.begin());
    std::copy(v.begin(), v.end(), y.begin() + n);
    applications += 1;
    if (log && applications % 25 == 0)
      detail::log_line(log, "spectrum: " + std::to_string(applications) + " applications");
  };
  InnerProduct ip = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (int g = 0; g < n; ++g)
      s += space->dof_mass[g] * (a[g] * b[g] + a[n + g] * b[n + g]);
    return s;
  };

  std::vector<double> v0(2 * n);
  {
    auto noise = noise_vector(2 * n, cfg.seed);
    std::vector<double> u(noise.begin(), noise.begin() + n), v(noise.begin() + n, noise.end());
    for (int g = 0; g < n; ++g) {
      u[g] *= solver.mask()[g];
      v[g] *= solver.mask()[g];
    }
    solver.make_divergence_free(u, v);
    std::copy(u.begin(), u.end(), v0.begin());
    std::copy(v.begin(), v.end(), v0.begin() + n);
  }

  SpectrumConfig ecfg;
  ecfg.m = cfg.eig_m;
  ecfg.nev = cfg.eig_nev;
  ecfg.tol = cfg.eig_tol;
  ecfg.t_sample = cfg.eig_ts;
  ecfg.max_cycles = cfg.eig_cycles;
  SpectrumResult res = solve_spectrum(apply, std::move(v0), ecfg, ip);

  SpectrumRunResult out;
  out.pairs = res.pairs;
  out.all_converged = res.all_converged;
  out.cycles = res.cycles;
  const std::string tag = mode == StepMode::Adjoint ? "adjoint" : "direct";
  out.csv_path = cfg.outdir + "/spectrum_" + tag + ".csv";
  CsvWriter csv(out.csv_path, "index,sigma,omega,residual,converged_flag");
  for (size_t i = 0; i < res.pairs.size(); ++i)
    csv.row({static_cast<double>(i), res.pairs[i].sigma, res.pairs[i].omega,
             res.pairs[i].residual, res.pairs[i].converged ? 1.0 : 0.0});
  // leading eigenvector fields in checkpoint format
  const int keep = std::min<int>(6, static_cast<int>(res.pairs.size()));
  for (int i = 0; i < keep; ++i) {
    Checkpoint eck;
    eck.order = cfg.order;
    eck.config_hash = config_hash(cfg);
    eck.mesh = space->mesh;
    eck.meta["sigma"] = res.pairs[i].sigma;
    eck.meta["omega"] = res.pairs[i].omega;
    eck.meta["residual"] = res.pairs[i].residual;
    std::vector<double> lu, lv;
    std::vector<double> comp(res.vec_re[i].begin(), res.vec_re[i].begin() + n);
    space->scatter(comp, lu);
    comp.assign(res.vec_re[i].begin() + n, res.vec_re[i].end());
    space->scatter(comp, lv);
    eck.arrays["field.u"] = lu;
    eck.arrays["field.v"] = lv;
    comp.assign(res.vec_im[i].begin(), res.vec_im[i].begin() + n);
    space->scatter(comp, lu);
    comp.assign(res.vec_im[i].begin() + n, res.vec_im[i].end());
    space->scatter(comp, lv);
    eck.arrays["field.u_im"] = lu;
    eck.arrays["field.v_im"] = lv;
    write_checkpoint(cfg.outdir + "/eigvec_" + tag + "_" + std::to_string(i) + ".ck", eck);
  }
  if (log) {
    for (size_t i = 0; i < std::min<size_t>(res.pairs.size(), 6); ++i)
      detail::log_line(log, "  pair " + std::to_string(i) + ": sigma = " +
                                detail::fmt(res.pairs[i].sigma, 9) + ", omega = " +
                                detail::fmt(res.pairs[i].omega, 9) + ", residual = " +
                                detail::fmt(res.pairs[i].residual, 3));
  }
  return out;
}

// ---- export -------------------------------------------------------------------

// Legacy VTK (ASCII, unstructured grid of GLL sub-quads) of the nodal arrays
// in a checkpoint.
inline void export_vtk(const Checkpoint& ck, const std::string& path) {
  auto space = Space::build(ck.mesh, ck.order);
  const int np = space->npe;
  const int n1 = space->np;
  const int nel = space->mesh.num_leaves();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_vtk: cannot open '" + path + "'");
  out << "# vtk DataFile Version 3.0\nspectral element fields\nASCII\n";
  out << "DATASET UNSTRUCTURED_GRID\n";
  out << "POINTS " << nel * np << " double\n";
  char buf[128];
  for (int e = 0; e < nel; ++e)
    for (int q = 0; q < np; ++q) {
      snprintf(buf, sizeof(buf), "%.10g %.10g 0\n", space->geom[e].x[q], space->geom[e].y[q]);
      out << buf;
    }
  const int quads_per_el = (n1 - 1) * (n1 - 1);
  out << "CELLS " << nel * quads_per_el << " " << nel * quads_per_el * 5 << "\n";
  for (int e = 0; e < nel; ++e)
    for (int j = 0; j + 1 < n1; ++j)
      for (int i = 0; i + 1 < n1; ++i) {
        const int base = e * np;
        out << "4 " << base + j * n1 + i << " " << base + j * n1 + i + 1 << " "
            << base + (j + 1) * n1 + i + 1 << " " << base + (j + 1) * n1 + i << "\n";
      }
  out << "CELL_TYPES " << nel * quads_per_el << "\n";
  for (int c = 0; c < nel * quads_per_el; ++c) out << "9\n";
  out << "POINT_DATA " << nel * np << "\n";
  for (const auto& [name, data] : ck.arrays) {
    if (data.size() != static_cast<size_t>(nel) * np) continue;  // only nodal arrays
    std::string safe = name;
    for (auto& c : safe)
      if (!isalnum(static_cast<unsigned char>(c))) c = '_';
    out << "SCALARS " << safe << " double 1\nLOOKUP_TABLE default\n";
    for (double v : data) {
      snprintf(buf, sizeof(buf), "%.10g\n", v);
      out << buf;
    }
  }
  if (!out) throw std::runtime_error("export_vtk: write to '" + path + "' failed");
}

// sample a checkpoint's velocity at probe locations into a CSV
inline void probe_series(const std::vector<std::string>& checkpoint_paths,
                         const std::vector<Point2>& locations, const std::string& csv_path) {
  CsvWriter csv(csv_path, "t,x,y,u,v");
  for (const auto& path : checkpoint_paths) {
    Checkpoint ck = read_checkpoint(path);
    auto space = Space::build(ck.mesh, ck.order);
    Field f = checkpoint_velocity_field(ck, space);
    for (const auto& p : locations) {
      auto vals = evaluate_at(f, p);
      csv.row({ck.meta_or("time", 0.0), p.x, p.y, vals[0], vals[1]});
    }
  }
}

inline std::string mesh_info(const Checkpoint& ck) {
  auto space = Space::build(ck.mesh, ck.order);
  std::map<int, int> by_level;
  for (const auto& l : ck.mesh.leaves) by_level[l.level] += 1;
  std::ostringstream os;
  os << "macro elements: " << ck.mesh.macros.size() << "\n";
  os << "leaf elements:  " << ck.mesh.num_leaves() << "\n";
  for (const auto& [lvl, cnt] : by_level) os << "  level " << lvl << ": " << cnt << "\n";
  os << "polynomial order: " << ck.order << "\n";
  os << "velocity dofs (per component): " << space->num_dofs << "\n";
  auto topo = space->topo;
  os << "faces: " << topo.conforming.size() << " conforming, " << topo.hanging.size()
     << " hanging, " << topo.boundary.size() << " boundary\n";
  os << "domain area: " << space->domain_area << "\n";
  os << "time: " << ck.meta_or("time", 0.0) << "\n";
  return os.str();
}

}  // namespace sstab

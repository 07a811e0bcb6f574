// Command-line driver for the cylinder stability workbench: base flow
// extraction, linear direct/adjoint runs, spectrum calculation and exports.

#include <CLI11.hpp>
#include <iostream>

#include "sstab/workbench.hpp"

using namespace sstab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitBudget = 4;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
};

RunConfig make_config(const CommonOpts& o) {
  std::vector<std::string> ov;
  for (const auto& s : o.overrides) ov.push_back(s);
  return load_config(o.config_path, ov);
}

StepMode parse_mode(const std::string& m) {
  if (m == "direct") return StepMode::Linearized;
  if (m == "adjoint") return StepMode::Adjoint;
  throw ConfigError("mode must be 'direct' or 'adjoint', got '" + m + "'");
}

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("-c,--config", o.config_path, "configuration file (key = value)");
  cmd->add_option("--set", o.overrides, "override a config key, e.g. --set case.re=48");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spectral-element global stability workbench"};
  app.require_subcommand(1);

  CommonOpts base_o, lin_o, spec_o;
  std::string lin_mode = "direct", spec_mode = "direct";
  std::string lin_baseflow, spec_input;
  std::string vtk_in, vtk_out;
  std::string probes_out = "probes.csv";
  std::vector<std::string> probes_in;
  std::vector<double> probe_xy;
  std::string info_in;

  auto* cmd_base = app.add_subcommand("baseflow", "extract the steady base flow via SFD");
  add_common(cmd_base, base_o);

  auto* cmd_lin = app.add_subcommand("linear", "march the linearized or adjoint perturbation");
  add_common(cmd_lin, lin_o);
  cmd_lin->add_option("--mode", lin_mode, "direct | adjoint")->capture_default_str();
  cmd_lin->add_option("--baseflow", lin_baseflow, "base flow checkpoint")->required();

  auto* cmd_spec = app.add_subcommand("spectrum", "matrix-free eigenvalue spectrum");
  add_common(cmd_spec, spec_o);
  cmd_spec->add_option("--mode", spec_mode, "direct | adjoint")->capture_default_str();
  cmd_spec->add_option("--input", spec_input, "checkpoint with the frozen mesh and base flow")
      ->required();

  auto* cmd_vtk = app.add_subcommand("export-vtk", "write a checkpoint as legacy VTK");
  cmd_vtk->add_option("input", vtk_in, "checkpoint file")->required();
  cmd_vtk->add_option("output", vtk_out, "output .vtk path")->required();

  auto* cmd_probes = app.add_subcommand("probes", "sample checkpoints at probe locations");
  cmd_probes->add_option("inputs", probes_in, "checkpoint files")->required();
  cmd_probes->add_option("-o,--output", probes_out, "output CSV")->capture_default_str();
  cmd_probes->add_option("--at", probe_xy, "probe coordinates x y (repeatable pairs)");

  auto* cmd_info = app.add_subcommand("mesh-info", "print mesh statistics of a checkpoint");
  cmd_info->add_option("input", info_in, "checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_base->parsed()) {
      RunConfig cfg = make_config(base_o);
      run_baseflow(cfg, &std::cout);
    } else if (cmd_lin->parsed()) {
      RunConfig cfg = make_config(lin_o);
      const StepMode mode = parse_mode(lin_mode);
      Checkpoint ck = read_checkpoint(lin_baseflow);
      run_linear(cfg, ck, mode, &std::cout);
    } else if (cmd_spec->parsed()) {
      RunConfig cfg = make_config(spec_o);
      const StepMode mode = parse_mode(spec_mode);
      Checkpoint ck = read_checkpoint(spec_input);
      auto res = run_spectrum(cfg, ck, mode, &std::cout);
      if (!res.all_converged)
        std::cout << "warning: not all wanted pairs reached the residual tolerance\n";
    } else if (cmd_vtk->parsed()) {
      export_vtk(read_checkpoint(vtk_in), vtk_out);
      std::cout << "wrote " << vtk_out << "\n";
    } else if (cmd_probes->parsed()) {
      std::vector<Point2> pts;
      if (probe_xy.size() % 2 != 0)
        throw ConfigError("--at expects pairs of coordinates");
      for (size_t i = 0; i + 1 < probe_xy.size(); i += 2)
        pts.push_back({probe_xy[i], probe_xy[i + 1]});
      if (pts.empty()) pts.push_back({6.0, 1.0});
      probe_series(probes_in, pts, probes_out);
      std::cout << "wrote " << probes_out << "\n";
    } else if (cmd_info->parsed()) {
      std::cout << mesh_info(read_checkpoint(info_in));
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BudgetExceeded& e) {
    std::cerr << "element budget exceeded: " << e.what() << "\n";
    return kExitBudget;
  } catch (const ExtrapolationError& e) {
    std::cerr << "point location error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalBlowup& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const SolverDiverged& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const StagnationError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

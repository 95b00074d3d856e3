#pragma once

#include "mcpflow/grid.hpp"
#include "mcpflow/mcp.hpp"
#include "mcpflow/newton.hpp"

#include <memory>
#include <string>
#include <vector>

namespace mcpflow {

struct RegulationConfig {
  bool gen_voltage_control = false;
  std::vector<int> tap_devices;    // internal branch indices under control
  std::vector<int> shunt_devices;  // indices into GridCase::shunts
  bool frequency_control = false;
  double droop_default_scale = 20.0;  // nu = scale * p_max for unset gains
};

// Ordered variable blocks; the complementarity row at index i is the function
// paired with variable i.
struct VariableLayout {
  int n = 0;
  std::vector<int> delta;  // per bus, -1 where fixed (slack)
  std::vector<int> v;      // per bus, -1 where fixed (PV without control, slack)
  std::vector<int> q_g;    // per generator, -1 unless voltage-controlled PV gen
  std::vector<int> p_g;    // per generator, -1 unless frequency-controlled
  struct Device {
    int u = -1, up = -1, um = -1, sp = -1, sm = -1;  // variable indices
    int branch = -1;  // >= 0 for tap devices
    int shunt = -1;   // >= 0 for shunt devices
    int reg_bus = 0;
    double lo = 0, hi = 0, set_point = 0;
    double orientation = 1;  // sign of the regulated bus's sensitivity
  };
  std::vector<Device> devices;
  int delta_f = -1;
  std::vector<std::string> names;
};

struct Formulation {
  std::shared_ptr<const GridCase> grid;
  RegulationConfig config;
  MCPProblem problem;
  VariableLayout layout;
};

// Stacks the active control stages into one square MCP:
//   (a) angles/PQ magnitudes against P/Q balances,
//   (b) PV magnitudes free + boxed q_g against voltage set-point rows,
//   (c) per-device drift systems for taps and switched shunts,
//   (d) free frequency deviation against the slack P balance + boxed p_g
//       against droop rows p_g - p_sp + nu * delta_f.
// Devices whose regulated-bus sensitivity is negative at the initial point get
// their raise/lower roles mirrored so drift always pushes toward feasibility.
Formulation assemble(const GridCase& grid, const RegulationConfig& config);

// Flat start (v=1 everywhere, angles and deviations zero, devices at set
// points) or values copied from a prior state with new blocks at set points.
Eigen::VectorXd initial_point(const Formulation& f, const GridState* warm = nullptr);

// Expands x to a full grid state; generator outputs not present in the layout
// are completed from the residual balance at their bus (equal split among the
// bus's generators) so reports always carry physical values.
GridState state_from_x(const Formulation& f, const Eigen::VectorXd& x);

struct RegulationReport {
  double max_v_dev = 0;  // over buses carrying in-service generators
  double delta_f = 0;
  double frequency_hz = 60;
  int devices_at_bounds = 0;
  int violation_count = 0;
  double max_violation = 0;
  std::vector<std::string> violations;
};
RegulationReport regulation_summary(const Formulation& f, const Eigen::VectorXd& x,
                                    double tol = 1e-7);

// Fills droop gains that are unset (zero): nu = scale * p_max, falling back to
// scale * max(|p_sp|, 1) when p_max is not a usable basis.
void apply_default_droop(GridCase& grid, double scale);

// Variables that must stay away from zero during line searches: voltage
// magnitudes and tap ratios (taps divide admittance entries).
std::vector<int> magnitude_indices(const Formulation& f);

// Assemble + initial point + Josephy-Newton solve; regulation summary is
// filled into the report. out_state receives the completed grid state.
SolveReport solve_grid(const GridCase& grid, const RegulationConfig& config,
                       const SolverOptions& opts, const GridState* warm = nullptr,
                       GridState* out_state = nullptr);

}  // namespace mcpflow

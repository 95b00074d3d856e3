#pragma once

#include "mcpflow/grid.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mcpflow {

struct ParseResult {
  GridCase grid;
  std::vector<std::string> notes;     // ignored blocks, type demotions
  std::vector<std::string> warnings;  // conflicting data resolved by convention
};

// MATPOWER v2 case text -> GridCase. MW/MVAr columns are converted to per-unit
// on baseMVA, angles to radians, tap 0 to 1.0; out-of-service elements are
// dropped here so the solver sees fixed sparsity.
ParseResult parse_case(const std::string& text);
ParseResult load_case(const std::string& path);

// Regulation sidecar: JSON declaring what the MATPOWER format cannot express.
// All sections optional:
//   {
//     "version": 1,
//     "taps":   [{"branch": <1-based branch row>, "min": <pu>, "max": <pu>,
//                 "regulated_bus": <external bus id, optional>}],
//     "shunts": [{"bus": <external id>, "min": <pu>, "max": <pu>, "sp": <pu, optional>}],
//     "droop":  [{"gen": <1-based gen row>, "nu": <pu/pu>}],
//     "droop_default_scale": <nu = scale * p_max for gens without an entry>
//   }
// Shunt entries replace any device already present at the bus; when no device
// exists one is created seeded from the bus's fixed susceptance.
struct SidecarEffects {
  int taps = 0, shunts = 0, droops = 0;
  std::optional<double> droop_default_scale;
};
SidecarEffects apply_sidecar(GridCase& grid, const std::string& json_text);
SidecarEffects load_sidecar(GridCase& grid, const std::string& path);

enum class SolutionFormat { json, csv };

struct SolutionMeta {
  std::string solver = "mcp";
  std::string status = "converged";
  int iterations = 0;
  double residual_inf = 0;
  double wall_time_sec = 0;  // metadata only; excluded from determinism checks
  std::optional<double> q_order;
  double max_v_dev = 0;
  double delta_f = 0;  // p.u. on 60 Hz
  int devices_at_bounds = 0;
  std::vector<std::string> violations;
};

// Deterministic fixed-field-order artifact; per-unit and physical units both
// emitted. CSV rows share one header:
//   type,id,bus,v_pu,angle_deg,p_mw,q_mvar,value
std::string write_solution(const GridCase& grid, const GridState& state,
                           const SolutionMeta& meta, SolutionFormat format);

// Reads a JSON artifact back into a state for warm starts. Quantities are
// matched by external id; ids absent on either side are skipped, so a
// solution from a slightly different case (e.g. pre-outage) still applies.
GridState read_solution_state(const GridCase& grid, const std::string& json_text);

std::string frequency_hz_label(double delta_f_pu);  // e.g. "59.92 Hz"

}  // namespace mcpflow

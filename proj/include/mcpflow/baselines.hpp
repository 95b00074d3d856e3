#pragma once

#include "mcpflow/grid.hpp"
#include "mcpflow/newton.hpp"

#include <ostream>
#include <vector>

namespace mcpflow {

struct NrOptions {
  double tol = 1e-8;
  int max_inner_iter = 30;
  int reversal_cap = 3;  // per-bus PQ->PV flips before the run is declared oscillating
  int max_rounds = 0;    // 0: 2 * |PV| + 8
  const GridState* start = nullptr;  // v/delta seed; flat when absent
  std::ostream* log = nullptr;
};

enum class BusMode { pv, pq_at_qmin, pq_at_qmax };

struct NrReport {
  SolveStatus status = SolveStatus::iteration_limit;
  int inner_iterations = 0;  // Newton steps summed over all rounds
  int rounds = 0;
  int switches = 0;
  double residual_inf = std::numeric_limits<double>::infinity();
  double max_v_dev = 0;  // over generator buses
  double wall_time_sec = 0;
  GridState state;
  std::vector<BusMode> modes;  // per bus

  bool converged() const { return status == SolveStatus::converged; }
};

// Classic outer-loop heuristic: hold PV voltages at set points, solve the
// polar power flow, move buses whose reactive needs violate their generators'
// limits to PQ at the violated limit, repeat. Buses flip back when the solved
// voltage crosses the set point again, up to the reversal cap.
NrReport nr_pv_pq(const GridCase& grid, const NrOptions& opts = {});

// Same inner Newton with reactive limits ignored (the always-PV square
// system).
NrReport plain_nr(const GridCase& grid, const NrOptions& opts = {});

// Componentwise Fischer-Burmeister recast phi(a,b) = sqrt(a^2+b^2) - a - b:
// free rows keep F, lower-bounded rows become phi(x-l, F), upper-bounded rows
// phi(u-x, -F), boxed rows the composition phi(x-l, phi(u-x, -F)).
Eigen::VectorXd fb_residual(const MCPProblem& problem, const Eigen::VectorXd& x);

// Semismooth Newton on the FB system with Armijo damping; at the (0,0) kink
// the generalized-Jacobian element 1/sqrt(2) - 1 is used for both partials.
SolveReport fb_solve(const MCPProblem& problem, const Eigen::VectorXd& x0,
                     const SolverOptions& opts = {});

}  // namespace mcpflow

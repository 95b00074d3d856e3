#pragma once

#include "mcpflow/blcp.hpp"
#include "mcpflow/mcp.hpp"

#include <limits>
#include <optional>
#include <ostream>
#include <vector>

namespace mcpflow {

struct SolverOptions {
  double tol = 1e-8;  // infinity norm of the natural residual
  int max_iter = 50;
  bool damping = true;  // Armijo backtracking on the squared-residual merit
  double armijo_sigma = 1e-4;
  double step_floor = 1e-6;
  int nonmonotone_window = 5;
  // Components listed here (voltage magnitudes) are kept >= magnitude_floor by
  // shrinking the step, which avoids sign-flip artifacts in the trig terms.
  std::vector<int> magnitude_indices;
  double magnitude_floor = 0.1;
  // Proximal retry schedule for failed subproblems: level_0 * growth^j.
  int perturb_retries = 4;
  double perturb_level0 = 1e-8;
  double perturb_growth = 100.0;
  BlcpOptions subproblem;
  std::ostream* log = nullptr;
};

enum class SolveStatus { converged, diverged, iteration_limit, subproblem_failure };
const char* to_string(SolveStatus s);

struct IterationRecord {
  int iter = 0;
  double residual_inf = 0;
  double merit = 0;
  double step = 1.0;
  int pivots = 0;
  BlcpStatus subproblem_status = BlcpStatus::solved;
  double perturbation = 0;
  double direction_norm = 0;
};

// Filled by callers that know the variable layout (see formulation); the
// solver itself only reports the generic fields.
struct RegulationSummary {
  double max_voltage_deviation = 0;  // max |v - v_sp| over regulated buses
  double frequency_deviation = 0;    // p.u.
  int binding_bounds = 0;
  double max_bound_violation = 0;
};

struct SolveReport {
  SolveStatus status = SolveStatus::iteration_limit;
  Eigen::VectorXd x;
  double residual_inf = std::numeric_limits<double>::infinity();
  int iterations = 0;
  std::vector<double> residual_history;  // length iterations + 1
  std::vector<IterationRecord> trace;
  std::optional<double> q_order_estimate;
  double wall_time_sec = 0;
  RegulationSummary regulation;

  bool converged() const { return status == SolveStatus::converged; }
};

SolveReport solve_mcp(const MCPProblem& problem, const Eigen::VectorXd& x0,
                      const SolverOptions& opts = {});

// Least-squares slope of log r_{k+1} against log r_k over the longest strictly
// decreasing positive tail; nullopt when fewer than 4 such residuals exist.
std::optional<double> estimate_q_order(const std::vector<double>& residual_history);

// The linearized subproblem at x, with level * I added to the matrix.
BoxedLCP linearized_subproblem(const MCPProblem& problem, const Eigen::VectorXd& x,
                               double level = 0.0);

}  // namespace mcpflow

#pragma once

// Boxed linear complementarity problems  l <= x <= u  perp  M x + q.
// These arise as the Josephy-Newton subproblem, where M is the Jacobian of
// the nonlinear residual at the current iterate.

#include "mcpflow/mcp.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

namespace mcpflow {

struct BoxedLCP {
  SparseMat M;
  Eigen::VectorXd q;
  Bounds bounds;

  int dim() const { return static_cast<int>(q.size()); }
  void validate() const;
};

enum class BasisState : std::uint8_t { at_lower, at_upper, basic };

struct PivotState {
  std::vector<BasisState> assignment;
  int pivots = 0;          // pivot events (a block switch counts once)
  int index_flips = 0;     // individual assignment changes
  int factorizations = 0;
};

enum class BlcpStatus { solved, ray_termination, pivot_limit, singular_basis };

const char* to_string(BlcpStatus s);

struct BlcpOptions {
  double tol = 1e-10;        // infinity-norm natural residual at exit
  int max_pivots = 2000;     // pivot events
  std::ostream* log = nullptr;  // line-oriented pivot trace when set
};

struct BlcpResult {
  Eigen::VectorXd x;
  PivotState state;
  BlcpStatus status = BlcpStatus::pivot_limit;
  double residual_inf = 0.0;
};

// Block principal pivoting on the bound/basic assignment with least-index
// tie-breaking, falling back to a parametric covering-vector (Lemke-style)
// path on cycling. `start` warm-starts the assignment; an optimal warm start
// terminates in zero pivots.
BlcpResult solve_blcp(const BoxedLCP& lcp,
                      const std::vector<BasisState>* start = nullptr,
                      const BlcpOptions& opts = {});

// Enumerates all activity patterns (at_lower / at_upper / basic per index),
// solves each basic subsystem densely and keeps the patterns that satisfy the
// complementarity conditions. Test oracle; requires dim <= 12.
std::vector<Eigen::VectorXd> brute_force_blcp(const BoxedLCP& lcp, double tol = 1e-9);

}  // namespace mcpflow

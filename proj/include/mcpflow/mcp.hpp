#pragma once

// Mixed complementarity problems over a box [l, u]:
// x solves MCP(B, F) when componentwise one of
//   x_i = l_i and F_i(x) >= 0,
//   l_i <= x_i <= u_i and F_i(x) = 0,
//   x_i = u_i and F_i(x) <= 0.
// The computable test is the natural residual r(x) = x - mid(l, u, x - F(x)),
// which vanishes exactly at solutions. Equivalently 0 in F(x) + N_B(x) with
// N_B the normal cone to the box; that form is kept as documentation only.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <functional>
#include <string>
#include <vector>

namespace mcpflow {

using SparseMat = Eigen::SparseMatrix<double>;

struct Bounds {
  Eigen::VectorXd lower;  // -inf allowed
  Eigen::VectorXd upper;  // +inf allowed

  int size() const { return static_cast<int>(lower.size()); }
  bool is_free(int i) const;
  // Throws std::invalid_argument on mismatched sizes or lower > upper.
  void validate() const;

  static Bounds free(int n);
};

struct MCPProblem {
  Bounds bounds;
  // Evaluates F(x) into f (resized by callee). Must be re-entrant.
  std::function<void(const Eigen::VectorXd& x, Eigen::VectorXd& f)> residual;
  // Evaluates the sparse Jacobian of F at x. The sparsity pattern must be
  // identical across calls.
  std::function<void(const Eigen::VectorXd& x, SparseMat& jac)> jacobian;
  std::vector<std::string> names;  // per-variable, for diagnostics; may be empty

  int dim() const { return bounds.size(); }
};

// r(x) = x - mid(l, u, x - F(x)). Throws on dimension mismatch or a
// non-finite F evaluation.
Eigen::VectorXd natural_residual(const MCPProblem& problem, const Eigen::VectorXd& x);
Eigen::VectorXd natural_residual(const Bounds& bounds, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& f);

// True iff ||r(x)||_inf <= tol and l - tol <= x <= u + tol.
bool is_solution(const MCPProblem& problem, const Eigen::VectorXd& x, double tol);

// Index sets of Robinson's strong-regularity test at a solution x*:
//   alpha: strictly interior with F_i = 0
//   beta:  at a bound with F_i = 0 (degenerate actives)
//   gamma: at a bound with F_i != 0
struct IndexPartition {
  std::vector<int> alpha, beta, gamma;
};

inline constexpr double kDefaultActivityTol = 1e-7;

// Requires is_solution(problem, x, activity_tol); throws otherwise, since the
// partition is meaningless away from a solution.
IndexPartition classify_indices(const MCPProblem& problem, const Eigen::VectorXd& x,
                                double activity_tol = kDefaultActivityTol);

enum class Regularity { regular, not_regular, inconclusive };

struct RegularityReport {
  Regularity verdict = Regularity::inconclusive;
  double alpha_cond_estimate = 0.0;  // 1-norm condition estimate of J_aa
  int beta_size = 0;
  long minors_checked = 0;
  double min_minor = 0.0;  // smallest principal minor of the Schur complement seen
  std::string detail;
};

// Certifies strong regularity at a solution: J_aa numerically nonsingular
// (condition estimate below 1e12) and the Schur complement
// J_bb - J_ba J_aa^{-1} J_ab a P-matrix. The P-matrix test enumerates all
// principal minors for |beta| <= 20 and falls back to sampled minors
// (inconclusive unless a negative minor disproves) beyond that.
RegularityReport strong_regularity_certificate(const MCPProblem& problem,
                                               const Eigen::VectorXd& x,
                                               const IndexPartition& partition);

// True when every principal minor of the dense matrix is positive.
// Exact enumeration; intended for small matrices (the Schur complement).
bool is_p_matrix(const Eigen::MatrixXd& m, double* min_minor = nullptr,
                 long* minors_checked = nullptr);

// Hager-style 1-norm condition estimate ||A||_1 * est(||A^-1||_1) given
// solve callbacks for A and A^T. Returns +inf if a solve fails.
double condest_1norm(int n, double a_norm1,
                     const std::function<bool(Eigen::VectorXd&)>& solve,
                     const std::function<bool(Eigen::VectorXd&)>& solve_transpose);

}  // namespace mcpflow

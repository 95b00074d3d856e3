#include "mcpflow/newton.hpp"

#include "mcpflow/kernels.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace mcpflow {

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::diverged: return "diverged";
    case SolveStatus::iteration_limit: return "iteration_limit";
    case SolveStatus::subproblem_failure: return "subproblem_failure";
  }
  return "?";
}

BoxedLCP linearized_subproblem(const MCPProblem& problem, const Eigen::VectorXd& x,
                               double level) {
  BoxedLCP lcp;
  lcp.bounds = problem.bounds;
  problem.jacobian(x, lcp.M);
  Eigen::VectorXd f;
  problem.residual(x, f);
  lcp.q = f - lcp.M * x;
  if (level > 0) {
    SparseMat ident(lcp.M.rows(), lcp.M.cols());
    ident.setIdentity();
    lcp.M = lcp.M + level * ident;
    lcp.q -= level * x;  // keep F(x) + level*(y - x) as the linearized map at y=x
  }
  return lcp;
}

std::optional<double> estimate_q_order(const std::vector<double>& residual_history) {
  // Longest strictly decreasing, strictly positive suffix.
  std::vector<double> tail;
  for (auto it = residual_history.rbegin(); it != residual_history.rend(); ++it) {
    if (!(*it > 0) || !std::isfinite(*it)) break;
    if (!tail.empty() && *it <= tail.back()) break;
    tail.push_back(*it);
  }
  std::reverse(tail.begin(), tail.end());
  if (tail.size() < 4) return std::nullopt;
  // Slope of log r_{k+1} vs log r_k.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const int m = static_cast<int>(tail.size()) - 1;
  for (int k = 0; k < m; ++k) {
    const double a = std::log(tail[k]);
    const double b = std::log(tail[k + 1]);
    sx += a;
    sy += b;
    sxx += a * a;
    sxy += a * b;
  }
  const double denom = m * sxx - sx * sx;
  if (std::abs(denom) < 1e-30) return std::nullopt;
  return (m * sxy - sx * sy) / denom;
}

namespace {

double merit_of(const Eigen::VectorXd& r) { return r.squaredNorm(); }

Eigen::VectorXd project_box(const Bounds& b, Eigen::VectorXd x) {
  for (int i = 0; i < x.size(); ++i) {
    x[i] = std::min(b.upper[i], std::max(b.lower[i], x[i]));
  }
  return x;
}

}  // namespace

SolveReport solve_mcp(const MCPProblem& problem, const Eigen::VectorXd& x0,
                      const SolverOptions& opts) {
  if (opts.tol <= 0 || opts.max_iter < 1) {
    throw std::invalid_argument("solve_mcp: tol must be > 0 and max_iter >= 1");
  }
  if (x0.size() != problem.dim() || !x0.allFinite()) {
    throw std::invalid_argument("solve_mcp: bad initial point");
  }
  const auto t_start = std::chrono::steady_clock::now();
  const int n = problem.dim();
  const auto& ops = kernels::active();

  SolveReport rep;
  Eigen::VectorXd x = project_box(problem.bounds, x0);
  Eigen::VectorXd f(n), r(n);

  auto eval_residual = [&](const Eigen::VectorXd& at, Eigen::VectorXd& f_out,
                           Eigen::VectorXd& r_out) {
    problem.residual(at, f_out);
    ops.mid_residual(n, at.data(), f_out.data(), problem.bounds.lower.data(),
                     problem.bounds.upper.data(), r_out.data());
  };

  eval_residual(x, f, r);
  double rnorm = ops.inf_norm(n, r.data());
  double merit = merit_of(r);
  rep.residual_history.push_back(rnorm);
  std::vector<double> merit_window{merit};
  // Subproblem assignment, carried across outer iterations; the start
  // classifies x0 so interior variables enter the first basis directly.
  std::vector<BasisState> warm(n, BasisState::basic);
  for (int i = 0; i < n; ++i) {
    const double l = problem.bounds.lower[i], u = problem.bounds.upper[i];
    if (std::isfinite(l) && x[i] <= l) warm[i] = BasisState::at_lower;
    else if (std::isfinite(u) && x[i] >= u) warm[i] = BasisState::at_upper;
  }

  auto finish = [&](SolveStatus status) {
    rep.status = status;
    rep.x = x;
    rep.residual_inf = rnorm;
    rep.q_order_estimate = estimate_q_order(rep.residual_history);
    rep.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return rep;
  };

  for (int k = 0; k < opts.max_iter; ++k) {
    if (!std::isfinite(rnorm)) return finish(SolveStatus::diverged);
    if (rnorm <= opts.tol) return finish(SolveStatus::converged);

    IterationRecord rec;
    rec.iter = k;

    // Solve the linearized subproblem, escalating a proximal perturbation
    // when the plain one fails or yields no acceptable step.
    bool stepped = false;
    for (int attempt = 0; attempt <= opts.perturb_retries && !stepped; ++attempt) {
      const double level =
          attempt == 0 ? 0.0
                       : opts.perturb_level0 * std::pow(opts.perturb_growth, attempt - 1);
      BoxedLCP lcp = linearized_subproblem(problem, x, level);
      BlcpResult sub = solve_blcp(lcp, &warm, opts.subproblem);
      rec.pivots = sub.state.pivots;
      rec.subproblem_status = sub.status;
      rec.perturbation = level;
      if (sub.status != BlcpStatus::solved) {
        if (opts.log) {
          *opts.log << "iter " << k << ": subproblem " << to_string(sub.status)
                    << " at level " << level << '\n';
        }
        continue;
      }
      warm = sub.state.assignment;

      Eigen::VectorXd d = sub.x - x;
      // Keep magnitudes above the floor along the whole step.
      double t_max = 1.0;
      for (int idx : opts.magnitude_indices) {
        if (d[idx] < 0 && x[idx] + d[idx] < opts.magnitude_floor) {
          t_max = std::min(t_max, (x[idx] - opts.magnitude_floor) / -d[idx]);
        }
      }
      t_max = std::max(t_max, 0.0);

      const double merit_ref = *std::max_element(merit_window.begin(), merit_window.end());
      double t = t_max;
      Eigen::VectorXd x_trial(n), f_trial(n), r_trial(n);
      while (t >= opts.step_floor) {
        x_trial = project_box(problem.bounds, x + t * d);
        eval_residual(x_trial, f_trial, r_trial);
        const double m_trial = merit_of(r_trial);
        const bool accept = !opts.damping ||
                            (std::isfinite(m_trial) &&
                             m_trial <= merit_ref - opts.armijo_sigma * t * merit);
        if (accept) {
          x = x_trial;
          f = f_trial;
          r = r_trial;
          merit = m_trial;
          rnorm = ops.inf_norm(n, r.data());
          rec.step = t;
          stepped = true;
          break;
        }
        t *= 0.5;
      }
    }
    if (!stepped) return finish(SolveStatus::subproblem_failure);

    rep.iterations = k + 1;
    rep.residual_history.push_back(rnorm);
    merit_window.push_back(merit);
    if (static_cast<int>(merit_window.size()) > opts.nonmonotone_window) {
      merit_window.erase(merit_window.begin());
    }
    rec.residual_inf = rnorm;
    rec.merit = merit;
    rep.trace.push_back(rec);
    if (opts.log) {
      *opts.log << "iter " << k << ": r=" << rnorm << " step=" << rec.step
                << " pivots=" << rec.pivots << '\n';
    }
  }
  if (std::isfinite(rnorm) && rnorm <= opts.tol) return finish(SolveStatus::converged);
  return finish(SolveStatus::iteration_limit);
}

}  // namespace mcpflow

#include "mcpflow/baselines.hpp"

#include "mcpflow/kernels.hpp"

#include <Eigen/SparseLU>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mcpflow {

namespace {

constexpr double kSwitchTol = 1e-8;

struct NrEngine {
  const GridCase& grid;
  const NrOptions& opts;
  bool enforce_limits;
  int nb;
  std::vector<std::vector<int>> gens_at;
  std::vector<BusMode> mode;      // per bus
  std::vector<int> reversals;     // per bus
  bool oscillated = false;
  GridState st;

  NrEngine(const GridCase& g, const NrOptions& o, bool limits)
      : grid(g), opts(o), enforce_limits(limits), nb(static_cast<int>(g.buses.size())) {
    gens_at = g.gens_by_bus();
    mode.assign(nb, BusMode::pv);
    reversals.assign(nb, 0);
    st = flat_state(g);
    if (o.start && o.start->v.size() == st.v.size() && o.start->delta.size() == st.delta.size()) {
      st.v = o.start->v;
      st.delta = o.start->delta;
    }
    for (size_t k = 0; k < g.gens.size(); ++k) st.p_g[k] = g.gens[k].p_sp;
  }

  bool v_is_unknown(int i) const {
    if (i == grid.slack) return false;
    if (grid.buses[i].type != BusType::PV) return true;
    return mode[i] != BusMode::pv;
  }

  // Reactive injection paired with the bus balance: loads are in the residual
  // already; switched buses pin their generators at the violated limit.
  void apply_modes() {
    // The slack voltage is regulated by its generator just like a PV bus.
    if (grid.slack >= 0) st.v[grid.slack] = grid.buses[grid.slack].v_sp;
    for (int i = 0; i < nb; ++i) {
      if (grid.buses[i].type != BusType::PV) continue;
      if (mode[i] == BusMode::pv) {
        st.v[i] = grid.buses[i].v_sp;
      } else {
        for (int k : gens_at[i]) {
          st.q_g[k] = mode[i] == BusMode::pq_at_qmin ? grid.gens[k].q_min : grid.gens[k].q_max;
        }
      }
    }
  }

  // One full Newton solve of the current square system. Returns iterations
  // used, or -1 on divergence / singular Jacobian / iteration cap.
  int inner_newton(double* out_residual) {
    std::vector<int> dcol(nb, -1), vcol(nb, -1);
    int nvar = 0;
    for (int i = 0; i < nb; ++i) {
      if (i != grid.slack) dcol[i] = nvar++;
    }
    for (int i = 0; i < nb; ++i) {
      if (v_is_unknown(i)) vcol[i] = nvar++;
    }
    Eigen::VectorXd p, q, f(nvar);
    auto residual = [&]() {
      pf_residual(grid, st, p, q);
      for (int i = 0; i < nb; ++i) {
        if (dcol[i] >= 0) f[dcol[i]] = p[i];
        if (vcol[i] >= 0) f[vcol[i]] = q[i];
      }
      return f.lpNorm<Eigen::Infinity>();
    };
    double rnorm = residual();
    for (int it = 0; it <= opts.max_inner_iter; ++it) {
      if (!std::isfinite(rnorm) || rnorm > 1e8) return -1;
      if (rnorm <= opts.tol) {
        *out_residual = rnorm;
        return it;
      }
      if (it == opts.max_inner_iter) break;
      const SparseMat jd = pf_jacobian(grid, st, Wrt::delta);
      const SparseMat jv = pf_jacobian(grid, st, Wrt::v);
      std::vector<Eigen::Triplet<double>> t;
      auto remap = [&](const SparseMat& block, const std::vector<int>& cols) {
        for (int c = 0; c < block.outerSize(); ++c) {
          if (cols[c] < 0) continue;
          for (SparseMat::InnerIterator el(block, c); el; ++el) {
            const int r = static_cast<int>(el.row());
            const int tr = r < nb ? dcol[r] : vcol[r - nb];
            if (tr >= 0) t.emplace_back(tr, cols[c], el.value());
          }
        }
      };
      remap(jd, dcol);
      remap(jv, vcol);
      SparseMat jac(nvar, nvar);
      jac.setFromTriplets(t.begin(), t.end());
      Eigen::SparseLU<SparseMat> lu(jac);
      if (lu.info() != Eigen::Success) return -1;
      const Eigen::VectorXd dx = lu.solve(-f);
      if (!dx.allFinite()) return -1;
      for (int i = 0; i < nb; ++i) {
        if (dcol[i] >= 0) st.delta[i] += dx[dcol[i]];
        if (vcol[i] >= 0) st.v[i] += dx[vcol[i]];
      }
      if (st.v.minCoeff() <= 0) return -1;  // collapsed magnitude: call it divergence
      rnorm = residual();
    }
    return -1;
  }

  // Post-solve reactive requirement per PV bus; returns switches performed.
  int update_modes() {
    Eigen::VectorXd p, q;
    pf_residual(grid, st, p, q);
    int switched = 0;
    for (int i = 0; i < nb; ++i) {
      if (grid.buses[i].type != BusType::PV || gens_at[i].empty()) continue;
      double qmin = 0, qmax = 0, qcur = 0;
      for (int k : gens_at[i]) {
        qmin += grid.gens[k].q_min;
        qmax += grid.gens[k].q_max;
        qcur += st.q_g[k];
      }
      // Needed total = current setting minus the (signed) surplus in the row.
      const double q_needed = qcur - q[i];
      BusMode next = mode[i];
      if (mode[i] == BusMode::pv) {
        if (q_needed > qmax + kSwitchTol) next = BusMode::pq_at_qmax;
        else if (q_needed < qmin - kSwitchTol) next = BusMode::pq_at_qmin;
      } else if (mode[i] == BusMode::pq_at_qmax) {
        if (st.v[i] > grid.buses[i].v_sp + kSwitchTol) next = BusMode::pv;
      } else {
        if (st.v[i] < grid.buses[i].v_sp - kSwitchTol) next = BusMode::pv;
      }
      if (next != mode[i]) {
        if (next == BusMode::pv && ++reversals[i] > opts.reversal_cap) {
          oscillated = true;  // reversal cap exhausted; report nonconvergence
          continue;
        }
        if (opts.log) {
          *opts.log << "bus " << grid.buses[i].id << ": "
                    << (next == BusMode::pv ? "back to PV"
                                            : (next == BusMode::pq_at_qmax ? "PQ at qmax"
                                                                           : "PQ at qmin"))
                    << '\n';
        }
        mode[i] = next;
        ++switched;
      }
    }
    return switched;
  }

  // Equal-split completion of generator outputs for reporting.
  void complete_outputs() {
    Eigen::VectorXd p, q;
    pf_residual(grid, st, p, q);
    for (int i = 0; i < nb; ++i) {
      if (gens_at[i].empty()) continue;
      const double m = static_cast<double>(gens_at[i].size());
      if (grid.buses[i].type != BusType::PQ) {
        for (int k : gens_at[i]) st.q_g[k] -= q[i] / m;
      }
      if (i == grid.slack) {
        for (int k : gens_at[i]) st.p_g[k] -= p[i] / m;
      }
    }
  }

  NrReport run() {
    const auto t0 = std::chrono::steady_clock::now();
    NrReport rep;
    const int pv_count =
        static_cast<int>(std::count_if(grid.buses.begin(), grid.buses.end(),
                                       [](const Bus& b) { return b.type == BusType::PV; }));
    const int max_rounds = opts.max_rounds > 0 ? opts.max_rounds : 2 * pv_count + 8;
    while (true) {
      ++rep.rounds;
      apply_modes();
      double rnorm = 0;
      const int iters = inner_newton(&rnorm);
      if (iters < 0) {
        rep.status = SolveStatus::diverged;
        break;
      }
      rep.inner_iterations += iters;
      rep.residual_inf = rnorm;
      if (!enforce_limits) {
        rep.status = SolveStatus::converged;
        break;
      }
      const int switched = update_modes();
      rep.switches += switched;
      if (oscillated) {
        rep.status = SolveStatus::iteration_limit;  // reversal cap exceeded
        break;
      }
      if (switched == 0) {
        rep.status = SolveStatus::converged;
        break;
      }
      if (rep.rounds >= max_rounds) {
        rep.status = SolveStatus::iteration_limit;  // round cap
        break;
      }
    }
    if (rep.status == SolveStatus::converged) {
      // Pin generators on switched buses at their limits, then complete.
      apply_modes();
      complete_outputs();
      for (int i = 0; i < nb; ++i) {
        if (!gens_at[i].empty()) {
          rep.max_v_dev = std::max(rep.max_v_dev, std::abs(st.v[i] - grid.buses[i].v_sp));
        }
      }
    }
    rep.state = st;
    rep.modes = mode;
    rep.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
  }
};

}  // namespace

NrReport nr_pv_pq(const GridCase& grid, const NrOptions& opts) {
  grid.validate();
  NrEngine engine(grid, opts, true);
  return engine.run();
}

NrReport plain_nr(const GridCase& grid, const NrOptions& opts) {
  grid.validate();
  NrEngine engine(grid, opts, false);
  return engine.run();
}

namespace {

// phi partials with the kink convention at the origin.
inline void phi_partials(double a, double b, double& da, double& db) {
  const double rho = std::hypot(a, b);
  if (rho < 1e-300) {
    da = db = 1.0 / std::numbers::sqrt2 - 1.0;
    return;
  }
  da = a / rho - 1.0;
  db = b / rho - 1.0;
}

enum class RowKind { free_row, lower, upper, boxed, pinned };

RowKind classify(const Bounds& b, int i) {
  const bool lo = std::isfinite(b.lower[i]);
  const bool hi = std::isfinite(b.upper[i]);
  // l == u degenerates the composed phi to an identically-zero row; pin the
  // variable explicitly instead (same zero set as the natural residual).
  if (lo && hi && b.upper[i] <= b.lower[i]) return RowKind::pinned;
  if (lo && hi) return RowKind::boxed;
  if (lo) return RowKind::lower;
  if (hi) return RowKind::upper;
  return RowKind::free_row;
}

}  // namespace

Eigen::VectorXd fb_residual(const MCPProblem& problem, const Eigen::VectorXd& x) {
  const int n = problem.dim();
  Eigen::VectorXd f(n);
  problem.residual(x, f);
  const Bounds& b = problem.bounds;

  // Batch the upper-sided evaluations, then the lower-sided ones, so the
  // elementwise phi kernel does the arithmetic.
  std::vector<int> upper_rows, lower_rows;
  upper_rows.reserve(n);
  lower_rows.reserve(n);
  for (int i = 0; i < n; ++i) {
    const RowKind k = classify(b, i);
    if (k == RowKind::upper || k == RowKind::boxed) upper_rows.push_back(i);
    if (k == RowKind::lower || k == RowKind::boxed) lower_rows.push_back(i);
  }
  Eigen::VectorXd out = f;  // free rows keep F
  for (int i = 0; i < n; ++i) {
    if (classify(b, i) == RowKind::pinned) out[i] = x[i] - b.lower[i];
  }
  if (!upper_rows.empty()) {
    Eigen::VectorXd a(upper_rows.size()), bv(upper_rows.size()), phi(upper_rows.size());
    for (size_t j = 0; j < upper_rows.size(); ++j) {
      const int i = upper_rows[j];
      a[j] = b.upper[i] - x[i];
      bv[j] = -f[i];
    }
    kernels::active().fb_phi(static_cast<int>(upper_rows.size()), a.data(), bv.data(),
                             phi.data());
    for (size_t j = 0; j < upper_rows.size(); ++j) out[upper_rows[j]] = phi[j];
  }
  if (!lower_rows.empty()) {
    Eigen::VectorXd a(lower_rows.size()), bv(lower_rows.size()), phi(lower_rows.size());
    for (size_t j = 0; j < lower_rows.size(); ++j) {
      const int i = lower_rows[j];
      a[j] = x[i] - b.lower[i];
      bv[j] = out[i];  // F for lower-only rows, the inner phi for boxed rows
    }
    kernels::active().fb_phi(static_cast<int>(lower_rows.size()), a.data(), bv.data(),
                             phi.data());
    for (size_t j = 0; j < lower_rows.size(); ++j) out[lower_rows[j]] = phi[j];
  }
  return out;
}

namespace {

// J_fb = diag(alpha) + diag(beta) * J with coefficients from the chain rule
// through the (possibly composed) phi rows.
void fb_coefficients(const MCPProblem& problem, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& f, Eigen::VectorXd& alpha,
                     Eigen::VectorXd& beta) {
  const int n = problem.dim();
  const Bounds& b = problem.bounds;
  alpha.resize(n);
  beta.resize(n);
  for (int i = 0; i < n; ++i) {
    double da, db;
    switch (classify(b, i)) {
      case RowKind::free_row:
        alpha[i] = 0;
        beta[i] = 1;
        break;
      case RowKind::lower:
        phi_partials(x[i] - b.lower[i], f[i], da, db);
        alpha[i] = da;
        beta[i] = db;
        break;
      case RowKind::upper:
        phi_partials(b.upper[i] - x[i], -f[i], da, db);
        alpha[i] = -da;
        beta[i] = -db;
        break;
      case RowKind::boxed: {
        double ia, ib;
        const double inner_a = b.upper[i] - x[i];
        const double inner_b = -f[i];
        phi_partials(inner_a, inner_b, ia, ib);
        const double inner =
            std::hypot(inner_a, inner_b) - inner_a - inner_b;
        phi_partials(x[i] - b.lower[i], inner, da, db);
        alpha[i] = da - db * ia;
        beta[i] = -db * ib;
        break;
      }
      case RowKind::pinned:
        alpha[i] = 1;
        beta[i] = 0;
        break;
    }
  }
}

}  // namespace

SolveReport fb_solve(const MCPProblem& problem, const Eigen::VectorXd& x0,
                     const SolverOptions& opts) {
  if (opts.tol <= 0 || opts.max_iter < 1) {
    throw std::invalid_argument("fb_solve: tol must be > 0 and max_iter >= 1");
  }
  if (x0.size() != problem.dim() || !x0.allFinite()) {
    throw std::invalid_argument("fb_solve: bad initial point");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const int n = problem.dim();

  SolveReport rep;
  Eigen::VectorXd x = x0;
  Eigen::VectorXd f(n);
  Eigen::VectorXd phi = fb_residual(problem, x);
  double rnorm = phi.lpNorm<Eigen::Infinity>();
  double merit = phi.squaredNorm();
  rep.residual_history.push_back(rnorm);
  std::vector<double> merit_window{merit};

  auto finish = [&](SolveStatus status) {
    rep.status = status;
    rep.x = x;
    rep.residual_inf = rnorm;
    rep.q_order_estimate = estimate_q_order(rep.residual_history);
    rep.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
  };

  SparseMat jac, ident(n, n);
  ident.setIdentity();
  for (int k = 0; k < opts.max_iter; ++k) {
    if (!std::isfinite(rnorm)) return finish(SolveStatus::diverged);
    if (rnorm <= opts.tol) return finish(SolveStatus::converged);

    problem.residual(x, f);
    problem.jacobian(x, jac);
    Eigen::VectorXd alpha, beta;
    fb_coefficients(problem, x, f, alpha, beta);
    SparseMat jfb = beta.asDiagonal() * jac;
    jfb = jfb + SparseMat(alpha.asDiagonal());

    IterationRecord rec;
    rec.iter = k;
    bool stepped = false;
    bool have_normal = false;
    SparseMat jt, jtj;
    for (int attempt = 0; attempt <= opts.perturb_retries && !stepped; ++attempt) {
      Eigen::VectorXd d;
      double level = 0;
      if (attempt == 0) {
        Eigen::SparseLU<SparseMat> lu(jfb);
        if (lu.info() != Eigen::Success) continue;
        d = lu.solve(-phi);
      } else {
        // Gauss-Newton fallback for singular systems (e.g. duplicate generator
        // rows at shared buses). The right-hand side J^T phi is orthogonal to
        // null(J), so the direction carries no null-space component and stays
        // a descent direction for the merit.
        if (!have_normal) {
          jt = SparseMat(jfb.transpose());
          jtj = jt * jfb;
          have_normal = true;
        }
        level = opts.perturb_level0 * std::pow(opts.perturb_growth, attempt - 1);
        const double mu = level * (1.0 + merit);
        Eigen::SimplicialLDLT<SparseMat> llt(SparseMat(jtj + mu * ident));
        if (llt.info() != Eigen::Success) continue;
        d = llt.solve(jt * (-phi));
      }
      if (!d.allFinite()) continue;
      rec.perturbation = level;
      rec.direction_norm = d.lpNorm<Eigen::Infinity>();

      double t_max = 1.0;
      for (int idx : opts.magnitude_indices) {
        if (d[idx] < 0 && x[idx] + d[idx] < opts.magnitude_floor) {
          t_max = std::min(t_max, (x[idx] - opts.magnitude_floor) / -d[idx]);
        }
      }
      t_max = std::max(t_max, 0.0);
      const double merit_ref = *std::max_element(merit_window.begin(), merit_window.end());
      double t = t_max;
      while (t >= opts.step_floor) {
        const Eigen::VectorXd x_trial = x + t * d;
        const Eigen::VectorXd phi_trial = fb_residual(problem, x_trial);
        const double m_trial = phi_trial.squaredNorm();
        const bool accept = !opts.damping ||
                            (std::isfinite(m_trial) &&
                             m_trial <= merit_ref - opts.armijo_sigma * t * merit);
        if (accept) {
          x = x_trial;
          phi = phi_trial;
          merit = m_trial;
          rnorm = phi.lpNorm<Eigen::Infinity>();
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
      *opts.log << "fb iter " << k << ": r=" << rnorm << " step=" << rec.step
                << " dnorm=" << rec.direction_norm << " level=" << rec.perturbation
                << '\n';
    }
  }
  if (std::isfinite(rnorm) && rnorm <= opts.tol) return finish(SolveStatus::converged);
  return finish(SolveStatus::iteration_limit);
}

}  // namespace mcpflow

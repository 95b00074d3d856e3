#include "mcpflow/blcp.hpp"

#include "mcpflow/kernels.hpp"

#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <unordered_set>

namespace mcpflow {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

const char* to_string(BlcpStatus s) {
  switch (s) {
    case BlcpStatus::solved: return "solved";
    case BlcpStatus::ray_termination: return "ray_termination";
    case BlcpStatus::pivot_limit: return "pivot_limit";
    case BlcpStatus::singular_basis: return "singular_basis";
  }
  return "?";
}

void BoxedLCP::validate() const {
  bounds.validate();
  if (M.rows() != M.cols() || M.rows() != q.size() || bounds.size() != q.size()) {
    throw std::invalid_argument("BoxedLCP: inconsistent dimensions");
  }
  for (int c = 0; c < M.outerSize(); ++c) {
    for (SparseMat::InnerIterator it(M, c); it; ++it) {
      if (!std::isfinite(it.value())) {
        throw std::invalid_argument("BoxedLCP: non-finite matrix entry");
      }
    }
  }
  if (!q.allFinite()) throw std::invalid_argument("BoxedLCP: non-finite q");
}

namespace {

// Shared basis machinery for the block-pivoting main loop and the parametric
// covering-vector fallback.
class Basis {
 public:
  Basis(const BoxedLCP& lcp, PivotState& stats)
      : lcp_(lcp), stats_(stats), n_(lcp.dim()) {}

  // Drops impossible states (at a missing bound) and pins l == u indices.
  void sanitize(std::vector<BasisState>& st) const {
    const auto& l = lcp_.bounds.lower;
    const auto& u = lcp_.bounds.upper;
    for (int i = 0; i < n_; ++i) {
      if (l[i] == u[i]) {
        st[i] = BasisState::at_lower;  // pinned
      } else if (st[i] == BasisState::at_lower && !std::isfinite(l[i])) {
        st[i] = std::isfinite(u[i]) ? BasisState::at_upper : BasisState::basic;
      } else if (st[i] == BasisState::at_upper && !std::isfinite(u[i])) {
        st[i] = std::isfinite(l[i]) ? BasisState::at_lower : BasisState::basic;
      }
      if (lcp_.bounds.is_free(i)) st[i] = BasisState::basic;
    }
  }

  bool pinned(int i) const { return lcp_.bounds.lower[i] == lcp_.bounds.upper[i]; }

  // Factorizes M_BB for the given assignment. False when numerically singular.
  bool factorize(const std::vector<BasisState>& st) {
    basic_.clear();
    pos_.assign(n_, -1);
    for (int i = 0; i < n_; ++i) {
      if (st[i] == BasisState::basic) {
        pos_[i] = static_cast<int>(basic_.size());
        basic_.push_back(i);
      }
    }
    const int nb = static_cast<int>(basic_.size());
    triplets_.clear();
    for (int j : basic_) {
      for (SparseMat::InnerIterator it(lcp_.M, j); it; ++it) {
        const int pr = pos_[it.row()];
        if (pr >= 0) triplets_.emplace_back(pr, pos_[j], it.value());
      }
    }
    mbb_.resize(nb, nb);
    mbb_.setFromTriplets(triplets_.begin(), triplets_.end());
    mbb_.makeCompressed();
    ++stats_.factorizations;
    if (nb == 0) return true;
    lu_.compute(mbb_);
    return lu_.info() == Eigen::Success;
  }

  // x for the current assignment: nonbasic at their bound, basic from the
  // factorized subsystem with rhs = -(q_B + M_BN x_N). One refinement pass
  // tames drift on ill-conditioned bases. False on a non-finite solve.
  bool solve_x(const std::vector<BasisState>& st, Eigen::VectorXd& x) const {
    const auto& l = lcp_.bounds.lower;
    const auto& u = lcp_.bounds.upper;
    x.resize(n_);
    for (int i = 0; i < n_; ++i) {
      if (st[i] == BasisState::at_lower) x[i] = l[i];
      else if (st[i] == BasisState::at_upper) x[i] = u[i];
      else x[i] = 0.0;
    }
    if (basic_.empty()) return true;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(basic_.size());
    for (size_t bi = 0; bi < basic_.size(); ++bi) rhs[bi] = -lcp_.q[basic_[bi]];
    // Subtract M_BN x_N by streaming over nonbasic columns.
    for (int j = 0; j < n_; ++j) {
      if (pos_[j] >= 0 || x[j] == 0.0) continue;
      for (SparseMat::InnerIterator it(lcp_.M, j); it; ++it) {
        const int pr = pos_[it.row()];
        if (pr >= 0) rhs[pr] -= it.value() * x[j];
      }
    }
    Eigen::VectorXd xb = lu_.solve(rhs);
    if (!xb.allFinite()) return false;
    Eigen::VectorXd resid = rhs - mbb_ * xb;
    if (resid.lpNorm<Eigen::Infinity>() > 1e-12 * (1.0 + rhs.lpNorm<Eigen::Infinity>())) {
      const Eigen::VectorXd corr = lu_.solve(resid);
      if (corr.allFinite()) xb += corr;
    }
    for (size_t bi = 0; bi < basic_.size(); ++bi) x[basic_[bi]] = xb[bi];
    return true;
  }

  // Solves M_BB p = c_B for the parametric direction.
  bool solve_direction(const Eigen::VectorXd& c, Eigen::VectorXd& p_full) const {
    p_full = Eigen::VectorXd::Zero(n_);
    if (basic_.empty()) return true;
    Eigen::VectorXd cb(basic_.size());
    for (size_t bi = 0; bi < basic_.size(); ++bi) cb[bi] = c[basic_[bi]];
    Eigen::VectorXd pb = lu_.solve(cb);
    if (!pb.allFinite()) return false;
    for (size_t bi = 0; bi < basic_.size(); ++bi) p_full[basic_[bi]] = pb[bi];
    return true;
  }

  const std::vector<int>& basic() const { return basic_; }
  int pos(int i) const { return pos_[i]; }

 private:
  const BoxedLCP& lcp_;
  PivotState& stats_;
  int n_;
  std::vector<int> basic_;
  std::vector<int> pos_;
  std::vector<Eigen::Triplet<double>> triplets_;
  SparseMat mbb_;
  Eigen::SparseLU<SparseMat> lu_;
};

std::uint64_t assignment_hash(const std::vector<BasisState>& st) {
  std::uint64_t h = 1469598103934665603ull;
  for (BasisState s : st) {
    h ^= static_cast<std::uint64_t>(s) + 0x9e37;
    h *= 1099511628211ull;
  }
  return h;
}

struct Infeasibility {
  int index;
  BasisState target;
};

class Solver {
 public:
  Solver(const BoxedLCP& lcp, const std::vector<BasisState>* start,
         const BlcpOptions& opts)
      : lcp_(lcp), opts_(opts), n_(lcp.dim()), basis_(lcp, result_.state) {
    if (start && static_cast<int>(start->size()) == n_) {
      st_ = *start;
    } else {
      st_.assign(n_, BasisState::basic);
      for (int i = 0; i < n_; ++i) {
        if (std::isfinite(lcp_.bounds.lower[i])) st_[i] = BasisState::at_lower;
        else if (std::isfinite(lcp_.bounds.upper[i])) st_[i] = BasisState::at_upper;
      }
    }
    basis_.sanitize(st_);
  }

  BlcpResult run() {
    // Feasibility is judged relative to the data magnitude: w = M x + q
    // carries rounding noise of order eps * |q|, so an absolute threshold
    // keeps large systems flapping forever.
    const double feas_tol = 0.5 * opts_.tol * data_scale();
    enum class Mode { block, murty };
    Mode mode = Mode::block;
    int non_improving = 0;
    int murty_pivots = 0;
    size_t best_infeasible = std::numeric_limits<size_t>::max();
    std::unordered_set<std::uint64_t> seen;

    while (true) {
      if (!ensure_factorized_point()) return finish(BlcpStatus::singular_basis);
      compute_w();
      const std::vector<Infeasibility> infeas = collect_infeasible(feas_tol);
      if (infeas.empty()) return finish(BlcpStatus::solved);
      if (result_.state.pivots >= opts_.max_pivots) {
        return finish(BlcpStatus::pivot_limit);
      }

      if (infeas.size() < best_infeasible) {
        best_infeasible = infeas.size();
        non_improving = 0;
      } else if (++non_improving > 10 && mode == Mode::block) {
        // Least-index pivoting resolves small stuck sets; with many
        // infeasible indices its one-flip-at-a-time progress cannot fit any
        // reasonable pivot budget, so go straight to the covering path.
        if (infeas.size() > 50) {
          log("block pivoting stalled on ", infeas.size(),
              " infeasible indices: entering covering-vector path");
          return parametric_path();
        }
        mode = Mode::murty;
        log("fallback: switching to least-index pivoting");
      }

      if (mode == Mode::murty) {
        const std::uint64_t h = assignment_hash(st_);
        if (!seen.insert(h).second) {
          log("cycling detected: entering covering-vector path");
          return parametric_path();
        }
        if (seen.size() > 100000) seen.clear();
        if (++murty_pivots > 200) {
          log("least-index phase stalled: entering covering-vector path");
          return parametric_path();
        }
      }

      if (mode == Mode::block) {
        apply_switches(infeas);
      } else {
        apply_switches({infeas.front()});  // least index: collect order is ascending
      }
    }
  }

 private:
  bool ensure_factorized_point() {
    // The tie-breaking fallback: when a basis is singular, retry the last
    // switch one index at a time in ascending order before giving up.
    if (basis_.factorize(st_) && basis_.solve_x(st_, x_)) return true;
    if (last_switch_.empty()) return false;
    std::vector<BasisState> before = st_;
    for (const auto& s : last_switch_) before[s.index] = last_switch_from_[s.index];
    for (const auto& s : last_switch_) {
      std::vector<BasisState> trial = before;
      trial[s.index] = s.target;
      if (basis_.factorize(trial) && basis_.solve_x(trial, x_)) {
        st_ = std::move(trial);
        log("singular basis: retried switch of index ", s.index);
        return true;
      }
    }
    return false;
  }

  void compute_w() { w_ = lcp_.M * x_ + lcp_.q; }

  std::vector<Infeasibility> collect_infeasible(double tol) const {
    std::vector<Infeasibility> out;
    const auto& l = lcp_.bounds.lower;
    const auto& u = lcp_.bounds.upper;
    for (int i = 0; i < n_; ++i) {
      if (basis_.pinned(i)) continue;
      switch (st_[i]) {
        case BasisState::basic:
          if (x_[i] < l[i] - tol) out.push_back({i, BasisState::at_lower});
          else if (x_[i] > u[i] + tol) out.push_back({i, BasisState::at_upper});
          break;
        case BasisState::at_lower:
          if (w_[i] < -tol) out.push_back({i, BasisState::basic});
          break;
        case BasisState::at_upper:
          if (w_[i] > tol) out.push_back({i, BasisState::basic});
          break;
      }
    }
    return out;
  }

  void apply_switches(const std::vector<Infeasibility>& sw) {
    last_switch_ = sw;
    last_switch_from_.assign(n_, BasisState::basic);
    for (const auto& s : sw) {
      last_switch_from_[s.index] = st_[s.index];
      st_[s.index] = s.target;
    }
    ++result_.state.pivots;
    result_.state.index_flips += static_cast<int>(sw.size());
    if (opts_.log) {
      *opts_.log << "pivot " << result_.state.pivots << ": switch " << sw.size()
                 << " index(es):";
      for (const auto& s : sw) {
        *opts_.log << ' ' << s.index << "->"
                   << (s.target == BasisState::basic
                           ? "basic"
                           : (s.target == BasisState::at_lower ? "lower" : "upper"));
      }
      *opts_.log << '\n';
    }
  }

  // Parametric principal pivoting on q(t) = q + t c with a covering vector c
  // chosen to make the start feasible at large t; t is driven to zero, each
  // breakpoint exchanging one index. Finite for P-matrices; a stall on the
  // path signals possible non-P structure (ray termination).
  BlcpResult parametric_path() {
    const auto& l = lcp_.bounds.lower;
    const auto& u = lcp_.bounds.upper;

    // Basic-feasible start: only free indices basic, everything else at a bound.
    for (int i = 0; i < n_; ++i) {
      if (lcp_.bounds.is_free(i)) {
        st_[i] = BasisState::basic;
      } else if (st_[i] == BasisState::basic) {
        if (std::isfinite(l[i]) && (x_[i] - l[i] <= u[i] - x_[i] || !std::isfinite(u[i])))
          st_[i] = BasisState::at_lower;
        else
          st_[i] = BasisState::at_upper;
      }
    }
    basis_.sanitize(st_);
    if (!basis_.factorize(st_) || !basis_.solve_x(st_, x_)) {
      return finish(BlcpStatus::singular_basis);
    }
    compute_w();

    Eigen::VectorXd c = Eigen::VectorXd::Zero(n_);
    double t = 0.0;
    for (int i = 0; i < n_; ++i) {
      if (basis_.pinned(i)) continue;
      if (st_[i] == BasisState::at_lower && w_[i] < 0) {
        c[i] = 1.0;
        t = std::max(t, -w_[i]);
      } else if (st_[i] == BasisState::at_upper && w_[i] > 0) {
        c[i] = -1.0;
        t = std::max(t, w_[i]);
      }
    }
    if (t == 0.0) return finish(BlcpStatus::solved);
    t *= 1.0 + 1e-10;
    log("covering path start, t=", t);
    // From here w_ holds the parametric value M x(t) + q + t c.
    w_ += t * c;

    int stall = 0;
    while (result_.state.pivots < opts_.max_pivots) {
      Eigen::VectorXd p;
      if (!basis_.solve_direction(c, p)) return finish(BlcpStatus::singular_basis);
      // x(t) = x0 - t p on basics; w(t) = w0 + t (c - M p) on nonbasics.
      const Eigen::VectorXd mp = lcp_.M * p;

      // Ratio test: largest t_hit < t where a constraint becomes tight.
      // Ties must all leave together, otherwise the strict t_hit < t filter
      // would hide their violations for the rest of the path.
      std::vector<Infeasibility> hits;
      std::vector<double> hit_t;
      auto consider = [&](double t_hit, int idx, BasisState target) {
        if (!std::isfinite(t_hit) || t_hit < 0 || t_hit >= t) return;
        hits.push_back({idx, target});
        hit_t.push_back(t_hit);
      };
      for (int bi : basis_.basic()) {
        if (std::abs(p[bi]) < 1e-13) continue;
        const double x0 = x_[bi] + t * p[bi];
        if (p[bi] > 0 && std::isfinite(u[bi]))
          consider((x0 - u[bi]) / p[bi], bi, BasisState::at_upper);
        if (p[bi] < 0 && std::isfinite(l[bi]))
          consider((x0 - l[bi]) / p[bi], bi, BasisState::at_lower);
      }
      for (int i = 0; i < n_; ++i) {
        if (st_[i] == BasisState::basic || basis_.pinned(i)) continue;
        const double dw = c[i] - mp[i];
        if (std::abs(dw) < 1e-13) continue;
        const double w0 = w_[i] - t * dw;
        if (st_[i] == BasisState::at_lower && dw > 0)
          consider(-w0 / dw, i, BasisState::basic);
        if (st_[i] == BasisState::at_upper && dw < 0)
          consider(-w0 / dw, i, BasisState::basic);
      }

      if (hits.empty()) {
        // Nothing blocks before t = 0: evaluate the solution there.
        if (!basis_.solve_x(st_, x_)) return finish(BlcpStatus::singular_basis);
        return finish(BlcpStatus::solved);
      }

      double t_next = 0.0;
      for (double th : hit_t) t_next = std::max(t_next, th);
      const double tie_eps = 1e-12 * (1.0 + t_next);
      std::vector<Infeasibility> block;
      for (size_t h = 0; h < hits.size(); ++h) {
        if (hit_t[h] >= t_next - tie_eps) block.push_back(hits[h]);
      }
      std::sort(block.begin(), block.end(),
                [](const Infeasibility& a, const Infeasibility& b) { return a.index < b.index; });

      if (t - t_next < 1e-14 * (1.0 + t)) {
        if (++stall > 50) {
          log("covering path stalled at t=", t);
          return finish(BlcpStatus::ray_termination);
        }
      } else {
        stall = 0;
      }

      log("path t=", t_next, " block size=", block.size(), " first=", block.front().index);
      apply_switches(block);
      t = t_next;
      if (!basis_.factorize(st_)) {
        // Degenerate exchange produced a singular basis; undo all but the
        // least-index switch, then try sending that one the other way.
        for (size_t h = 1; h < block.size(); ++h) {
          st_[block[h].index] = last_switch_from_[block[h].index];
        }
        const int bi0 = block.front().index;
        if (!basis_.factorize(st_)) {
          if (st_[bi0] == BasisState::basic) {
            st_[bi0] = std::isfinite(l[bi0]) ? BasisState::at_lower : BasisState::at_upper;
          } else {
            st_[bi0] = BasisState::basic;
          }
          if (!basis_.factorize(st_)) return finish(BlcpStatus::singular_basis);
        }
      }
      // Position x at the breakpoint: nonbasics at bounds, basics from the
      // parametric system at t.
      if (!basis_.solve_x(st_, x_)) return finish(BlcpStatus::singular_basis);
      Eigen::VectorXd pt;
      if (!basis_.solve_direction(c, pt)) return finish(BlcpStatus::singular_basis);
      for (int bi : basis_.basic()) x_[bi] -= t * pt[bi];
      compute_w();
      w_ += t * c;
    }
    return finish(BlcpStatus::pivot_limit);
  }

  double data_scale() const { return 1.0 + lcp_.q.lpNorm<Eigen::Infinity>(); }

  BlcpResult finish(BlcpStatus status) {
    if (x_.size() != n_) x_ = Eigen::VectorXd::Zero(n_);
    compute_w();
    Eigen::VectorXd r(n_);
    kernels::active().mid_residual(n_, x_.data(), w_.data(), lcp_.bounds.lower.data(),
                                   lcp_.bounds.upper.data(), r.data());
    result_.residual_inf = r.lpNorm<Eigen::Infinity>();
    if (status == BlcpStatus::solved && result_.residual_inf > opts_.tol * data_scale()) {
      status = BlcpStatus::pivot_limit;
    }
    result_.status = status;
    result_.x = x_;
    result_.state.assignment = st_;
    return result_;
  }

  template <typename... Args>
  void log(Args&&... args) {
    if (!opts_.log) return;
    (void)std::initializer_list<int>{((*opts_.log << args), 0)...};
    *opts_.log << '\n';
  }

  const BoxedLCP& lcp_;
  BlcpOptions opts_;
  int n_;
  BlcpResult result_;
  Basis basis_;
  std::vector<BasisState> st_;
  std::vector<Infeasibility> last_switch_;
  std::vector<BasisState> last_switch_from_;
  Eigen::VectorXd x_, w_;
};

}  // namespace

BlcpResult solve_blcp(const BoxedLCP& lcp, const std::vector<BasisState>* start,
                      const BlcpOptions& opts) {
  lcp.validate();
  if (lcp.dim() < 1) throw std::invalid_argument("solve_blcp: empty problem");
  Solver solver(lcp, start, opts);
  return solver.run();
}

std::vector<Eigen::VectorXd> brute_force_blcp(const BoxedLCP& lcp, double tol) {
  lcp.validate();
  const int n = lcp.dim();
  if (n > 12) throw std::invalid_argument("brute_force_blcp: dimension too large");
  const Eigen::MatrixXd M = Eigen::MatrixXd(lcp.M);
  const auto& l = lcp.bounds.lower;
  const auto& u = lcp.bounds.upper;

  std::vector<std::vector<BasisState>> state_choices(n);
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(l[i])) state_choices[i].push_back(BasisState::at_lower);
    if (std::isfinite(u[i]) && u[i] != l[i]) state_choices[i].push_back(BasisState::at_upper);
    state_choices[i].push_back(BasisState::basic);
  }

  std::vector<Eigen::VectorXd> solutions;
  std::vector<BasisState> st(n, BasisState::basic);

  auto accept = [&](const Eigen::VectorXd& x) {
    const Eigen::VectorXd w = M * x + lcp.q;
    for (int i = 0; i < n; ++i) {
      if (x[i] < l[i] - tol || x[i] > u[i] + tol) return;
      const bool at_l = std::isfinite(l[i]) && x[i] <= l[i] + tol;
      const bool at_u = std::isfinite(u[i]) && x[i] >= u[i] - tol;
      if (at_l && w[i] >= -tol) continue;
      if (at_u && w[i] <= tol) continue;
      if (std::abs(w[i]) <= tol) continue;
      return;
    }
    for (const auto& s : solutions) {
      if ((s - x).lpNorm<Eigen::Infinity>() <= 1e-7) return;
    }
    solutions.push_back(x);
  };

  std::function<void(int)> enumerate = [&](int i) {
    if (i == n) {
      std::vector<int> basic;
      Eigen::VectorXd x(n);
      for (int k = 0; k < n; ++k) {
        if (st[k] == BasisState::at_lower) x[k] = l[k];
        else if (st[k] == BasisState::at_upper) x[k] = u[k];
        else { x[k] = 0; basic.push_back(k); }
      }
      if (!basic.empty()) {
        const int nb = static_cast<int>(basic.size());
        Eigen::MatrixXd mbb(nb, nb);
        Eigen::VectorXd rhs(nb);
        for (int r = 0; r < nb; ++r) {
          rhs[r] = -lcp.q[basic[r]];
          for (int k = 0; k < n; ++k) {
            if (st[k] != BasisState::basic && x[k] != 0) rhs[r] -= M(basic[r], k) * x[k];
          }
          for (int c = 0; c < nb; ++c) mbb(r, c) = M(basic[r], basic[c]);
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(mbb);
        if (!lu.isInvertible()) return;
        const Eigen::VectorXd xb = lu.solve(rhs);
        if (!xb.allFinite()) return;
        for (int r = 0; r < nb; ++r) x[basic[r]] = xb[r];
      }
      accept(x);
      return;
    }
    for (BasisState s : state_choices[i]) {
      st[i] = s;
      enumerate(i + 1);
    }
  };
  enumerate(0);
  return solutions;
}

}  // namespace mcpflow

#include "mcpflow/mcp.hpp"

#include "mcpflow/kernels.hpp"

#include <Eigen/SparseLU>

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mcpflow {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kSingularCondThreshold = 1e12;
}  // namespace

bool Bounds::is_free(int i) const {
  return lower[i] == -kInf && upper[i] == kInf;
}

void Bounds::validate() const {
  if (lower.size() != upper.size()) {
    throw std::invalid_argument("Bounds: lower/upper size mismatch");
  }
  for (int i = 0; i < size(); ++i) {
    if (std::isnan(lower[i]) || std::isnan(upper[i]) || lower[i] > upper[i]) {
      std::ostringstream os;
      os << "Bounds: invalid interval [" << lower[i] << ", " << upper[i]
         << "] at index " << i;
      throw std::invalid_argument(os.str());
    }
  }
}

Bounds Bounds::free(int n) {
  Bounds b;
  b.lower = Eigen::VectorXd::Constant(n, -kInf);
  b.upper = Eigen::VectorXd::Constant(n, kInf);
  return b;
}

Eigen::VectorXd natural_residual(const Bounds& bounds, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& f) {
  const int n = bounds.size();
  if (x.size() != n || f.size() != n) {
    throw std::invalid_argument("natural_residual: dimension mismatch");
  }
  if (!f.allFinite()) {
    throw std::runtime_error("natural_residual: non-finite residual evaluation");
  }
  Eigen::VectorXd r(n);
  kernels::active().mid_residual(n, x.data(), f.data(), bounds.lower.data(),
                                 bounds.upper.data(), r.data());
  return r;
}

Eigen::VectorXd natural_residual(const MCPProblem& problem, const Eigen::VectorXd& x) {
  if (x.size() != problem.dim()) {
    throw std::invalid_argument("natural_residual: dimension mismatch");
  }
  if (!x.allFinite()) {
    throw std::invalid_argument("natural_residual: non-finite point");
  }
  Eigen::VectorXd f;
  problem.residual(x, f);
  return natural_residual(problem.bounds, x, f);
}

bool is_solution(const MCPProblem& problem, const Eigen::VectorXd& x, double tol) {
  if (tol <= 0) throw std::invalid_argument("is_solution: tol must be positive");
  const Eigen::VectorXd r = natural_residual(problem, x);
  if (r.lpNorm<Eigen::Infinity>() > tol) return false;
  for (int i = 0; i < problem.dim(); ++i) {
    if (x[i] < problem.bounds.lower[i] - tol || x[i] > problem.bounds.upper[i] + tol) {
      return false;
    }
  }
  return true;
}

IndexPartition classify_indices(const MCPProblem& problem, const Eigen::VectorXd& x,
                                double activity_tol) {
  if (!is_solution(problem, x, activity_tol)) {
    throw std::invalid_argument(
        "classify_indices: x is not an approximate solution; partition would be "
        "meaningless");
  }
  Eigen::VectorXd f;
  problem.residual(x, f);

  IndexPartition part;
  for (int i = 0; i < problem.dim(); ++i) {
    const bool at_lower = std::isfinite(problem.bounds.lower[i]) &&
                          std::abs(x[i] - problem.bounds.lower[i]) <= activity_tol;
    const bool at_upper = std::isfinite(problem.bounds.upper[i]) &&
                          std::abs(x[i] - problem.bounds.upper[i]) <= activity_tol;
    const bool f_zero = std::abs(f[i]) <= activity_tol;
    if (!at_lower && !at_upper) {
      // Interior: F_i must vanish at a solution.
      part.alpha.push_back(i);
    } else if (f_zero) {
      part.beta.push_back(i);
    } else {
      part.gamma.push_back(i);
    }
  }
  return part;
}

double condest_1norm(int n, double a_norm1,
                     const std::function<bool(Eigen::VectorXd&)>& solve,
                     const std::function<bool(Eigen::VectorXd&)>& solve_transpose) {
  if (n == 0) return 0.0;
  // Hager's estimator for ||A^-1||_1.
  Eigen::VectorXd v = Eigen::VectorXd::Constant(n, 1.0 / n);
  if (!solve(v)) return kInf;
  double est = v.lpNorm<1>();
  for (int iter = 0; iter < 5; ++iter) {
    Eigen::VectorXd xi(n);
    for (int i = 0; i < n; ++i) xi[i] = v[i] >= 0 ? 1.0 : -1.0;
    if (!solve_transpose(xi)) return kInf;
    int j = 0;
    double zmax = 0;
    for (int i = 0; i < n; ++i) {
      if (std::abs(xi[i]) > zmax) {
        zmax = std::abs(xi[i]);
        j = i;
      }
    }
    if (zmax <= xi.dot(v.cwiseSign())) break;
    v = Eigen::VectorXd::Zero(n);
    v[j] = 1.0;
    if (!solve(v)) return kInf;
    const double new_est = v.lpNorm<1>();
    if (new_est <= est) break;
    est = new_est;
  }
  return a_norm1 * est;
}

namespace {

double det_of(const Eigen::MatrixXd& m) {
  if (m.rows() == 1) return m(0, 0);
  if (m.rows() == 2) return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  return Eigen::PartialPivLU<Eigen::MatrixXd>(m).determinant();
}

double principal_minor(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Eigen::MatrixXd sub(idx.size(), idx.size());
  for (size_t r = 0; r < idx.size(); ++r)
    for (size_t c = 0; c < idx.size(); ++c) sub(r, c) = m(idx[r], idx[c]);
  return det_of(sub);
}

}  // namespace

bool is_p_matrix(const Eigen::MatrixXd& m, double* min_minor, long* minors_checked) {
  const int k = static_cast<int>(m.rows());
  double mm = kInf;
  long checked = 0;
  bool ok = true;
  std::vector<int> idx;
  for (unsigned long mask = 1; mask < (1ul << k); ++mask) {
    idx.clear();
    for (int i = 0; i < k; ++i)
      if (mask & (1ul << i)) idx.push_back(i);
    const double d = principal_minor(m, idx);
    ++checked;
    mm = std::min(mm, d);
    if (d <= 0) {
      ok = false;
      break;
    }
  }
  if (min_minor) *min_minor = (k == 0) ? kInf : mm;
  if (minors_checked) *minors_checked = checked;
  return k == 0 ? true : ok;
}

RegularityReport strong_regularity_certificate(const MCPProblem& problem,
                                               const Eigen::VectorXd& x,
                                               const IndexPartition& partition) {
  RegularityReport report;
  report.beta_size = static_cast<int>(partition.beta.size());

  SparseMat jac;
  problem.jacobian(x, jac);
  jac.makeCompressed();

  const auto& alpha = partition.alpha;
  const auto& beta = partition.beta;
  const int na = static_cast<int>(alpha.size());
  const int nb = static_cast<int>(beta.size());

  std::vector<int> pos_in_alpha(problem.dim(), -1);
  for (int i = 0; i < na; ++i) pos_in_alpha[alpha[i]] = i;
  std::vector<int> pos_in_beta(problem.dim(), -1);
  for (int i = 0; i < nb; ++i) pos_in_beta[beta[i]] = i;

  // Extract J_aa, J_ab, J_ba, J_bb.
  std::vector<Eigen::Triplet<double>> taa, tab, tba;
  Eigen::MatrixXd jbb = Eigen::MatrixXd::Zero(nb, nb);
  for (int c = 0; c < jac.outerSize(); ++c) {
    const int cc_a = pos_in_alpha[c];
    const int cc_b = pos_in_beta[c];
    if (cc_a < 0 && cc_b < 0) continue;
    for (SparseMat::InnerIterator it(jac, c); it; ++it) {
      const int rr_a = pos_in_alpha[it.row()];
      const int rr_b = pos_in_beta[it.row()];
      if (rr_a >= 0 && cc_a >= 0) taa.emplace_back(rr_a, cc_a, it.value());
      if (rr_a >= 0 && cc_b >= 0) tab.emplace_back(rr_a, cc_b, it.value());
      if (rr_b >= 0 && cc_a >= 0) tba.emplace_back(rr_b, cc_a, it.value());
      if (rr_b >= 0 && cc_b >= 0) jbb(rr_b, cc_b) += it.value();
    }
  }

  Eigen::MatrixXd schur = jbb;
  if (na > 0) {
    SparseMat jaa(na, na);
    jaa.setFromTriplets(taa.begin(), taa.end());
    jaa.makeCompressed();
    SparseMat jaa_t = SparseMat(jaa.transpose());

    Eigen::SparseLU<SparseMat> lu, lu_t;
    lu.compute(jaa);
    if (lu.info() != Eigen::Success) {
      report.verdict = Regularity::not_regular;
      report.alpha_cond_estimate = kInf;
      report.detail = "J_aa factorization failed (numerically singular)";
      return report;
    }
    lu_t.compute(jaa_t);

    double a_norm1 = 0;
    for (int c = 0; c < na; ++c) {
      double s = 0;
      for (SparseMat::InnerIterator it(jaa, c); it; ++it) s += std::abs(it.value());
      a_norm1 = std::max(a_norm1, s);
    }
    report.alpha_cond_estimate = condest_1norm(
        na, a_norm1,
        [&](Eigen::VectorXd& v) {
          v = lu.solve(v);
          return lu.info() == Eigen::Success && v.allFinite();
        },
        [&](Eigen::VectorXd& v) {
          if (lu_t.info() != Eigen::Success) return false;
          v = lu_t.solve(v);
          return lu_t.info() == Eigen::Success && v.allFinite();
        });
    if (!(report.alpha_cond_estimate < kSingularCondThreshold)) {
      report.verdict = Regularity::not_regular;
      report.detail = "J_aa condition estimate above threshold";
      return report;
    }

    if (nb > 0) {
      SparseMat jab(na, nb), jba(nb, na);
      jab.setFromTriplets(tab.begin(), tab.end());
      jba.setFromTriplets(tba.begin(), tba.end());
      const Eigen::MatrixXd x_ab = lu.solve(Eigen::MatrixXd(jab));
      schur -= Eigen::MatrixXd(jba) * x_ab;
    }
  } else {
    report.alpha_cond_estimate = 1.0;
  }

  if (nb == 0) {
    // Empty beta: strong regularity reduces to invertibility on alpha.
    report.verdict = Regularity::regular;
    report.detail = "beta empty; J_aa well conditioned";
    return report;
  }

  if (nb <= 20) {
    double mm;
    long checked;
    const bool pmat = is_p_matrix(schur, &mm, &checked);
    report.min_minor = mm;
    report.minors_checked = checked;
    report.verdict = pmat ? Regularity::regular : Regularity::not_regular;
    report.detail = pmat ? "Schur complement is a P-matrix (all minors enumerated)"
                         : "Schur complement has a nonpositive principal minor";
    return report;
  }

  // beta too large for exact enumeration: sample minors. A nonpositive sample
  // disproves; otherwise the test is inconclusive.
  std::vector<int> idx;
  unsigned long long seed = 0x9e3779b97f4a7c15ull;
  auto next = [&seed]() {
    seed ^= seed << 13;
    seed ^= seed >> 7;
    seed ^= seed << 17;
    return seed;
  };
  double mm = kInf;
  long checked = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    idx.clear();
    for (int i = 0; i < nb; ++i)
      if (next() & 1) idx.push_back(i);
    if (idx.empty()) continue;
    const double d = principal_minor(schur, idx);
    ++checked;
    mm = std::min(mm, d);
    if (d <= 0) {
      report.min_minor = mm;
      report.minors_checked = checked;
      report.verdict = Regularity::not_regular;
      report.detail = "sampled principal minor nonpositive";
      return report;
    }
  }
  report.min_minor = mm;
  report.minors_checked = checked;
  report.verdict = Regularity::inconclusive;
  report.detail = "beta too large for exact P-matrix enumeration; sampled minors positive";
  return report;
}

}  // namespace mcpflow

#include <doctest.h>

#include "mcpflow/mcp.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

using namespace mcpflow;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// F(x) = A x + q as an MCPProblem over the given box.
MCPProblem linear_mcp(const Eigen::MatrixXd& a, const Eigen::VectorXd& q, Bounds b) {
  MCPProblem p;
  p.bounds = std::move(b);
  p.residual = [a, q](const Eigen::VectorXd& x, Eigen::VectorXd& f) { f = a * x + q; };
  p.jacobian = [a](const Eigen::VectorXd&, SparseMat& jac) {
    jac = a.sparseView(1.0, 0.0);
    jac.makeCompressed();
  };
  return p;
}

// Independent P-matrix check: enumerate principal minors by bitmask.
bool p_matrix_oracle(const Eigen::MatrixXd& m) {
  const int n = static_cast<int>(m.rows());
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    std::vector<int> idx;
    for (int i = 0; i < n; ++i) {
      if (mask & (1u << i)) idx.push_back(i);
    }
    Eigen::MatrixXd sub(idx.size(), idx.size());
    for (size_t r = 0; r < idx.size(); ++r) {
      for (size_t c = 0; c < idx.size(); ++c) sub(r, c) = m(idx[r], idx[c]);
    }
    if (sub.determinant() <= 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("bounds validation") {
  Bounds b = Bounds::free(3);
  CHECK(b.size() == 3);
  CHECK(b.is_free(0));
  CHECK_NOTHROW(b.validate());

  b.lower[1] = 0.0;
  b.upper[1] = 2.0;
  CHECK(!b.is_free(1));
  CHECK_NOTHROW(b.validate());

  b.lower[2] = 1.0;
  b.upper[2] = 0.0;  // crossed
  CHECK_THROWS_AS(b.validate(), std::invalid_argument);

  Bounds mismatched;
  mismatched.lower = Eigen::VectorXd::Zero(2);
  mismatched.upper = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(mismatched.validate(), std::invalid_argument);
}

TEST_CASE("natural residual componentwise cases") {
  Bounds b;
  b.lower = Eigen::VectorXd::Constant(4, 0.0);
  b.upper = Eigen::VectorXd::Constant(4, 2.0);
  b.lower[3] = -kInf;
  b.upper[3] = kInf;

  Eigen::VectorXd x(4), f(4);
  x << 1.0, 0.0, 2.0, 5.0;
  f << 0.25, 3.0, -3.0, 0.5;
  const Eigen::VectorXd r = natural_residual(b, x, f);

  CHECK(r[0] == doctest::Approx(0.25));  // interior: r = f
  CHECK(r[1] == doctest::Approx(0.0));   // at lower with f > 0: solved row
  CHECK(r[2] == doctest::Approx(0.0));   // at upper with f < 0: solved row
  CHECK(r[3] == doctest::Approx(0.5));   // free: r = f always

  // Pushing past a bound leaves x - bound.
  x[1] = 0.5;  // x - f = -2.5 clips at 0
  CHECK(natural_residual(b, x, f)[1] == doctest::Approx(0.5));
}

TEST_CASE("natural residual rejects bad inputs") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(2, 2);
  Eigen::VectorXd q = Eigen::VectorXd::Zero(2);
  MCPProblem p = linear_mcp(a, q, Bounds::free(2));

  CHECK_THROWS(natural_residual(p, Eigen::VectorXd::Zero(3)));

  MCPProblem bad = p;
  bad.residual = [](const Eigen::VectorXd& x, Eigen::VectorXd& f) {
    f = x;
    f[0] = std::numeric_limits<double>::quiet_NaN();
  };
  CHECK_THROWS(natural_residual(bad, Eigen::VectorXd::Zero(2)));
}

TEST_CASE("is_solution on interior and bound solutions") {
  // F(x) = x - 2 on [0, 10]: interior solution at 2.
  Eigen::MatrixXd a(1, 1);
  a << 1.0;
  Eigen::VectorXd q(1);
  q << -2.0;
  Bounds b;
  b.lower = Eigen::VectorXd::Constant(1, 0.0);
  b.upper = Eigen::VectorXd::Constant(1, 10.0);
  const MCPProblem p = linear_mcp(a, q, b);
  CHECK(is_solution(p, Eigen::VectorXd::Constant(1, 2.0), 1e-12));
  CHECK(!is_solution(p, Eigen::VectorXd::Constant(1, 2.1), 1e-6));

  // F(x) = x + 1 on [0, 10]: bound solution at 0 with F = 1 > 0.
  q << 1.0;
  const MCPProblem pb = linear_mcp(a, q, b);
  CHECK(is_solution(pb, Eigen::VectorXd::Zero(1), 1e-12));
  // Outside the box fails even if the residual formula happens to be small.
  CHECK(!is_solution(pb, Eigen::VectorXd::Constant(1, -1.0), 1e-6));
}

TEST_CASE("classify_indices splits interior, degenerate, and strongly active rows") {
  // x* = (l, interior, u, l-degenerate) with F = (2, 0, -3, 0).
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(4, 4);
  Eigen::VectorXd q(4);
  q << 2.0, 0.0, -3.0, 0.0;
  Bounds b;
  b.lower = Eigen::VectorXd::Zero(4);
  b.upper = Eigen::VectorXd::Constant(4, 5.0);
  const MCPProblem p = linear_mcp(a, q, b);

  Eigen::VectorXd x(4);
  x << 0.0, 2.5, 5.0, 0.0;
  REQUIRE(is_solution(p, x, 1e-12));

  const IndexPartition part = classify_indices(p, x);
  CHECK(part.alpha == std::vector<int>{1});
  CHECK(part.beta == std::vector<int>{3});
  CHECK(part.gamma == std::vector<int>{0, 2});

  // Away from a solution the partition is refused.
  Eigen::VectorXd bad(4);
  bad << 1.0, 1.0, 1.0, 1.0;
  CHECK_THROWS(classify_indices(p, bad));
}

TEST_CASE("is_p_matrix agrees with minor enumeration on random matrices") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  int positives = 0, negatives = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 1 + trial % 5;
    Eigen::MatrixXd m(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) m(i, j) = d(rng);
    }
    if (trial % 2 == 0) m += (1.0 + n) * Eigen::MatrixXd::Identity(n, n);  // dominant
    const bool expect = p_matrix_oracle(m);
    (expect ? positives : negatives)++;
    double min_minor = 0;
    long checked = 0;
    CHECK(is_p_matrix(m, &min_minor, &checked) == expect);
    CHECK(checked == (1L << n) - 1);
    if (expect) CHECK(min_minor > 0);
  }
  CHECK(positives > 10);  // both outcomes actually exercised
  CHECK(negatives > 10);
}

TEST_CASE("is_p_matrix known matrices") {
  CHECK(is_p_matrix(Eigen::MatrixXd::Identity(3, 3)));
  Eigen::MatrixXd m(2, 2);
  m << 1.0, 2.0, 3.0, 1.0;  // det = -5
  CHECK(!is_p_matrix(m));
  m << 0.0, 1.0, 1.0, 2.0;  // zero principal minor
  CHECK(!is_p_matrix(m));
  // Nonsymmetric P-matrix: positive diagonal, strictly dominant.
  m << 2.0, -1.5, 0.5, 1.0;
  CHECK(is_p_matrix(m));
}

TEST_CASE("condest_1norm brackets the true 1-norm condition number") {
  std::mt19937 rng(17);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 7;
    Eigen::MatrixXd a(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) a(i, j) = d(rng);
    }
    a += n * Eigen::MatrixXd::Identity(n, n);
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
    const auto solve = [&](Eigen::VectorXd& v) {
      v = lu.solve(v);
      return true;
    };
    const Eigen::PartialPivLU<Eigen::MatrixXd> lut(a.transpose().eval());
    const auto solve_t = [&](Eigen::VectorXd& v) {
      v = lut.solve(v);
      return true;
    };
    const double a1 = a.cwiseAbs().colwise().sum().maxCoeff();
    const double inv1 = a.inverse().cwiseAbs().colwise().sum().maxCoeff();
    const double exact = a1 * inv1;
    const double est = condest_1norm(n, a1, solve, solve_t);
    CHECK(est <= exact * (1.0 + 1e-10));  // Hager estimates from below
    CHECK(est >= exact / 10.0);           // and is rarely off by much
  }
}

TEST_CASE("condest_1norm is exact for diagonal matrices and inf on failure") {
  Eigen::VectorXd diag(3);
  diag << 4.0, 0.5, 2.0;
  const auto solve = [&](Eigen::VectorXd& v) {
    v = v.cwiseQuotient(diag);
    return true;
  };
  const double est = condest_1norm(3, diag.maxCoeff(), solve, solve);
  CHECK(est == doctest::Approx(4.0 / 0.5));

  const auto fail = [](Eigen::VectorXd&) { return false; };
  CHECK(std::isinf(condest_1norm(3, 1.0, fail, fail)));
}

TEST_CASE("strong regularity certificate on an interior solution") {
  // SPD system, interior solution: alpha is everything, Schur block empty.
  Eigen::MatrixXd a(3, 3);
  a << 4, 1, 0, 1, 3, 1, 0, 1, 5;
  const Eigen::VectorXd xs = Eigen::VectorXd::Constant(3, 1.0);
  const Eigen::VectorXd q = -(a * xs);
  Bounds b;
  b.lower = Eigen::VectorXd::Zero(3);
  b.upper = Eigen::VectorXd::Constant(3, 10.0);
  const MCPProblem p = linear_mcp(a, q, b);
  REQUIRE(is_solution(p, xs, 1e-10));

  const IndexPartition part = classify_indices(p, xs);
  CHECK(part.alpha.size() == 3);
  CHECK(part.beta.empty());
  const RegularityReport rep = strong_regularity_certificate(p, xs, part);
  CHECK(rep.verdict == Regularity::regular);
  CHECK(rep.beta_size == 0);
  CHECK(rep.alpha_cond_estimate < 1e6);
}

TEST_CASE("strong regularity certificate flags a non-P degenerate block") {
  // At x* = (0,0): F = (x2, x1) vanishes, both rows degenerate at the lower
  // bound, and the Schur complement equals J = [[0,1],[1,0]], not a P-matrix.
  Eigen::MatrixXd a(2, 2);
  a << 0, 1, 1, 0;
  Bounds b;
  b.lower = Eigen::VectorXd::Zero(2);
  b.upper = Eigen::VectorXd::Constant(2, kInf);
  const MCPProblem p = linear_mcp(a, Eigen::VectorXd::Zero(2), b);
  const Eigen::VectorXd xs = Eigen::VectorXd::Zero(2);
  REQUIRE(is_solution(p, xs, 1e-12));

  const IndexPartition part = classify_indices(p, xs);
  CHECK(part.beta.size() == 2);
  const RegularityReport rep = strong_regularity_certificate(p, xs, part);
  CHECK(rep.verdict == Regularity::not_regular);
  CHECK(rep.min_minor <= 0.0);
}

TEST_CASE("strong regularity certificate accepts a positive degenerate block") {
  // Same geometry but J = I: the degenerate Schur block is a P-matrix.
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(2, 2);
  Bounds b;
  b.lower = Eigen::VectorXd::Zero(2);
  b.upper = Eigen::VectorXd::Constant(2, kInf);
  const MCPProblem p = linear_mcp(a, Eigen::VectorXd::Zero(2), b);
  const Eigen::VectorXd xs = Eigen::VectorXd::Zero(2);
  const IndexPartition part = classify_indices(p, xs);
  const RegularityReport rep = strong_regularity_certificate(p, xs, part);
  CHECK(rep.verdict == Regularity::regular);
  CHECK(rep.beta_size == 2);
  CHECK(rep.minors_checked == 3);
  CHECK(rep.min_minor > 0);
}

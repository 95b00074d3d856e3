#include <doctest.h>

#include "mcpflow/grid.hpp"
#include "mcpflow/kernels.hpp"
#include "mcpflow/matpower.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <string>
#include <vector>

using namespace mcpflow;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> random_vec(std::mt19937& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Bounds with a random mix of finite, one-sided, and free components.
void random_bounds(std::mt19937& rng, int n, std::vector<double>& lo,
                   std::vector<double>& up) {
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  std::uniform_int_distribution<int> kind(0, 3);
  lo.resize(n);
  up.resize(n);
  for (int i = 0; i < n; ++i) {
    double a = d(rng), b = d(rng);
    if (a > b) std::swap(a, b);
    switch (kind(rng)) {
      case 0: lo[i] = a; up[i] = b; break;
      case 1: lo[i] = a; up[i] = kInf; break;
      case 2: lo[i] = -kInf; up[i] = b; break;
      default: lo[i] = -kInf; up[i] = kInf; break;
    }
  }
}

double mid_oracle(double lo, double up, double t) {
  return std::min(up, std::max(lo, t));
}

const std::vector<int> kSizes = {0, 1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 64, 257};

}  // namespace

TEST_CASE("scalar mid_residual matches the clamp definition") {
  std::mt19937 rng(42);
  const auto& ops = kernels::scalar_ops();
  for (int n : kSizes) {
    std::vector<double> x = random_vec(rng, n, -3, 3);
    std::vector<double> f = random_vec(rng, n, -3, 3);
    std::vector<double> lo, up;
    random_bounds(rng, n, lo, up);
    std::vector<double> r(n, -99.0);
    ops.mid_residual(n, x.data(), f.data(), lo.data(), up.data(), r.data());
    for (int i = 0; i < n; ++i) {
      CHECK(r[i] == x[i] - mid_oracle(lo[i], up[i], x[i] - f[i]));
    }
  }
}

TEST_CASE("mid_residual reduces to f on free components and to x - bound on clips") {
  const auto& ops = kernels::scalar_ops();
  const double x[3] = {0.5, 5.0, -5.0};
  const double f[3] = {0.125, -1.0, 1.0};
  const double lo[3] = {-kInf, 0.0, -1.0};
  const double up[3] = {kInf, 2.0, 1.0};
  double r[3];
  ops.mid_residual(3, x, f, lo, up, r);
  CHECK(r[0] == doctest::Approx(0.125));  // free row: r = f
  CHECK(r[1] == doctest::Approx(3.0));    // x - f = 6 clips at up=2: r = x - 2
  CHECK(r[2] == doctest::Approx(-4.0));   // x - f = -6 clips at lo=-1: r = x + 1
}

TEST_CASE("scalar fb_phi matches sqrt(a^2+b^2) - a - b and its zero set") {
  const auto& ops = kernels::scalar_ops();
  const double a[5] = {0.0, 3.0, 0.0, -1.0, 1.0};
  const double b[5] = {5.0, 0.0, 0.0, 2.0, 1.0};
  double out[5];
  ops.fb_phi(5, a, b, out);
  // phi = 0 exactly when a >= 0, b >= 0, ab = 0.
  CHECK(out[0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(out[1] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(out[2] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(out[3] == doctest::Approx(std::sqrt(5.0) - 1.0));
  CHECK(out[4] == doctest::Approx(std::sqrt(2.0) - 2.0));
}

TEST_CASE("scalar inf_norm matches Eigen") {
  std::mt19937 rng(7);
  const auto& ops = kernels::scalar_ops();
  CHECK(ops.inf_norm(0, nullptr) == 0.0);
  for (int n : kSizes) {
    if (n == 0) continue;
    std::vector<double> x = random_vec(rng, n, -10, 10);
    Eigen::Map<const Eigen::VectorXd> m(x.data(), n);
    CHECK(ops.inf_norm(n, x.data()) == m.lpNorm<Eigen::Infinity>());
  }
}

TEST_CASE("scalar pf_flows matches a dense recomputation on case9") {
  const ParseResult pr = load_case(std::string(MCPFLOW_DATA_DIR) + "/case9.m");
  const GridCase& g = pr.grid;
  const int n = static_cast<int>(g.buses.size());

  std::mt19937 rng(11);
  std::uniform_real_distribution<double> dv(0.9, 1.1), dd(-0.4, 0.4);
  GridState st = flat_state(g);
  for (int i = 0; i < n; ++i) {
    st.v[i] = dv(rng);
    st.delta[i] = dd(rng);
  }

  const AdmittanceModel y = build_admittance(g, st);
  const kernels::AdmittanceView view = y.view();
  std::vector<double> v(n), cosd(n), sind(n);
  for (int i = 0; i < n; ++i) {
    v[i] = st.v[i];
    cosd[i] = std::cos(st.delta[i]);
    sind[i] = std::sin(st.delta[i]);
  }
  std::vector<double> p(n), q(n);
  kernels::scalar_ops().pf_flows(view, v.data(), cosd.data(), sind.data(), p.data(),
                                 q.data());

  for (int i = 0; i < n; ++i) {
    double pe = 0, qe = 0;
    for (int s = view.row_ptr[i]; s < view.row_ptr[i + 1]; ++s) {
      const int k = view.col[s];
      const double dik = st.delta[i] - st.delta[k];
      pe += v[i] * v[k] * (view.g[s] * std::cos(dik) + view.b[s] * std::sin(dik));
      qe += v[i] * v[k] * (view.g[s] * std::sin(dik) - view.b[s] * std::cos(dik));
    }
    CHECK(p[i] == doctest::Approx(pe).epsilon(1e-12));
    CHECK(q[i] == doctest::Approx(qe).epsilon(1e-12));
  }
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
  const kernels::Ops* simd = kernels::avx2_ops();
  if (!simd) return;  // build or CPU without AVX2
  const auto& ref = kernels::scalar_ops();
  std::mt19937 rng(1234);

  for (int n : kSizes) {
    std::vector<double> x = random_vec(rng, n, -4, 4);
    std::vector<double> f = random_vec(rng, n, -4, 4);
    std::vector<double> lo, up;
    random_bounds(rng, n, lo, up);

    std::vector<double> r0(n), r1(n);
    ref.mid_residual(n, x.data(), f.data(), lo.data(), up.data(), r0.data());
    simd->mid_residual(n, x.data(), f.data(), lo.data(), up.data(), r1.data());
    for (int i = 0; i < n; ++i) CHECK(r0[i] == r1[i]);  // min/max ops are exact

    std::vector<double> a = random_vec(rng, n, -4, 4);
    std::vector<double> b = random_vec(rng, n, -4, 4);
    std::vector<double> p0(n), p1(n);
    ref.fb_phi(n, a.data(), b.data(), p0.data());
    simd->fb_phi(n, a.data(), b.data(), p1.data());
    for (int i = 0; i < n; ++i) {
      CHECK(p0[i] == doctest::Approx(p1[i]).epsilon(1e-14));
    }

    if (n > 0) {
      CHECK(ref.inf_norm(n, x.data()) == simd->inf_norm(n, x.data()));
    }
  }
}

TEST_CASE("avx2 pf_flows agrees with scalar on a real sparsity pattern") {
  const kernels::Ops* simd = kernels::avx2_ops();
  if (!simd) return;
  const ParseResult pr = load_case(std::string(MCPFLOW_DATA_DIR) + "/case118.m");
  const GridCase& g = pr.grid;
  const int n = static_cast<int>(g.buses.size());

  std::mt19937 rng(99);
  std::uniform_real_distribution<double> dv(0.9, 1.1), dd(-0.5, 0.5);
  GridState st = case_state(g);
  for (int i = 0; i < n; ++i) {
    st.v[i] = dv(rng);
    st.delta[i] = dd(rng);
  }
  const AdmittanceModel y = build_admittance(g, st);
  const kernels::AdmittanceView view = y.view();
  std::vector<double> v(n), cosd(n), sind(n);
  for (int i = 0; i < n; ++i) {
    v[i] = st.v[i];
    cosd[i] = std::cos(st.delta[i]);
    sind[i] = std::sin(st.delta[i]);
  }
  std::vector<double> p0(n), q0(n), p1(n), q1(n);
  kernels::scalar_ops().pf_flows(view, v.data(), cosd.data(), sind.data(), p0.data(),
                                 q0.data());
  simd->pf_flows(view, v.data(), cosd.data(), sind.data(), p1.data(), q1.data());
  for (int i = 0; i < n; ++i) {
    // FMA reassociation allows tiny drift; the row sums are O(1) per unit.
    CHECK(p0[i] == doctest::Approx(p1[i]).epsilon(1e-12));
    CHECK(q0[i] == doctest::Approx(q1[i]).epsilon(1e-12));
  }
}

TEST_CASE("active table is one of the published tables") {
  const auto& act = kernels::active();
  const bool is_scalar = std::strcmp(act.name, kernels::scalar_ops().name) == 0;
  const bool is_avx2 = kernels::avx2_ops() &&
                       std::strcmp(act.name, kernels::avx2_ops()->name) == 0;
  CHECK((is_scalar || is_avx2));
  if (!kernels::avx2_ops()) CHECK(is_scalar);
}

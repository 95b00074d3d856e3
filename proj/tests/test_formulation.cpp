#include <doctest.h>

#include "mcpflow/formulation.hpp"
#include "mcpflow/matpower.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <string>
#include <vector>

using namespace mcpflow;

namespace {

GridCase load(const char* name) {
  return load_case(std::string(MCPFLOW_DATA_DIR) + "/" + name).grid;
}

// case14 with one controllable tap (branch row 8) and one switched shunt at
// bus 9, the standard regulation playground for these tests.
GridCase case14_devices() {
  GridCase g = load("case14.m");
  apply_sidecar(g, R"({
    "version": 1,
    "taps":   [{"branch": 8, "min": 0.9, "max": 1.06}],
    "shunts": [{"bus": 9, "min": 0.0, "max": 0.39}]
  })");
  return g;
}

RegulationConfig full_config(const GridCase& g) {
  RegulationConfig rc;
  rc.gen_voltage_control = true;
  rc.frequency_control = true;
  for (size_t e = 0; e < g.branches.size(); ++e) {
    if (g.branches[e].tap_min < g.branches[e].tap_max) {
      rc.tap_devices.push_back(static_cast<int>(e));
    }
  }
  for (size_t s = 0; s < g.shunts.size(); ++s) {
    if (g.shunts[s].b_min < g.shunts[s].b_max) rc.shunt_devices.push_back(static_cast<int>(s));
  }
  return rc;
}

int count_set(const std::vector<int>& v) {
  int c = 0;
  for (int x : v) {
    if (x >= 0) ++c;
  }
  return c;
}

}  // namespace

TEST_CASE("layout dimensions follow the control stages on case14") {
  GridCase g = case14_devices();
  apply_default_droop(g, 20.0);
  const int n_pq = 9, n_pv = 4, n_gen = 5, gens_at_pv = 4;

  RegulationConfig rc;  // stage A: power flow only
  Formulation f = assemble(g, rc);
  CHECK(f.layout.n == (14 - 1) + n_pq);
  CHECK(count_set(f.layout.delta) == 13);
  CHECK(count_set(f.layout.v) == n_pq);
  CHECK(count_set(f.layout.q_g) == 0);
  CHECK(f.layout.delta_f == -1);
  CHECK(f.problem.dim() == f.layout.n);
  CHECK(static_cast<int>(f.layout.names.size()) == f.layout.n);

  rc.gen_voltage_control = true;
  f = assemble(g, rc);
  CHECK(f.layout.n == 22 + n_pv + gens_at_pv);
  CHECK(count_set(f.layout.v) == n_pq + n_pv);

  RegulationConfig devs = full_config(g);
  devs.frequency_control = false;
  f = assemble(g, devs);
  CHECK(f.layout.devices.size() == 2);  // one tap + one shunt
  CHECK(f.layout.n == 30 + 2 * 5);

  const Formulation all = assemble(g, full_config(g));
  CHECK(all.layout.delta_f >= 0);
  CHECK(count_set(all.layout.p_g) == n_gen);  // every gen sits at a PV/slack bus
  CHECK(all.layout.n == 40 + 1 + n_gen);

  // Bounds line up with the physical limits.
  for (size_t k = 0; k < g.gens.size(); ++k) {
    const int idx = all.layout.q_g[k];
    if (idx < 0) continue;
    CHECK(all.problem.bounds.lower[idx] == doctest::Approx(g.gens[k].q_min));
    CHECK(all.problem.bounds.upper[idx] == doctest::Approx(g.gens[k].q_max));
  }
  for (const auto& d : all.layout.devices) {
    CHECK(all.problem.bounds.is_free(d.u));
    CHECK(all.problem.bounds.lower[d.up] == 0.0);
    CHECK(all.problem.bounds.lower[d.sm] == 0.0);
    CHECK((d.orientation == 1.0 || d.orientation == -1.0));
  }
}

TEST_CASE("flat initial point and warm copy") {
  GridCase g = case14_devices();
  apply_default_droop(g, 20.0);
  const Formulation f = assemble(g, full_config(g));
  const VariableLayout& lay = f.layout;

  const Eigen::VectorXd x = initial_point(f);
  for (size_t i = 0; i < g.buses.size(); ++i) {
    if (lay.delta[i] >= 0) CHECK(x[lay.delta[i]] == 0.0);
    if (lay.v[i] >= 0) CHECK(x[lay.v[i]] == 1.0);
  }
  for (size_t k = 0; k < g.gens.size(); ++k) {
    if (lay.q_g[k] >= 0) {
      CHECK(x[lay.q_g[k]] ==
            doctest::Approx(0.5 * (g.gens[k].q_min + g.gens[k].q_max)));
    }
    if (lay.p_g[k] >= 0) {
      CHECK(x[lay.p_g[k]] ==
            doctest::Approx(std::clamp(g.gens[k].p_sp, g.gens[k].p_min, g.gens[k].p_max)));
    }
  }
  for (const auto& d : lay.devices) {
    CHECK(x[d.u] == doctest::Approx(d.set_point));
    CHECK(x[d.up] == 0.0);
    CHECK(x[d.um] == 0.0);
    CHECK(x[d.sp] == 0.0);
    CHECK(x[d.sm] == 0.0);
  }
  CHECK(x[lay.delta_f] == 0.0);

  GridState warm = case_state(g);
  warm.delta_f = -0.001;
  warm.tap[7] = 1.01;
  const Eigen::VectorXd xw = initial_point(f, &warm);
  for (size_t i = 0; i < g.buses.size(); ++i) {
    if (lay.v[i] >= 0) CHECK(xw[lay.v[i]] == doctest::Approx(warm.v[i]));
    if (lay.delta[i] >= 0) CHECK(xw[lay.delta[i]] == doctest::Approx(warm.delta[i]));
  }
  CHECK(xw[lay.delta_f] == doctest::Approx(-0.001));
  for (const auto& d : lay.devices) {
    if (d.branch == 7) {
      CHECK(xw[d.u] == doctest::Approx(1.01));
      // Drift splits into its positive part against the set point.
      const double drift = d.orientation * (1.01 - d.set_point);
      CHECK(xw[d.up] == doctest::Approx(std::max(drift, 0.0)));
      CHECK(xw[d.um] == doctest::Approx(std::max(-drift, 0.0)));
    }
  }
}

TEST_CASE("state_from_x inverts the layout and completes fixed generators") {
  GridCase g = case14_devices();
  apply_default_droop(g, 20.0);
  const Formulation f = assemble(g, full_config(g));
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> d(-0.05, 0.05);
  Eigen::VectorXd x = initial_point(f);
  for (int i = 0; i < x.size(); ++i) x[i] += d(rng);

  const GridState st = state_from_x(f, x);
  const VariableLayout& lay = f.layout;
  for (size_t i = 0; i < g.buses.size(); ++i) {
    if (lay.v[i] >= 0) CHECK(st.v[static_cast<int>(i)] == doctest::Approx(x[lay.v[i]]));
    if (lay.delta[i] >= 0) {
      CHECK(st.delta[static_cast<int>(i)] == doctest::Approx(x[lay.delta[i]]));
    }
  }
  // Fixed buses hold their regulation targets, not arbitrary seeds.
  CHECK(st.v[g.slack] == doctest::Approx(g.buses[g.slack].v_sp));
  for (const auto& dev : lay.devices) {
    if (dev.branch >= 0) CHECK(st.tap[dev.branch] == doctest::Approx(x[dev.u]));
    if (dev.shunt >= 0) CHECK(st.b_switched[dev.shunt] == doctest::Approx(x[dev.u]));
  }
  CHECK(st.delta_f == doctest::Approx(x[lay.delta_f]));
}

TEST_CASE("assembled Jacobian matches central finite differences") {
  GridCase g = case14_devices();
  apply_default_droop(g, 20.0);
  for (bool all_controls : {false, true}) {
    const RegulationConfig rc = all_controls ? full_config(g) : RegulationConfig{};
    const Formulation f = assemble(g, rc);
    std::mt19937 rng(all_controls ? 21 : 22);
    std::uniform_real_distribution<double> jitter(-0.03, 0.03);

    Eigen::VectorXd x = initial_point(f);
    for (int i = 0; i < x.size(); ++i) x[i] += jitter(rng);
    // Keep boxed variables strictly inside so FD does not cross bounds.
    for (int i = 0; i < x.size(); ++i) {
      x[i] = std::clamp(x[i], f.problem.bounds.lower[i] + 1e-3,
                        f.problem.bounds.upper[i] - 1e-3);
    }

    SparseMat jac;
    f.problem.jacobian(x, jac);
    Eigen::MatrixXd dense = Eigen::MatrixXd(jac);

    Eigen::VectorXd fp, fm;
    Eigen::VectorXd xp = x;
    double worst = 0;
    for (int c = 0; c < x.size(); ++c) {
      const double h = 1e-6 * (1.0 + std::abs(x[c]));
      xp[c] = x[c] + h;
      f.problem.residual(xp, fp);
      xp[c] = x[c] - h;
      f.problem.residual(xp, fm);
      xp[c] = x[c];
      worst = std::max(worst,
                       (dense.col(c) - (fp - fm) / (2 * h)).lpNorm<Eigen::Infinity>());
    }
    CHECK_MESSAGE(worst <= 1e-6, "controls=", all_controls);
  }
}

TEST_CASE("solved states satisfy the full power balance everywhere") {
  for (bool stage_b : {false, true}) {
    GridCase g = case14_devices();
    apply_default_droop(g, 20.0);
    RegulationConfig rc;
    if (stage_b) rc = full_config(g);
    SolverOptions opts;
    GridState out;
    const SolveReport rep = solve_grid(g, rc, opts, nullptr, &out);
    REQUIRE_MESSAGE(rep.converged(), "stage_b=", stage_b);

    // Completion of off-layout generator outputs zeroes the balance at fixed
    // buses; solved rows are zero by convergence.
    Eigen::VectorXd p, q;
    pf_residual(g, out, p, q);
    CHECK(p.lpNorm<Eigen::Infinity>() <= 1e-7);
    CHECK(q.lpNorm<Eigen::Infinity>() <= 1e-7);
  }
}

TEST_CASE("regulation summary certifies the control structure at solutions") {
  GridCase g = case14_devices();
  apply_default_droop(g, 20.0);
  const Formulation f = assemble(g, full_config(g));
  SolverOptions opts;
  opts.magnitude_indices = magnitude_indices(f);
  const SolveReport rep = solve_mcp(f.problem, initial_point(f), opts);
  REQUIRE(rep.converged());

  const RegulationReport reg = regulation_summary(f, rep.x, 1e-6);
  CHECK(reg.frequency_hz == doctest::Approx(60.0 * (1.0 + reg.delta_f)));

  // Complementarity structure, checked directly against the layout.
  const VariableLayout& lay = f.layout;
  const GridState st = state_from_x(f, rep.x);

  // The violation report must agree with a direct band scan. case14 pins
  // bus 8 at VG 1.09 above its 1.06 limit, so the list is not empty here.
  int outside = 0;
  for (size_t i = 0; i < g.buses.size(); ++i) {
    if (st.v[static_cast<int>(i)] < g.buses[i].v_min - 1e-6 ||
        st.v[static_cast<int>(i)] > g.buses[i].v_max + 1e-6) {
      ++outside;
    }
  }
  CHECK(reg.violation_count == outside);
  CHECK(reg.violations.size() == static_cast<size_t>(outside));
  CHECK(outside > 0);
  for (size_t k = 0; k < g.gens.size(); ++k) {
    if (lay.q_g[k] < 0) continue;
    const double qg = rep.x[lay.q_g[k]];
    const bool interior =
        qg > g.gens[k].q_min + 1e-6 && qg < g.gens[k].q_max - 1e-6;
    if (interior) {
      CHECK(std::abs(st.v[g.gens[k].bus] - g.gens[k].v_sp) <= 1e-6);
    }
  }
  for (const auto& d : lay.devices) {
    const double u = rep.x[d.u];
    CHECK(u >= d.lo - 1e-9);
    CHECK(u <= d.hi + 1e-9);
    if (u > d.lo + 1e-6 && u < d.hi - 1e-6) {
      // Interior device: both drift slacks must vanish.
      CHECK(rep.x[d.sp] <= 1e-6);
      CHECK(rep.x[d.sm] <= 1e-6);
    }
  }
  for (size_t k = 0; k < g.gens.size(); ++k) {
    if (lay.p_g[k] < 0) continue;
    const double pg = rep.x[lay.p_g[k]];
    if (pg > g.gens[k].p_min + 1e-6 && pg < g.gens[k].p_max - 1e-6) {
      // Interior output sits exactly on its droop line.
      CHECK(pg == doctest::Approx(g.gens[k].p_sp -
                                  g.gens[k].droop * rep.x[lay.delta_f])
                      .epsilon(1e-6));
    }
  }
}

TEST_CASE("magnitude_indices covers voltages and tap ratios only") {
  GridCase g = case14_devices();
  const Formulation f = assemble(g, full_config(g));
  const std::vector<int> idx = magnitude_indices(f);

  int n_v = count_set(f.layout.v);
  int n_tap = 0;
  for (const auto& d : f.layout.devices) {
    if (d.branch >= 0) ++n_tap;
  }
  CHECK(static_cast<int>(idx.size()) == n_v + n_tap);
  for (int i : idx) {
    const std::string& name = f.layout.names[i];
    const bool is_v = name.rfind("v(", 0) == 0;
    const bool is_tap = name.rfind("u(branch", 0) == 0;
    CHECK((is_v || is_tap));
  }
}

TEST_CASE("apply_default_droop fills only unset gains") {
  GridCase g = load("case14.m");
  g.gens[0].droop = 7.5;  // explicit gain survives
  g.gens[1].p_max = std::numeric_limits<double>::infinity();
  apply_default_droop(g, 20.0);
  CHECK(g.gens[0].droop == doctest::Approx(7.5));
  // Unusable p_max falls back to max(|p_sp|, 1).
  CHECK(g.gens[1].droop ==
        doctest::Approx(20.0 * std::max(std::abs(g.gens[1].p_sp), 1.0)));
  for (size_t k = 2; k < g.gens.size(); ++k) {
    CHECK(g.gens[k].droop == doctest::Approx(20.0 * g.gens[k].p_max));
  }
}

TEST_CASE("assemble rejects malformed device declarations") {
  GridCase g = load("case14.m");
  RegulationConfig rc;
  rc.tap_devices = {7};
  // Branch 8 has no widened range yet: degenerate bounds are refused.
  CHECK_THROWS(assemble(g, rc));

  g.branches[7].tap_min = 1.05;  // set point 0.978 now outside [1.05, 1.10]
  g.branches[7].tap_max = 1.10;
  CHECK_THROWS(assemble(g, rc));

  rc.tap_devices = {999};
  CHECK_THROWS(assemble(g, rc));

  rc.tap_devices = {7, 7};
  g.branches[7].tap_min = 0.9;
  g.branches[7].tap_max = 1.1;
  CHECK_THROWS(assemble(g, rc));
}

TEST_CASE("solve_grid surfaces the regulation summary in its report") {
  GridCase g = load("case9.m");
  RegulationConfig rc;
  rc.gen_voltage_control = true;
  SolverOptions opts;
  GridState out;
  const SolveReport rep = solve_grid(g, rc, opts, nullptr, &out);
  REQUIRE(rep.converged());
  CHECK(rep.regulation.max_voltage_deviation >= 0.0);
  CHECK(rep.regulation.max_bound_violation <= 1e-9);
  CHECK(out.v.size() == 9);
  // Voltage control pins every generator bus in this easy case.
  for (size_t k = 0; k < g.gens.size(); ++k) {
    CHECK(std::abs(out.v[g.gens[k].bus] - g.gens[k].v_sp) <= 1e-6);
  }
}

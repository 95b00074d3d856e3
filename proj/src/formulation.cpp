#include "mcpflow/formulation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <unordered_set>

namespace mcpflow {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNominalHz = 60.0;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// Parameter values for every quantity that stays outside the layout: fixed
// voltages sit at their regulation targets, everything else at set points.
static GridState parameter_base(const GridCase& g) {
  const int nb = static_cast<int>(g.buses.size());
  GridState base;
  base.v.resize(nb);
  base.delta = Eigen::VectorXd::Zero(nb);
  for (int i = 0; i < nb; ++i) {
    base.v[i] = g.buses[i].type == BusType::PQ ? 1.0 : g.buses[i].v_sp;
  }
  base.delta[g.slack] = g.buses[g.slack].delta0;
  base.p_g.resize(g.gens.size());
  base.q_g.resize(g.gens.size());
  for (size_t k = 0; k < g.gens.size(); ++k) {
    base.p_g[k] = g.gens[k].p_sp;
    base.q_g[k] = g.gens[k].q0;
  }
  base.tap.resize(g.branches.size());
  for (size_t e = 0; e < g.branches.size(); ++e) base.tap[e] = g.branches[e].tap;
  base.b_switched.resize(g.shunts.size());
  for (size_t s = 0; s < g.shunts.size(); ++s) base.b_switched[s] = g.shunts[s].b_sp;
  base.delta_f = 0;
  return base;
}

struct Assembly {
  std::shared_ptr<const GridCase> grid;
  RegulationConfig config;
  VariableLayout lay;
  GridState base;  // parameter values for everything outside the layout
  std::vector<std::vector<int>> gens_at;

  GridState scatter(const Eigen::VectorXd& x) const {
    GridState st = base;
    const auto& g = *grid;
    for (size_t i = 0; i < g.buses.size(); ++i) {
      if (lay.delta[i] >= 0) st.delta[i] = x[lay.delta[i]];
      if (lay.v[i] >= 0) st.v[i] = x[lay.v[i]];
    }
    for (size_t k = 0; k < g.gens.size(); ++k) {
      if (lay.q_g[k] >= 0) st.q_g[k] = x[lay.q_g[k]];
      if (lay.p_g[k] >= 0) st.p_g[k] = x[lay.p_g[k]];
    }
    for (const auto& d : lay.devices) {
      if (d.branch >= 0) st.tap[d.branch] = x[d.u];
      else st.b_switched[d.shunt] = x[d.u];
    }
    if (lay.delta_f >= 0) st.delta_f = x[lay.delta_f];
    return st;
  }

  void residual(const Eigen::VectorXd& x, Eigen::VectorXd& f) const {
    const auto& g = *grid;
    const GridState st = scatter(x);
    Eigen::VectorXd p, q;
    pf_residual(g, st, p, q);
    f.setConstant(lay.n, std::numeric_limits<double>::quiet_NaN());
    for (size_t i = 0; i < g.buses.size(); ++i) {
      if (lay.delta[i] >= 0) f[lay.delta[i]] = p[i];
      if (lay.v[i] >= 0) f[lay.v[i]] = q[i];
    }
    for (size_t k = 0; k < g.gens.size(); ++k) {
      if (lay.q_g[k] >= 0) f[lay.q_g[k]] = st.v[g.gens[k].bus] - g.gens[k].v_sp;
      if (lay.p_g[k] >= 0) {
        f[lay.p_g[k]] = x[lay.p_g[k]] - g.gens[k].p_sp + g.gens[k].droop * x[lay.delta_f];
      }
    }
    for (const auto& d : lay.devices) {
      const double u = x[d.u];
      const double vr = st.v[d.reg_bus];
      const Bus& rb = g.buses[d.reg_bus];
      f[d.u] = u - d.set_point - d.orientation * (x[d.up] - x[d.um]);
      f[d.up] = vr + x[d.sm] - rb.v_min;
      f[d.um] = rb.v_max - vr + x[d.sp];
      f[d.sp] = d.orientation > 0 ? u - d.lo : d.hi - u;
      f[d.sm] = d.orientation > 0 ? d.hi - u : u - d.lo;
    }
    if (lay.delta_f >= 0) f[lay.delta_f] = p[g.slack];
    if (!f.allFinite()) {
      // Either a row was never written (pairing bug) or the state produced a
      // non-finite balance; both must surface immediately.
      fail(g.name + ": non-finite residual row");
    }
  }

  void jacobian(const Eigen::VectorXd& x, SparseMat& jac) const {
    const auto& g = *grid;
    const int nb = static_cast<int>(g.buses.size());
    const GridState st = scatter(x);
    std::vector<Eigen::Triplet<double>> t;

    // Row owners of the bus balances.
    std::vector<int> row_p(nb, -1), row_q(nb, -1);
    for (int i = 0; i < nb; ++i) {
      row_p[i] = lay.delta[i];
      row_q[i] = lay.v[i];
    }
    if (lay.delta_f >= 0) row_p[g.slack] = lay.delta_f;

    auto remap = [&](const SparseMat& block, const std::vector<int>& col_of) {
      for (int c = 0; c < block.outerSize(); ++c) {
        if (col_of[c] < 0) continue;
        for (SparseMat::InnerIterator it(block, c); it; ++it) {
          const int r = static_cast<int>(it.row());
          const int tr = r < nb ? row_p[r] : row_q[r - nb];
          if (tr >= 0) t.emplace_back(tr, col_of[c], it.value());
        }
      }
    };
    remap(pf_jacobian(g, st, Wrt::delta), lay.delta);
    remap(pf_jacobian(g, st, Wrt::v), lay.v);

    bool any_tap = false, any_shunt = false;
    for (const auto& d : lay.devices) (d.branch >= 0 ? any_tap : any_shunt) = true;
    if (any_tap) {
      const SparseMat jt = pf_jacobian(g, st, Wrt::tap);
      std::vector<int> col_of(g.branches.size(), -1);
      for (const auto& d : lay.devices) {
        if (d.branch >= 0) col_of[d.branch] = d.u;
      }
      remap(jt, col_of);
    }
    if (any_shunt) {
      const SparseMat js = pf_jacobian(g, st, Wrt::shunt);
      std::vector<int> col_of(g.shunts.size(), -1);
      for (const auto& d : lay.devices) {
        if (d.shunt >= 0) col_of[d.shunt] = d.u;
      }
      remap(js, col_of);
    }

    for (size_t k = 0; k < g.gens.size(); ++k) {
      const int bus = g.gens[k].bus;
      if (lay.p_g[k] >= 0) {
        if (row_p[bus] >= 0) t.emplace_back(row_p[bus], lay.p_g[k], 1.0);
        t.emplace_back(lay.p_g[k], lay.p_g[k], 1.0);
        t.emplace_back(lay.p_g[k], lay.delta_f, g.gens[k].droop);
      }
      if (lay.q_g[k] >= 0) {
        if (row_q[bus] >= 0) t.emplace_back(row_q[bus], lay.q_g[k], 1.0);
        t.emplace_back(lay.q_g[k], lay.v[bus], 1.0);
      }
    }

    for (const auto& d : lay.devices) {
      t.emplace_back(d.u, d.u, 1.0);
      t.emplace_back(d.u, d.up, -d.orientation);
      t.emplace_back(d.u, d.um, d.orientation);
      if (lay.v[d.reg_bus] >= 0) {
        t.emplace_back(d.up, lay.v[d.reg_bus], 1.0);
        t.emplace_back(d.um, lay.v[d.reg_bus], -1.0);
      }
      t.emplace_back(d.up, d.sm, 1.0);
      t.emplace_back(d.um, d.sp, 1.0);
      t.emplace_back(d.sp, d.u, d.orientation > 0 ? 1.0 : -1.0);
      t.emplace_back(d.sm, d.u, d.orientation > 0 ? -1.0 : 1.0);
    }

    jac.resize(lay.n, lay.n);
    jac.setFromTriplets(t.begin(), t.end());
  }
};

std::string bus_label(const GridCase& g, int i) { return std::to_string(g.buses[i].id); }

}  // namespace

void apply_default_droop(GridCase& grid, double scale) {
  if (scale <= 0) fail("droop scale must be positive");
  for (Generator& g : grid.gens) {
    if (g.droop > 0) continue;
    const double basis =
        std::isfinite(g.p_max) && g.p_max > 0 ? g.p_max : std::max(std::abs(g.p_sp), 1.0);
    g.droop = scale * basis;
  }
}

Formulation assemble(const GridCase& grid_in, const RegulationConfig& config) {
  grid_in.validate();
  auto impl = std::make_shared<Assembly>();
  {
    GridCase copy = grid_in;
    if (config.frequency_control) apply_default_droop(copy, config.droop_default_scale);
    impl->grid = std::make_shared<const GridCase>(std::move(copy));
  }
  impl->config = config;
  const GridCase& g = *impl->grid;
  const int nb = static_cast<int>(g.buses.size());
  impl->gens_at = g.gens_by_bus();

  VariableLayout& lay = impl->lay;
  lay.delta.assign(nb, -1);
  lay.v.assign(nb, -1);
  lay.q_g.assign(g.gens.size(), -1);
  lay.p_g.assign(g.gens.size(), -1);

  std::vector<double> lo, hi;
  auto add = [&](const std::string& name, double l, double h) {
    lay.names.push_back(name);
    lo.push_back(l);
    hi.push_back(h);
    return static_cast<int>(lay.names.size()) - 1;
  };

  for (int i = 0; i < nb; ++i) {
    if (i == g.slack) continue;
    lay.delta[i] = add("delta(bus " + bus_label(g, i) + ")", -kInf, kInf);
  }
  for (int i = 0; i < nb; ++i) {
    if (g.buses[i].type == BusType::PQ) {
      lay.v[i] = add("v(bus " + bus_label(g, i) + ")", -kInf, kInf);
    }
  }
  if (config.gen_voltage_control) {
    for (int i = 0; i < nb; ++i) {
      if (g.buses[i].type != BusType::PV) continue;
      lay.v[i] = add("v(bus " + bus_label(g, i) + ")", -kInf, kInf);
      for (int k : impl->gens_at[i]) {
        lay.q_g[k] = add("q_g(gen " + std::to_string(g.gens[k].id) + ")", g.gens[k].q_min,
                         g.gens[k].q_max);
      }
    }
  }

  std::unordered_set<int> seen_taps, seen_shunts;
  auto add_device = [&](VariableLayout::Device d, const std::string& tag) {
    if (!std::isfinite(d.lo) || !std::isfinite(d.hi)) {
      fail(g.name + ": " + tag + " has no usable bounds");
    }
    if (d.lo >= d.hi) {
      fail(g.name + ": " + tag + " bounds are degenerate; omit the device instead");
    }
    if (d.set_point < d.lo || d.set_point > d.hi) {
      fail(g.name + ": " + tag + " set point outside its bounds");
    }
    d.u = add("u(" + tag + ")", -kInf, kInf);
    d.up = add("u+(" + tag + ")", 0, kInf);
    d.um = add("u-(" + tag + ")", 0, kInf);
    d.sp = add("s+(" + tag + ")", 0, kInf);
    d.sm = add("s-(" + tag + ")", 0, kInf);
    lay.devices.push_back(d);
  };
  for (int e : config.tap_devices) {
    if (e < 0 || e >= static_cast<int>(g.branches.size())) fail(g.name + ": tap device index out of range");
    if (!seen_taps.insert(e).second) fail(g.name + ": duplicate tap device");
    const Branch& br = g.branches[e];
    VariableLayout::Device d;
    d.branch = e;
    d.reg_bus = br.regulated_bus >= 0 ? br.regulated_bus : br.to;
    d.lo = br.tap_min;
    d.hi = br.tap_max;
    d.set_point = br.tap;
    add_device(d, "branch " + std::to_string(br.id));
  }
  for (int s : config.shunt_devices) {
    if (s < 0 || s >= static_cast<int>(g.shunts.size())) fail(g.name + ": shunt device index out of range");
    if (!seen_shunts.insert(s).second) fail(g.name + ": duplicate shunt device");
    const SwitchedShunt& sh = g.shunts[s];
    VariableLayout::Device d;
    d.shunt = s;
    d.reg_bus = sh.bus;
    d.lo = sh.b_min;
    d.hi = sh.b_max;
    d.set_point = sh.b_sp;
    add_device(d, "shunt bus " + bus_label(g, sh.bus));
  }

  if (config.frequency_control) {
    lay.delta_f = add("delta_f", -kInf, kInf);
    int eligible = 0;
    for (size_t k = 0; k < g.gens.size(); ++k) {
      const BusType bt = g.buses[g.gens[k].bus].type;
      if (bt == BusType::PV || bt == BusType::Slack) {
        lay.p_g[k] = add("p_g(gen " + std::to_string(g.gens[k].id) + ")", g.gens[k].p_min,
                         g.gens[k].p_max);
        ++eligible;
      }
    }
    if (eligible == 0) fail(g.name + ": frequency control with no eligible generator");
  }
  lay.n = static_cast<int>(lay.names.size());
  impl->base = parameter_base(g);

  Formulation f;
  f.grid = impl->grid;
  f.config = config;
  f.layout = lay;  // provisional; orientation patched below

  // Device orientation: sign of dv_reg/d(device), taken from the reactive
  // balance entry at the regulated bus (the voltage stiffness dQ/dv is
  // negative, so the signs of dv/du and dQ_res/du agree).
  if (!lay.devices.empty()) {
    bool any_tap = false;
    for (const auto& d : lay.devices) any_tap |= d.branch >= 0;
    SparseMat jt;
    if (any_tap) jt = pf_jacobian(g, impl->base, Wrt::tap);
    for (auto& d : impl->lay.devices) {
      if (d.branch < 0) continue;  // shunts inject +v^2 into Q: always positive
      const Branch& br = g.branches[d.branch];
      double entry = 0;
      for (SparseMat::InnerIterator it(jt, d.branch); it; ++it) {
        if (it.row() == nb + d.reg_bus) entry = it.value();
      }
      if (entry == 0) {
        if (d.reg_bus == br.from || d.reg_bus == br.to) {
          fail(g.name + ": branch " + std::to_string(br.id) +
               " has no electrical coupling to its regulated bus");
        }
        continue;  // remote regulation: keep the positive default
      }
      d.orientation = entry > 0 ? 1.0 : -1.0;
    }
    f.layout = impl->lay;
  }

  MCPProblem& p = f.problem;
  p.bounds.lower = Eigen::Map<const Eigen::VectorXd>(lo.data(), lo.size());
  p.bounds.upper = Eigen::Map<const Eigen::VectorXd>(hi.data(), hi.size());
  p.names = lay.names;
  p.residual = [impl](const Eigen::VectorXd& x, Eigen::VectorXd& out) {
    impl->residual(x, out);
  };
  p.jacobian = [impl](const Eigen::VectorXd& x, SparseMat& out) { impl->jacobian(x, out); };
  p.bounds.validate();
  return f;
}

Eigen::VectorXd initial_point(const Formulation& f, const GridState* warm) {
  const GridCase& g = *f.grid;
  const VariableLayout& lay = f.layout;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(lay.n);
  for (size_t i = 0; i < g.buses.size(); ++i) {
    if (lay.delta[i] >= 0) x[lay.delta[i]] = warm ? warm->delta[i] : 0.0;
    // Flat start is 1.0 everywhere; seeding PV buses at their set points
    // instead creates artificial voltage gradients that derail the first
    // linearized subproblem on large cases.
    if (lay.v[i] >= 0) x[lay.v[i]] = warm ? warm->v[i] : 1.0;
  }
  for (size_t k = 0; k < g.gens.size(); ++k) {
    const Generator& gen = g.gens[k];
    if (lay.q_g[k] >= 0) {
      if (warm) {
        x[lay.q_g[k]] = warm->q_g[k];
      } else if (std::isfinite(gen.q_min) && std::isfinite(gen.q_max)) {
        x[lay.q_g[k]] = 0.5 * (gen.q_min + gen.q_max);
      } else {
        x[lay.q_g[k]] = std::clamp(0.0, gen.q_min, gen.q_max);
      }
    }
    if (lay.p_g[k] >= 0) {
      x[lay.p_g[k]] = warm ? warm->p_g[k] : std::clamp(gen.p_sp, gen.p_min, gen.p_max);
    }
  }
  for (const auto& d : lay.devices) {
    const double u =
        warm ? (d.branch >= 0 ? warm->tap[d.branch] : warm->b_switched[d.shunt]) : d.set_point;
    x[d.u] = u;
    const double drift = d.orientation * (u - d.set_point);
    x[d.up] = std::max(drift, 0.0);
    x[d.um] = std::max(-drift, 0.0);
    x[d.sp] = 0;
    x[d.sm] = 0;
  }
  if (lay.delta_f >= 0) x[lay.delta_f] = warm ? warm->delta_f : 0.0;
  return x;
}

GridState state_from_x(const Formulation& f, const Eigen::VectorXd& x) {
  const GridCase& g = *f.grid;
  const VariableLayout& lay = f.layout;
  // Re-scatter through a scratch assembly-equivalent path.
  GridState st;
  {
    Assembly tmp;  // only scatter() is used
    tmp.grid = f.grid;
    tmp.lay = lay;
    tmp.base = parameter_base(g);
    st = tmp.scatter(x);
  }
  // Complete generator outputs that are not solver variables from the bus
  // balance, splitting equally among the bus's generators.
  Eigen::VectorXd p, q;
  pf_residual(g, st, p, q);
  const auto gens_at = g.gens_by_bus();
  for (size_t i = 0; i < g.buses.size(); ++i) {
    if (gens_at[i].empty()) continue;
    const double m = static_cast<double>(gens_at[i].size());
    if (g.buses[i].type != BusType::PQ && lay.v[i] < 0) {
      for (int k : gens_at[i]) st.q_g[k] -= q[i] / m;  // no Q row pins these
    }
    const bool p_row_present =
        lay.delta[i] >= 0 || (static_cast<int>(i) == g.slack && lay.delta_f >= 0);
    if (!p_row_present) {
      for (int k : gens_at[i]) st.p_g[k] -= p[i] / m;
    }
  }
  return st;
}

RegulationReport regulation_summary(const Formulation& f, const Eigen::VectorXd& x,
                                    double tol) {
  const GridCase& g = *f.grid;
  const VariableLayout& lay = f.layout;
  const GridState st = state_from_x(f, x);
  RegulationReport rep;
  rep.delta_f = st.delta_f;
  rep.frequency_hz = kNominalHz * (1.0 + st.delta_f);

  const auto gens_at = g.gens_by_bus();
  for (size_t i = 0; i < g.buses.size(); ++i) {
    if (!gens_at[i].empty()) {
      rep.max_v_dev = std::max(rep.max_v_dev, std::abs(st.v[i] - g.buses[i].v_sp));
    }
    const Bus& b = g.buses[i];
    double viol = 0;
    if (st.v[i] < b.v_min - tol) viol = b.v_min - st.v[i];
    if (st.v[i] > b.v_max + tol) viol = st.v[i] - b.v_max;
    if (viol > 0) {
      ++rep.violation_count;
      rep.max_violation = std::max(rep.max_violation, viol);
      char buf[96];
      std::snprintf(buf, sizeof buf, "bus %d: v=%.4f outside [%.4f, %.4f]", b.id, st.v[i],
                    b.v_min, b.v_max);
      rep.violations.emplace_back(buf);
    }
  }

  auto at_bound = [&](double val, double lo, double hi) {
    return (std::isfinite(lo) && val <= lo + tol * (1 + std::abs(lo))) ||
           (std::isfinite(hi) && val >= hi - tol * (1 + std::abs(hi)));
  };
  for (size_t k = 0; k < g.gens.size(); ++k) {
    if (lay.q_g[k] >= 0 && at_bound(x[lay.q_g[k]], g.gens[k].q_min, g.gens[k].q_max)) {
      ++rep.devices_at_bounds;
    }
    if (lay.p_g[k] >= 0 && at_bound(x[lay.p_g[k]], g.gens[k].p_min, g.gens[k].p_max)) {
      ++rep.devices_at_bounds;
    }
  }
  for (const auto& d : lay.devices) {
    if (at_bound(x[d.u], d.lo, d.hi)) ++rep.devices_at_bounds;
  }
  return rep;
}

std::vector<int> magnitude_indices(const Formulation& f) {
  std::vector<int> idx;
  for (size_t i = 0; i < f.grid->buses.size(); ++i) {
    if (f.layout.v[i] >= 0) idx.push_back(f.layout.v[i]);
  }
  for (const auto& d : f.layout.devices) {
    if (d.branch >= 0) idx.push_back(d.u);  // taps divide admittance entries
  }
  return idx;
}

SolveReport solve_grid(const GridCase& grid, const RegulationConfig& config,
                       const SolverOptions& opts, const GridState* warm,
                       GridState* out_state) {
  const Formulation f = assemble(grid, config);
  const Eigen::VectorXd x0 = initial_point(f, warm);
  SolverOptions o = opts;
  o.magnitude_indices = magnitude_indices(f);
  SolveReport rep = solve_mcp(f.problem, x0, o);
  const RegulationReport reg = regulation_summary(f, rep.x);
  rep.regulation.max_voltage_deviation = reg.max_v_dev;
  rep.regulation.frequency_deviation = reg.delta_f;
  rep.regulation.binding_bounds = reg.devices_at_bounds;
  rep.regulation.max_bound_violation = reg.max_violation;
  if (out_state) *out_state = state_from_x(f, rep.x);
  return rep;
}

}  // namespace mcpflow

#include "mcpflow/grid.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>
#include <unordered_set>

namespace mcpflow {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }
}  // namespace

int GridCase::bus_index(int external_id) const {
  for (size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].id == external_id) return static_cast<int>(i);
  }
  return -1;
}

std::vector<std::vector<int>> GridCase::gens_by_bus() const {
  std::vector<std::vector<int>> out(buses.size());
  for (size_t g = 0; g < gens.size(); ++g) out[gens[g].bus].push_back(static_cast<int>(g));
  return out;
}

void GridCase::validate() const {
  const int n = static_cast<int>(buses.size());
  if (n == 0) fail(name + ": no buses");
  std::unordered_set<int> ids;
  int slack_count = 0;
  for (const Bus& b : buses) {
    if (!ids.insert(b.id).second) fail(name + ": duplicate bus id " + std::to_string(b.id));
    if (b.type == BusType::Slack) ++slack_count;
    if (b.v_min > b.v_max) fail(name + ": bus " + std::to_string(b.id) + " has v_min > v_max");
  }
  if (slack_count == 0) fail(name + ": no slack bus");
  if (slack_count > 1) fail(name + ": multiple slack buses (one synchronized system expected)");
  if (slack < 0 || slack >= n || buses[slack].type != BusType::Slack) {
    fail(name + ": slack index inconsistent");
  }
  for (const Generator& g : gens) {
    if (g.bus < 0 || g.bus >= n) fail(name + ": generator references unknown bus");
    if (g.q_min > g.q_max) fail(name + ": generator q_min > q_max");
    if (g.p_min > g.p_max) fail(name + ": generator p_min > p_max");
    if (g.droop < 0) fail(name + ": negative droop gain");
  }
  for (const Branch& br : branches) {
    if (br.from < 0 || br.from >= n || br.to < 0 || br.to >= n) {
      fail(name + ": branch " + std::to_string(br.id) + " references unknown bus");
    }
    if (br.x == 0) fail(name + ": branch " + std::to_string(br.id) + " has zero reactance");
    if (br.tap <= 0) fail(name + ": branch " + std::to_string(br.id) + " has non-positive tap");
    if (br.tap_min > br.tap_max) fail(name + ": branch tap bounds out of order");
    if (br.regulated_bus < -1 || br.regulated_bus >= n) {
      fail(name + ": branch regulated bus out of range");
    }
  }
  for (const SwitchedShunt& s : shunts) {
    if (s.bus < 0 || s.bus >= n) fail(name + ": switched shunt references unknown bus");
    if (s.b_min > s.b_max) fail(name + ": switched shunt bounds out of order");
  }
  // Everything must live in the slack's island: Eq-type formulations assume
  // one synchronized system.
  std::vector<char> seen(n, 0);
  std::queue<int> frontier;
  frontier.push(slack);
  seen[slack] = 1;
  std::vector<std::vector<int>> adj(n);
  for (const Branch& br : branches) {
    adj[br.from].push_back(br.to);
    adj[br.to].push_back(br.from);
  }
  int reached = 0;
  while (!frontier.empty()) {
    const int i = frontier.front();
    frontier.pop();
    ++reached;
    for (int k : adj[i]) {
      if (!seen[k]) {
        seen[k] = 1;
        frontier.push(k);
      }
    }
  }
  if (reached != n) {
    fail(name + ": " + std::to_string(n - reached) +
         " bus(es) outside the slack's island; multi-island cases are not supported");
  }
}

GridState flat_state(const GridCase& grid) {
  const int n = static_cast<int>(grid.buses.size());
  GridState st;
  st.v = Eigen::VectorXd::Ones(n);
  st.delta = Eigen::VectorXd::Zero(n);
  if (grid.slack >= 0) st.delta[grid.slack] = grid.buses[grid.slack].delta0;
  st.p_g.resize(grid.gens.size());
  st.q_g.resize(grid.gens.size());
  for (size_t g = 0; g < grid.gens.size(); ++g) {
    const Generator& gen = grid.gens[g];
    st.p_g[g] = std::clamp(gen.p_sp, gen.p_min, gen.p_max);
    if (std::isfinite(gen.q_min) && std::isfinite(gen.q_max)) {
      st.q_g[g] = 0.5 * (gen.q_min + gen.q_max);
    } else {
      st.q_g[g] = std::clamp(0.0, gen.q_min, gen.q_max);
    }
  }
  st.tap.resize(grid.branches.size());
  for (size_t e = 0; e < grid.branches.size(); ++e) st.tap[e] = grid.branches[e].tap;
  st.b_switched.resize(grid.shunts.size());
  for (size_t s = 0; s < grid.shunts.size(); ++s) st.b_switched[s] = grid.shunts[s].b_sp;
  st.delta_f = 0;
  return st;
}

GridState case_state(const GridCase& grid) {
  GridState st = flat_state(grid);
  for (size_t i = 0; i < grid.buses.size(); ++i) {
    st.v[i] = grid.buses[i].v0;
    st.delta[i] = grid.buses[i].delta0;
  }
  for (size_t g = 0; g < grid.gens.size(); ++g) st.q_g[g] = grid.gens[g].q0;
  return st;
}

int AdmittanceModel::find(int row, int column) const {
  const int* first = col.data() + row_ptr[row];
  const int* last = col.data() + row_ptr[row + 1];
  const int* it = std::lower_bound(first, last, column);
  if (it == last || *it != column) return -1;
  return static_cast<int>(it - col.data());
}

namespace {

struct BranchY {
  double gff, bff, gft, bft, gtf, btf, gtt, btt;
};

BranchY branch_admittance(const Branch& br, double u) {
  const double den = br.r * br.r + br.x * br.x;
  const double gs = br.r / den;
  const double bs = -br.x / den;
  const double c = std::cos(br.shift), s = std::sin(br.shift);
  BranchY y;
  y.gtt = gs;
  y.btt = bs + 0.5 * br.b_charge;
  y.gff = y.gtt / (u * u);
  y.bff = y.btt / (u * u);
  // Yft = -ys e^{+j shift} / u, Ytf = -ys e^{-j shift} / u.
  y.gft = -(gs * c - bs * s) / u;
  y.bft = -(gs * s + bs * c) / u;
  y.gtf = -(gs * c + bs * s) / u;
  y.btf = -(bs * c - gs * s) / u;
  return y;
}

}  // namespace

TapDerivatives tap_derivatives(const Branch& br, double tap) {
  const BranchY y = branch_admittance(br, tap);
  TapDerivatives d;
  d.dgff = -2.0 * y.gff / tap;
  d.dbff = -2.0 * y.bff / tap;
  d.dgft = -y.gft / tap;
  d.dbft = -y.bft / tap;
  d.dgtf = -y.gtf / tap;
  d.dbtf = -y.btf / tap;
  return d;
}

AdmittanceModel build_admittance(const GridCase& grid, const GridState& state) {
  const int n = static_cast<int>(grid.buses.size());
  if (state.v.size() != n || state.tap.size() != static_cast<Eigen::Index>(grid.branches.size()) ||
      state.b_switched.size() != static_cast<Eigen::Index>(grid.shunts.size())) {
    fail(grid.name + ": state dimensions do not match the case");
  }
  AdmittanceModel m;
  m.n = n;
  std::vector<std::vector<int>> nbr(n);
  for (int i = 0; i < n; ++i) nbr[i].push_back(i);
  for (const Branch& br : grid.branches) {
    nbr[br.from].push_back(br.to);
    nbr[br.to].push_back(br.from);
  }
  m.row_ptr.assign(n + 1, 0);
  for (int i = 0; i < n; ++i) {
    auto& row = nbr[i];
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
    m.row_ptr[i + 1] = m.row_ptr[i] + static_cast<int>(row.size());
  }
  m.col.resize(m.row_ptr[n]);
  for (int i = 0; i < n; ++i) {
    std::copy(nbr[i].begin(), nbr[i].end(), m.col.begin() + m.row_ptr[i]);
  }
  m.g = Eigen::VectorXd::Zero(m.row_ptr[n]);
  m.b = Eigen::VectorXd::Zero(m.row_ptr[n]);

  m.branch_slots.resize(grid.branches.size());
  for (size_t e = 0; e < grid.branches.size(); ++e) {
    const Branch& br = grid.branches[e];
    const BranchY y = branch_admittance(br, state.tap[e]);
    auto& slots = m.branch_slots[e];
    slots.ff = m.find(br.from, br.from);
    slots.ft = m.find(br.from, br.to);
    slots.tf = m.find(br.to, br.from);
    slots.tt = m.find(br.to, br.to);
    m.g[slots.ff] += y.gff;
    m.b[slots.ff] += y.bff;
    m.g[slots.ft] += y.gft;
    m.b[slots.ft] += y.bft;
    m.g[slots.tf] += y.gtf;
    m.b[slots.tf] += y.btf;
    m.g[slots.tt] += y.gtt;
    m.b[slots.tt] += y.btt;
  }
  for (int i = 0; i < n; ++i) {
    const int d = m.find(i, i);
    m.g[d] += grid.buses[i].g_shunt;
    m.b[d] += grid.buses[i].b_shunt;
  }
  m.shunt_slots.resize(grid.shunts.size());
  for (size_t s = 0; s < grid.shunts.size(); ++s) {
    const int d = m.find(grid.shunts[s].bus, grid.shunts[s].bus);
    m.shunt_slots[s] = d;
    m.b[d] += state.b_switched[s];
  }
  return m;
}

namespace {

struct FlowEval {
  AdmittanceModel y;
  Eigen::VectorXd cosd, sind, pflow, qflow;
};

FlowEval evaluate_flows(const GridCase& grid, const GridState& state) {
  FlowEval ev;
  ev.y = build_admittance(grid, state);
  const int n = ev.y.n;
  ev.cosd.resize(n);
  ev.sind.resize(n);
  for (int i = 0; i < n; ++i) {
    ev.cosd[i] = std::cos(state.delta[i]);
    ev.sind[i] = std::sin(state.delta[i]);
    if (!std::isfinite(state.delta[i]) || !std::isfinite(state.v[i])) {
      fail(grid.name + ": non-finite state entry");
    }
  }
  ev.pflow.resize(n);
  ev.qflow.resize(n);
  kernels::active().pf_flows(ev.y.view(), state.v.data(), ev.cosd.data(), ev.sind.data(),
                             ev.pflow.data(), ev.qflow.data());
  return ev;
}

void injections(const GridCase& grid, const GridState& state, Eigen::VectorXd& p,
                Eigen::VectorXd& q) {
  const int n = static_cast<int>(grid.buses.size());
  p.resize(n);
  q.resize(n);
  for (int i = 0; i < n; ++i) {
    p[i] = -grid.buses[i].p_load;
    q[i] = -grid.buses[i].q_load;
  }
  for (size_t g = 0; g < grid.gens.size(); ++g) {
    p[grid.gens[g].bus] += state.p_g[g];
    q[grid.gens[g].bus] += state.q_g[g];
  }
}

}  // namespace

void pf_residual(const GridCase& grid, const GridState& state, Eigen::VectorXd& p,
                 Eigen::VectorXd& q) {
  const FlowEval ev = evaluate_flows(grid, state);
  injections(grid, state, p, q);
  p -= ev.pflow;
  q -= ev.qflow;
}

SparseMat pf_jacobian(const GridCase& grid, const GridState& state, Wrt wrt) {
  const int n = static_cast<int>(grid.buses.size());
  const int ng = static_cast<int>(grid.gens.size());
  const int ne = static_cast<int>(grid.branches.size());
  const int ns = static_cast<int>(grid.shunts.size());
  std::vector<Eigen::Triplet<double>> t;

  auto trig_pair = [&](const FlowEval& ev, int i, int k, int slot, double& a, double& b) {
    // a = G cos(d_i - d_k) + B sin(d_i - d_k), b = G sin - B cos.
    const double cik = ev.cosd[i] * ev.cosd[k] + ev.sind[i] * ev.sind[k];
    const double sik = ev.sind[i] * ev.cosd[k] - ev.cosd[i] * ev.sind[k];
    a = ev.y.g[slot] * cik + ev.y.b[slot] * sik;
    b = ev.y.g[slot] * sik - ev.y.b[slot] * cik;
  };

  int cols = 0;
  switch (wrt) {
    case Wrt::delta:
    case Wrt::v: {
      cols = n;
      const FlowEval ev = evaluate_flows(grid, state);
      for (int i = 0; i < n; ++i) {
        for (int slot = ev.y.row_ptr[i]; slot < ev.y.row_ptr[i + 1]; ++slot) {
          const int k = ev.y.col[slot];
          const double vi = state.v[i], vk = state.v[k];
          if (k == i) {
            const int d = slot;
            if (wrt == Wrt::delta) {
              // dP_i/dd_i = Qflow_i + v_i^2 B_ii; dQ_i/dd_i = -Pflow_i + v_i^2 G_ii
              t.emplace_back(i, i, ev.qflow[i] + vi * vi * ev.y.b[d]);
              t.emplace_back(n + i, i, -ev.pflow[i] + vi * vi * ev.y.g[d]);
            } else {
              t.emplace_back(i, i, -(ev.pflow[i] / vi + vi * ev.y.g[d]));
              t.emplace_back(n + i, i, -(ev.qflow[i] / vi - vi * ev.y.b[d]));
            }
          } else {
            double a, b;
            trig_pair(ev, i, k, slot, a, b);
            if (wrt == Wrt::delta) {
              t.emplace_back(i, k, -vi * vk * b);
              t.emplace_back(n + i, k, vi * vk * a);
            } else {
              t.emplace_back(i, k, -vi * a);
              t.emplace_back(n + i, k, -vi * b);
            }
          }
        }
      }
      break;
    }
    case Wrt::p_g:
      cols = ng;
      for (int g = 0; g < ng; ++g) t.emplace_back(grid.gens[g].bus, g, 1.0);
      break;
    case Wrt::q_g:
      cols = ng;
      for (int g = 0; g < ng; ++g) t.emplace_back(n + grid.gens[g].bus, g, 1.0);
      break;
    case Wrt::tap: {
      cols = ne;
      const FlowEval ev = evaluate_flows(grid, state);
      for (int e = 0; e < ne; ++e) {
        const Branch& br = grid.branches[e];
        const TapDerivatives d = tap_derivatives(br, state.tap[e]);
        const int f = br.from, to = br.to;
        const double vf = state.v[f], vt = state.v[to];
        const double cft = ev.cosd[f] * ev.cosd[to] + ev.sind[f] * ev.sind[to];
        const double sft = ev.sind[f] * ev.cosd[to] - ev.cosd[f] * ev.sind[to];
        // theta_tf = -theta_ft
        const double ctf = cft, stf = -sft;
        const double dpf = vf * vf * d.dgff + vf * vt * (d.dgft * cft + d.dbft * sft);
        const double dqf = -vf * vf * d.dbff + vf * vt * (d.dgft * sft - d.dbft * cft);
        const double dpt = vt * vf * (d.dgtf * ctf + d.dbtf * stf);
        const double dqt = vt * vf * (d.dgtf * stf - d.dbtf * ctf);
        t.emplace_back(f, e, -dpf);
        t.emplace_back(n + f, e, -dqf);
        t.emplace_back(to, e, -dpt);
        t.emplace_back(n + to, e, -dqt);
      }
      break;
    }
    case Wrt::shunt:
      cols = ns;
      for (int s = 0; s < ns; ++s) {
        const double vi = state.v[grid.shunts[s].bus];
        t.emplace_back(n + grid.shunts[s].bus, s, vi * vi);
      }
      break;
    case Wrt::delta_f:
      cols = 1;
      break;
  }

  SparseMat jac(2 * n, cols);
  jac.setFromTriplets(t.begin(), t.end());
  return jac;
}

}  // namespace mcpflow

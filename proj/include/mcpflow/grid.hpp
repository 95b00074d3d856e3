#pragma once

#include "mcpflow/kernels.hpp"
#include "mcpflow/mcp.hpp"

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <limits>
#include <string>
#include <vector>

namespace mcpflow {

enum class BusType { PQ = 1, PV = 2, Slack = 3 };

// All electrical quantities are per-unit on the system MVA base; angles are
// radians. Physical units appear only in matpower_io.
struct Bus {
  int id = 0;  // external number from the case file
  BusType type = BusType::PQ;
  double p_load = 0, q_load = 0;
  double g_shunt = 0, b_shunt = 0;  // fixed shunt admittance
  double v_sp = 1.0;                // regulation target (generator VG)
  double v_min = 0.9, v_max = 1.1;
  double base_kv = 0;
  double v0 = 1.0, delta0 = 0;  // case-file operating point
};

struct Generator {
  int id = 0;   // 1-based row in the original gen table
  int bus = 0;  // internal bus index
  double p_sp = 0;
  double q0 = 0;
  double q_min = -std::numeric_limits<double>::infinity();
  double q_max = std::numeric_limits<double>::infinity();
  double p_min = 0;
  double p_max = std::numeric_limits<double>::infinity();
  double v_sp = 1.0;
  double droop = 0;  // nu >= 0; response p_g = p_sp - nu * delta_f
};

struct Branch {
  int id = 0;  // 1-based row in the original branch table
  int from = 0, to = 0;
  double r = 0, x = 0, b_charge = 0;
  double tap = 1.0;  // set point, from-side winding
  double shift = 0;  // radians
  double tap_min = 1.0, tap_max = 1.0;
  int regulated_bus = -1;  // internal index; defaults to the to-side bus
  bool transformer = false;
};

struct SwitchedShunt {
  int bus = 0;  // internal index
  double b_sp = 0, b_min = 0, b_max = 0;
};

struct GridCase {
  std::string name;
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Generator> gens;
  std::vector<Branch> branches;
  std::vector<SwitchedShunt> shunts;
  int slack = -1;  // internal bus index

  int bus_index(int external_id) const;  // -1 when unknown
  std::vector<std::vector<int>> gens_by_bus() const;
  // Structural checks: references, slack presence/uniqueness, nonzero series
  // reactance, positive taps, ordered bounds, single connected island.
  void validate() const;
};

struct GridState {
  Eigen::VectorXd v, delta;   // per bus
  Eigen::VectorXd p_g, q_g;   // per generator
  Eigen::VectorXd tap;        // per branch
  Eigen::VectorXd b_switched; // per switched shunt
  double delta_f = 0;
};

// v = 1 everywhere, angles zero except the slack's case-file angle, taps and
// shunts at set points, q_g at clamped mid-bounds, p_g at set points.
GridState flat_state(const GridCase& grid);

// Operating point as given in the case file (VM/VA/PG/QG columns).
GridState case_state(const GridCase& grid);

// Bus-admittance values on a fixed CSR pattern (graph adjacency + diagonal),
// plus the slot bookkeeping needed for tap/shunt derivatives.
struct AdmittanceModel {
  int n = 0;
  std::vector<int> row_ptr, col;
  Eigen::VectorXd g, b;
  struct BranchSlots {
    int ff, ft, tf, tt;
  };
  std::vector<BranchSlots> branch_slots;  // per branch
  std::vector<int> shunt_slots;           // diagonal slot per switched shunt

  kernels::AdmittanceView view() const {
    return {n, row_ptr.data(), col.data(), g.data(), b.data()};
  }
  int find(int row, int column) const;  // nnz slot, -1 when absent
};

AdmittanceModel build_admittance(const GridCase& grid, const GridState& state);

// Complex entry derivatives of one branch's four admittance slots with
// respect to its tap ratio, at the given tap value.
struct TapDerivatives {
  double dgff, dbff, dgft, dbft, dgtf, dbtf;  // dYtt/du = 0
};
TapDerivatives tap_derivatives(const Branch& br, double tap);

// Net injection residuals of the full bus set:
//   P_i = sum(p_g at i) - P_load_i - v_i sum_k v_k (G cos + B sin),
//   Q_i = sum(q_g at i) - Q_load_i - v_i sum_k v_k (G sin - B cos).
void pf_residual(const GridCase& grid, const GridState& state, Eigen::VectorXd& p,
                 Eigen::VectorXd& q);

enum class Wrt { delta, v, p_g, q_g, tap, shunt, delta_f };

// Rows ordered (P_0..P_{n-1}, Q_0..Q_{n-1}); columns follow the block named by
// wrt. Sparsity pattern depends only on the topology.
SparseMat pf_jacobian(const GridCase& grid, const GridState& state, Wrt wrt);

}  // namespace mcpflow

// Command-line driver: single solves, three-solver comparisons, cumulative
// generator-outage frequency sweeps, and tap/shunt bound-widening sweeps.
//
// Exit codes: 0 success (all requested solves converged, or a comparison /
// sweep table was produced), 1 input error, 2 nonconvergence (artifacts are
// still written).

#include "mcpflow/baselines.hpp"
#include "mcpflow/formulation.hpp"
#include "mcpflow/matpower.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

const std::vector<double> kDefaultWidths = {0.0, 0.05, 0.10, 0.15, 0.20};
constexpr double kDefaultSolveWidth = 0.20;

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunSpec {
  std::vector<std::string> cases;
  std::string sidecar;
  std::vector<std::string> controls;
  std::string solver = "mcp";
  double tol = 1e-8;
  int max_iter = -1;  // -1: solver default
  std::string warm_start;
  std::vector<int> outages;
  std::vector<double> widths;
  std::string format = "json";
  std::string out;
  bool verbose = false;
};

struct Controls {
  bool gen_voltage = false, taps = false, shunts = false, frequency = false;
};

Controls parse_controls(const std::vector<std::string>& items) {
  Controls c;
  for (const std::string& s : items) {
    if (s == "gen-voltage") {
      c.gen_voltage = true;
    } else if (s == "taps") {
      c.taps = true;
    } else if (s == "shunts") {
      c.shunts = true;
    } else if (s == "frequency") {
      c.frequency = true;
    } else {
      throw InputError("unknown control '" + s +
                       "' (expected gen-voltage, taps, shunts, frequency)");
    }
  }
  return c;
}

std::vector<std::string> control_names(const Controls& c) {
  std::vector<std::string> out;
  if (c.gen_voltage) out.push_back("gen-voltage");
  if (c.taps) out.push_back("taps");
  if (c.shunts) out.push_back("shunts");
  if (c.frequency) out.push_back("frequency");
  return out;
}

const char* status_name(mcpflow::SolveStatus s) {
  switch (s) {
    case mcpflow::SolveStatus::converged: return "converged";
    case mcpflow::SolveStatus::diverged: return "diverged";
    case mcpflow::SolveStatus::iteration_limit: return "iteration_limit";
    case mcpflow::SolveStatus::subproblem_failure: return "subproblem_failure";
  }
  return "unknown";
}

int thread_cap(int tasks) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("MCP_PF_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) hw = v;
  }
  return std::max(1, std::min(hw, tasks));
}

// Index-addressed work items; results land in caller-owned slots, so output
// is identical to a sequential run regardless of the thread count.
void run_parallel(int tasks, const std::function<void(int)>& fn) {
  const int t = thread_cap(tasks);
  if (t <= 1) {
    for (int i = 0; i < tasks; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (int k = 0; k < t; ++k) {
    pool.emplace_back([&] {
      for (int i; (i = next.fetch_add(1)) < tasks;) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

std::string timestamp_utc() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << text;
}

struct LoadedCase {
  mcpflow::GridCase grid;
  std::optional<double> droop_scale;
};

LoadedCase load_inputs(const std::string& case_path, const std::string& sidecar_path,
                       bool verbose) {
  mcpflow::ParseResult pr = mcpflow::load_case(case_path);
  for (const auto& w : pr.warnings) std::cerr << "warning: " << w << "\n";
  if (verbose) {
    for (const auto& n : pr.notes) std::cerr << "note: " << n << "\n";
  }
  LoadedCase lc{std::move(pr.grid), {}};
  if (!sidecar_path.empty()) {
    const mcpflow::SidecarEffects eff = mcpflow::load_sidecar(lc.grid, sidecar_path);
    lc.droop_scale = eff.droop_default_scale;
    if (verbose) {
      std::cerr << "sidecar: " << eff.taps << " tap ranges, " << eff.shunts
                << " shunt devices, " << eff.droops << " droop gains\n";
    }
  }
  return lc;
}

// Buses carrying fixed susceptance but no switched device get one seeded at
// the fixed value, so bound widening has a set point to scale around.
void promote_fixed_shunts(mcpflow::GridCase& g) {
  std::unordered_set<int> covered;
  for (const auto& sh : g.shunts) covered.insert(sh.bus);
  for (size_t i = 0; i < g.buses.size(); ++i) {
    if (g.buses[i].b_shunt == 0 || covered.count(static_cast<int>(i))) continue;
    mcpflow::SwitchedShunt sh;
    sh.bus = static_cast<int>(i);
    sh.b_sp = sh.b_min = sh.b_max = g.buses[i].b_shunt;
    g.shunts.push_back(sh);
    g.buses[i].b_shunt = 0;
  }
}

// Fractional widening around set points. `only_degenerate` preserves explicit
// sidecar ranges; sweeps override everything since width is the experiment
// parameter.
void widen_bounds(mcpflow::GridCase& g, const Controls& c, double width,
                  bool only_degenerate) {
  if (c.taps) {
    for (auto& br : g.branches) {
      if (!br.transformer) continue;
      if (only_degenerate && br.tap_min < br.tap_max) continue;
      br.tap_min = br.tap * (1.0 - width);
      br.tap_max = br.tap * (1.0 + width);
    }
  }
  if (c.shunts) {
    for (auto& sh : g.shunts) {
      if (only_degenerate && sh.b_min < sh.b_max) continue;
      const double a = sh.b_sp * (1.0 - width);
      const double b = sh.b_sp * (1.0 + width);
      sh.b_min = std::min(a, b);
      sh.b_max = std::max(a, b);
    }
  }
}

// Devices whose bounds stayed degenerate (width zero or zero set point) are
// left out of the layout; they hold their set points through the state.
mcpflow::RegulationConfig device_config(const mcpflow::GridCase& g, const Controls& c,
                                        std::optional<double> droop_scale) {
  mcpflow::RegulationConfig rc;
  rc.gen_voltage_control = c.gen_voltage;
  rc.frequency_control = c.frequency;
  if (droop_scale) rc.droop_default_scale = *droop_scale;
  if (c.taps) {
    for (size_t e = 0; e < g.branches.size(); ++e) {
      const auto& br = g.branches[e];
      if (br.transformer && br.tap_min < br.tap_max) {
        rc.tap_devices.push_back(static_cast<int>(e));
      }
    }
  }
  if (c.shunts) {
    for (size_t s = 0; s < g.shunts.size(); ++s) {
      if (g.shunts[s].b_min < g.shunts[s].b_max) {
        rc.shunt_devices.push_back(static_cast<int>(s));
      }
    }
  }
  return rc;
}

double solve_width(const RunSpec& spec) {
  if (spec.widths.empty()) return kDefaultSolveWidth;
  return *std::max_element(spec.widths.begin(), spec.widths.end());
}

struct Outcome {
  std::string solver;
  mcpflow::SolveStatus status = mcpflow::SolveStatus::diverged;
  bool ok = false;
  int iterations = 0;
  double residual = std::numeric_limits<double>::infinity();
  double wall = 0;
  double max_v_dev = 0;
  double delta_f = 0;
  int violation_count = 0;
  double max_violation = 0;
  int devices_at_bounds = 0;
  std::optional<double> q_order;
  std::vector<std::string> violations;
  mcpflow::GridState state;
};

Outcome run_mcp_like(const mcpflow::GridCase& g, const mcpflow::RegulationConfig& rc,
                     bool fb, double tol, int max_iter, const mcpflow::GridState* warm,
                     std::ostream* log) {
  Outcome o;
  o.solver = fb ? "fb" : "mcp";
  const mcpflow::Formulation f = mcpflow::assemble(g, rc);
  mcpflow::SolverOptions opts;
  opts.tol = tol;
  // The FB recast converges linearly near degenerate solutions (duplicate
  // generator rows), so give it more headroom than the piecewise-linear solver.
  if (fb) opts.max_iter = 200;
  if (max_iter > 0) opts.max_iter = max_iter;
  opts.log = log;
  opts.magnitude_indices = mcpflow::magnitude_indices(f);
  const Eigen::VectorXd x0 = mcpflow::initial_point(f, warm);
  const mcpflow::SolveReport rep =
      fb ? mcpflow::fb_solve(f.problem, x0, opts) : mcpflow::solve_mcp(f.problem, x0, opts);
  o.status = rep.status;
  o.ok = rep.converged();
  o.iterations = rep.iterations;
  o.residual = rep.residual_inf;
  o.wall = rep.wall_time_sec;
  o.q_order = rep.q_order_estimate;
  const mcpflow::RegulationReport reg = mcpflow::regulation_summary(f, rep.x);
  o.max_v_dev = reg.max_v_dev;
  o.delta_f = reg.delta_f;
  o.violation_count = reg.violation_count;
  o.max_violation = reg.max_violation;
  o.devices_at_bounds = reg.devices_at_bounds;
  o.violations = reg.violations;
  o.state = mcpflow::state_from_x(f, rep.x);
  return o;
}

Outcome run_nr(const mcpflow::GridCase& g, double tol, int max_iter,
               const mcpflow::GridState* warm, std::ostream* log) {
  Outcome o;
  o.solver = "nr";
  mcpflow::NrOptions opts;
  opts.tol = tol;
  if (max_iter > 0) opts.max_inner_iter = max_iter;
  opts.start = warm;
  opts.log = log;
  const mcpflow::NrReport rep = mcpflow::nr_pv_pq(g, opts);
  o.status = rep.status;
  o.ok = rep.converged();
  o.iterations = rep.inner_iterations;
  o.residual = rep.residual_inf;
  o.wall = rep.wall_time_sec;
  o.max_v_dev = rep.max_v_dev;
  o.state = rep.state;
  for (size_t i = 0; i < g.buses.size(); ++i) {
    const auto& b = g.buses[i];
    const double v = rep.state.v.size() ? rep.state.v[static_cast<int>(i)] : b.v0;
    double viol = 0;
    if (v < b.v_min - 1e-7) viol = b.v_min - v;
    if (v > b.v_max + 1e-7) viol = v - b.v_max;
    if (viol > 0) {
      ++o.violation_count;
      o.max_violation = std::max(o.max_violation, viol);
      char buf[96];
      std::snprintf(buf, sizeof buf, "bus %d: v=%.4f outside [%.4f, %.4f]", b.id, v, b.v_min,
                    b.v_max);
      o.violations.emplace_back(buf);
    }
  }
  for (mcpflow::BusMode m : rep.modes) {
    if (m != mcpflow::BusMode::pv) ++o.devices_at_bounds;
  }
  return o;
}

Outcome run_solver(const mcpflow::GridCase& g, const Controls& c,
                   std::optional<double> droop_scale, const std::string& solver,
                   const RunSpec& spec, const mcpflow::GridState* warm, std::ostream* log) {
  if (solver == "nr") {
    if (c.taps || c.shunts || c.frequency) {
      throw InputError("solver 'nr' supports gen-voltage control only");
    }
    return run_nr(g, spec.tol, spec.max_iter, warm, log);
  }
  const mcpflow::RegulationConfig rc = device_config(g, c, droop_scale);
  return run_mcp_like(g, rc, solver == "fb", spec.tol, spec.max_iter, warm, log);
}

std::string summary_line(const std::string& name, const Outcome& o, bool frequency) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s %s %s iter=%d time=%.3fs max|v-v_sp|=%.3e resid=%.2e",
                name.c_str(), o.solver.c_str(), status_name(o.status), o.iterations, o.wall,
                o.max_v_dev, o.residual);
  std::string line = buf;
  if (frequency) line += " f=" + mcpflow::frequency_hz_label(o.delta_f);
  if (o.violation_count > 0) {
    line += " violations=" + std::to_string(o.violation_count);
  }
  return line;
}

mcpflow::SolutionMeta meta_from(const Outcome& o) {
  mcpflow::SolutionMeta m;
  m.solver = o.solver;
  m.status = status_name(o.status);
  m.iterations = o.iterations;
  m.residual_inf = o.residual;
  m.wall_time_sec = o.wall;
  m.q_order = o.q_order;
  m.max_v_dev = o.max_v_dev;
  m.delta_f = o.delta_f;
  m.devices_at_bounds = o.devices_at_bounds;
  m.violations = o.violations;
  return m;
}

// ---------------------------------------------------------------------------
// solve

int cmd_solve(const RunSpec& spec) {
  if (spec.cases.size() != 1) throw InputError("solve needs exactly one --case");
  const Controls c =
      spec.controls.empty() ? parse_controls({"gen-voltage"}) : parse_controls(spec.controls);

  LoadedCase lc = load_inputs(spec.cases[0], spec.sidecar, spec.verbose);
  if (c.shunts) promote_fixed_shunts(lc.grid);
  widen_bounds(lc.grid, c, solve_width(spec), /*only_degenerate=*/true);

  // Solves start from the case operating point (its VM/VA/QG columns); a
  // --warm-start artifact replaces that seed.
  mcpflow::GridState warm = mcpflow::case_state(lc.grid);
  if (!spec.warm_start.empty()) {
    warm = mcpflow::read_solution_state(lc.grid, read_file(spec.warm_start));
  }

  const Outcome o = run_solver(lc.grid, c, lc.droop_scale, spec.solver, spec, &warm,
                               spec.verbose ? &std::cerr : nullptr);

  std::cout << summary_line(lc.grid.name, o, c.frequency) << "\n";
  if (spec.verbose) {
    for (const auto& v : o.violations) std::cerr << "violation: " << v << "\n";
  }
  if (!spec.out.empty()) {
    const auto fmt = spec.format == "csv" ? mcpflow::SolutionFormat::csv
                                          : mcpflow::SolutionFormat::json;
    write_file(spec.out, mcpflow::write_solution(lc.grid, o.state, meta_from(o), fmt));
  }
  return o.ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// compare

struct Cell {
  bool ran = false;    // false: not applicable (solver cannot express the controls)
  bool failed = false; // ran but did not converge, or threw mid-solve
  std::string error;
  Outcome o;
};

int cmd_compare(const RunSpec& spec) {
  if (spec.cases.empty()) {
    std::cout << "case nr mcp fb\n";
    if (!spec.out.empty()) {
      ordered_json doc;
      doc["schema"] = "pfmcp-compare/1";
      doc["metadata"] = {{"generated_at", timestamp_utc()}};
      doc["cases"] = ordered_json::array();
      write_file(spec.out, doc.dump(2) + "\n");
    }
    return 0;
  }
  const Controls c =
      spec.controls.empty() ? parse_controls({"gen-voltage"}) : parse_controls(spec.controls);
  const bool nr_applicable = !(c.taps || c.shunts || c.frequency);

  std::vector<LoadedCase> loaded;
  loaded.reserve(spec.cases.size());
  for (const auto& path : spec.cases) {
    LoadedCase lc = load_inputs(path, spec.sidecar, spec.verbose);
    if (c.shunts) promote_fixed_shunts(lc.grid);
    widen_bounds(lc.grid, c, solve_width(spec), /*only_degenerate=*/true);
    loaded.push_back(std::move(lc));
  }

  const std::vector<std::string> solvers = {"nr", "mcp", "fb"};
  const int tasks = static_cast<int>(loaded.size() * solvers.size());
  std::vector<Cell> cells(tasks);
  run_parallel(tasks, [&](int t) {
    const auto& lc = loaded[t / 3];
    const std::string& sv = solvers[t % 3];
    Cell& cell = cells[t];
    if (sv == "nr" && !nr_applicable) return;  // stays "n/a"
    try {
      const mcpflow::GridState warm = mcpflow::case_state(lc.grid);
      cell.o = run_solver(lc.grid, c, lc.droop_scale, sv, spec, &warm, nullptr);
      cell.ran = true;
      cell.failed = !cell.o.ok;
    } catch (const std::exception& e) {
      cell.ran = true;
      cell.failed = true;
      cell.error = e.what();
    }
  });

  auto cell_text = [](const Cell& cell) -> std::string {
    if (!cell.ran) return "n/a";
    if (cell.failed && cell.error.empty()) return "f";
    if (cell.failed) return "f(" + cell.error + ")";
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d/%.3fs/%.3e", cell.o.iterations, cell.o.wall,
                  cell.o.max_v_dev);
    return buf;
  };

  std::cout << "case  [iter/time/max|v-v_sp| per solver]\n";
  for (size_t i = 0; i < loaded.size(); ++i) {
    std::cout << loaded[i].grid.name;
    for (size_t s = 0; s < solvers.size(); ++s) {
      std::cout << "  " << solvers[s] << "=" << cell_text(cells[i * 3 + s]);
    }
    std::cout << "\n";
  }

  if (!spec.out.empty()) {
    ordered_json timings = ordered_json::object();
    ordered_json rows = ordered_json::array();
    for (size_t i = 0; i < loaded.size(); ++i) {
      ordered_json row;
      row["case"] = loaded[i].grid.name;
      ordered_json res = ordered_json::object();
      ordered_json tim = ordered_json::object();
      for (size_t s = 0; s < solvers.size(); ++s) {
        const Cell& cell = cells[i * 3 + s];
        ordered_json cj;
        if (!cell.ran) {
          cj["mark"] = "n/a";
        } else if (cell.failed) {
          cj["mark"] = "f";
          cj["status"] = cell.error.empty() ? status_name(cell.o.status) : "error";
          if (!cell.error.empty()) cj["error"] = cell.error;
          cj["iterations"] = cell.o.iterations;
        } else {
          cj["mark"] = "";
          cj["status"] = status_name(cell.o.status);
          cj["iterations"] = cell.o.iterations;
          cj["max_v_dev"] = cell.o.max_v_dev;
          cj["residual_inf"] = cell.o.residual;
        }
        res[solvers[s]] = cj;
        tim[solvers[s]] = cell.ran ? cell.o.wall : 0.0;
      }
      row["results"] = res;
      rows.push_back(row);
      timings[loaded[i].grid.name] = tim;
    }
    if (spec.format == "csv") {
      std::ostringstream csv;
      csv << "case,solver,mark,status,iterations,max_v_dev,residual_inf,wall_time_sec\n";
      for (size_t i = 0; i < loaded.size(); ++i) {
        for (size_t s = 0; s < solvers.size(); ++s) {
          const Cell& cell = cells[i * 3 + s];
          csv << loaded[i].grid.name << ',' << solvers[s] << ',';
          if (!cell.ran) {
            csv << "n/a,,,,,\n";
            continue;
          }
          char buf[160];
          std::snprintf(buf, sizeof buf, "%s,%s,%d,%.17g,%.17g,%.17g\n",
                        cell.failed ? "f" : "", status_name(cell.o.status),
                        cell.o.iterations, cell.o.max_v_dev, cell.o.residual, cell.o.wall);
          csv << buf;
        }
      }
      write_file(spec.out, csv.str());
    } else {
      ordered_json doc;
      doc["schema"] = "pfmcp-compare/1";
      doc["metadata"] = {{"generated_at", timestamp_utc()}, {"wall_time_sec", timings}};
      doc["controls"] = control_names(c);
      doc["tol"] = spec.tol;
      doc["cases"] = rows;
      write_file(spec.out, doc.dump(2) + "\n");
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// outage-sweep

int cmd_outage_sweep(const RunSpec& spec) {
  if (spec.cases.size() != 1) throw InputError("outage-sweep needs exactly one --case");
  const Controls c = spec.controls.empty() ? parse_controls({"gen-voltage", "frequency"})
                                           : parse_controls(spec.controls);
  if (!c.frequency) throw InputError("outage-sweep requires the 'frequency' control");
  if (spec.solver == "nr") throw InputError("outage-sweep supports --solver mcp or fb");

  LoadedCase lc = load_inputs(spec.cases[0], spec.sidecar, spec.verbose);
  if (c.shunts) promote_fixed_shunts(lc.grid);
  widen_bounds(lc.grid, c, solve_width(spec), /*only_degenerate=*/true);
  const mcpflow::GridCase& base = lc.grid;

  std::unordered_map<int, const mcpflow::Generator*> by_id;
  for (const auto& g : base.gens) by_id[g.id] = &g;
  for (int id : spec.outages) {
    if (!by_id.count(id)) {
      throw InputError("unknown or out-of-service generator id " + std::to_string(id));
    }
  }

  std::optional<mcpflow::GridState> warm;
  if (!spec.warm_start.empty()) {
    warm = mcpflow::read_solution_state(base, read_file(spec.warm_start));
  }

  struct Row {
    std::vector<int> removed;
    double mw_lost = 0;
    Outcome o;
  };
  std::vector<Row> rows;

  // Previous converged solution, carried over by generator id so shrinking
  // gen tables still warm start.
  std::vector<mcpflow::Generator> prev_gens = base.gens;
  mcpflow::GridState prev_state;
  bool have_prev = false;

  auto remap_state = [&](const mcpflow::GridCase& now) {
    mcpflow::GridState st = mcpflow::flat_state(now);
    st.v = prev_state.v;
    st.delta = prev_state.delta;
    st.tap = prev_state.tap;
    st.b_switched = prev_state.b_switched;
    st.delta_f = prev_state.delta_f;
    std::unordered_map<int, int> row_of;
    for (size_t i = 0; i < prev_gens.size(); ++i) row_of[prev_gens[i].id] = static_cast<int>(i);
    for (size_t k = 0; k < now.gens.size(); ++k) {
      auto it = row_of.find(now.gens[k].id);
      if (it != row_of.end()) {
        st.p_g[static_cast<int>(k)] = prev_state.p_g[it->second];
        st.q_g[static_cast<int>(k)] = prev_state.q_g[it->second];
      }
    }
    return st;
  };

  bool all_ok = true;
  for (size_t k = 0; k <= spec.outages.size(); ++k) {
    Row row;
    row.removed.assign(spec.outages.begin(), spec.outages.begin() + static_cast<long>(k));
    std::unordered_set<int> gone(row.removed.begin(), row.removed.end());
    for (int id : row.removed) row.mw_lost += by_id.at(id)->p_sp * base.base_mva;

    mcpflow::GridCase gk = base;
    std::erase_if(gk.gens, [&](const mcpflow::Generator& g) { return gone.count(g.id) > 0; });

    mcpflow::GridState start;
    if (have_prev) {
      start = remap_state(gk);
    } else if (warm && k == 0) {
      start = *warm;
    } else {
      start = mcpflow::case_state(gk);
    }

    try {
      row.o = run_solver(gk, c, lc.droop_scale, spec.solver, spec, &start,
                         spec.verbose ? &std::cerr : nullptr);
    } catch (const std::exception& e) {
      row.o.solver = spec.solver;
      row.o.ok = false;
      std::cerr << "stage " << k << " error: " << e.what() << "\n";
    }
    if (row.o.ok) {
      prev_gens = gk.gens;
      prev_state = row.o.state;
      have_prev = true;
    } else {
      all_ok = false;
    }

    char buf[192];
    std::snprintf(buf, sizeof buf,
                  "outages=%zu lost=%.1f MW %s %s iter=%d max|v-v_sp|=%.3e time=%.3fs", k,
                  row.mw_lost, mcpflow::frequency_hz_label(row.o.delta_f).c_str(),
                  status_name(row.o.status), row.o.iterations, row.o.max_v_dev, row.o.wall);
    std::cout << buf << "\n";
    rows.push_back(std::move(row));
  }

  if (!spec.out.empty()) {
    if (spec.format == "csv") {
      std::ostringstream csv;
      csv << "count,removed_ids,mw_lost,status,iterations,delta_f_pu,frequency_hz,max_v_dev,"
             "wall_time_sec\n";
      for (const Row& r : rows) {
        std::string ids;
        for (size_t i = 0; i < r.removed.size(); ++i) {
          if (i) ids += ';';
          ids += std::to_string(r.removed[i]);
        }
        char buf[224];
        std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%s,%d,%.17g,%.17g,%.17g,%.17g\n",
                      r.removed.size(), ids.c_str(), r.mw_lost, status_name(r.o.status),
                      r.o.iterations, r.o.delta_f, 60.0 * (1.0 + r.o.delta_f), r.o.max_v_dev,
                      r.o.wall);
        csv << buf;
      }
      write_file(spec.out, csv.str());
    } else {
      ordered_json jrows = ordered_json::array();
      ordered_json timings = ordered_json::array();
      for (const Row& r : rows) {
        ordered_json jr;
        jr["removed"] = r.removed;
        jr["count"] = r.removed.size();
        jr["mw_lost"] = r.mw_lost;
        jr["status"] = status_name(r.o.status);
        jr["iterations"] = r.o.iterations;
        jr["delta_f_pu"] = r.o.delta_f;
        jr["frequency_hz"] = 60.0 * (1.0 + r.o.delta_f);
        jr["frequency"] = mcpflow::frequency_hz_label(r.o.delta_f);
        jr["max_v_dev"] = r.o.max_v_dev;
        jr["residual_inf"] = r.o.residual;
        jrows.push_back(jr);
        timings.push_back(r.o.wall);
      }
      ordered_json doc;
      doc["schema"] = "pfmcp-outage-sweep/1";
      doc["metadata"] = {{"generated_at", timestamp_utc()}, {"wall_time_sec", timings}};
      doc["case"] = base.name;
      doc["solver"] = spec.solver;
      doc["controls"] = control_names(c);
      doc["rows"] = jrows;
      write_file(spec.out, doc.dump(2) + "\n");
    }
  }
  return all_ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// bound-sweep

int cmd_bound_sweep(const RunSpec& spec) {
  if (spec.cases.size() != 1) throw InputError("bound-sweep needs exactly one --case");
  const Controls c = spec.controls.empty()
                         ? parse_controls({"gen-voltage", "taps", "shunts"})
                         : parse_controls(spec.controls);
  if (!c.taps && !c.shunts) {
    throw InputError("bound-sweep requires the 'taps' or 'shunts' control");
  }
  if (spec.solver == "nr") throw InputError("bound-sweep supports --solver mcp or fb");

  const std::vector<double>& widths = spec.widths.empty() ? kDefaultWidths : spec.widths;
  for (double w : widths) {
    if (!(w >= 0) || !std::isfinite(w)) throw InputError("widths must be finite and >= 0");
  }

  LoadedCase lc = load_inputs(spec.cases[0], spec.sidecar, spec.verbose);
  if (c.shunts) promote_fixed_shunts(lc.grid);

  struct Row {
    double width = 0;
    int taps = 0, shunts = 0;
    Outcome o;
    bool errored = false;
    std::string error;
  };
  std::vector<Row> rows;

  std::optional<mcpflow::GridState> prev = mcpflow::case_state(lc.grid);
  if (!spec.warm_start.empty()) {
    prev = mcpflow::read_solution_state(lc.grid, read_file(spec.warm_start));
  }

  bool all_ok = true;
  for (double w : widths) {
    mcpflow::GridCase g = lc.grid;  // same device set each width; only bounds move
    widen_bounds(g, c, w, /*only_degenerate=*/false);
    const mcpflow::RegulationConfig rc = device_config(g, c, lc.droop_scale);

    Row row;
    row.width = w;
    row.taps = static_cast<int>(rc.tap_devices.size());
    row.shunts = static_cast<int>(rc.shunt_devices.size());
    try {
      row.o = run_mcp_like(g, rc, spec.solver == "fb", spec.tol, spec.max_iter,
                           prev ? &*prev : nullptr, spec.verbose ? &std::cerr : nullptr);
    } catch (const std::exception& e) {
      row.errored = true;
      row.error = e.what();
      row.o.solver = spec.solver;
      std::cerr << "width " << w << " error: " << e.what() << "\n";
    }
    if (row.o.ok) {
      prev = row.o.state;
    } else {
      all_ok = false;
    }

    char buf[192];
    std::snprintf(buf, sizeof buf,
                  "width=%g%% %s violations=%d max_violation=%.4e iter=%d time=%.3fs",
                  w * 100.0, status_name(row.o.status), row.o.violation_count,
                  row.o.max_violation, row.o.iterations, row.o.wall);
    std::cout << buf << "\n";
    rows.push_back(std::move(row));
  }

  if (!spec.out.empty()) {
    if (spec.format == "csv") {
      std::ostringstream csv;
      csv << "width,status,iterations,violations,max_violation,max_v_dev,devices_at_bounds,"
             "tap_devices,shunt_devices,wall_time_sec\n";
      for (const Row& r : rows) {
        char buf[224];
        std::snprintf(buf, sizeof buf, "%.17g,%s,%d,%d,%.17g,%.17g,%d,%d,%d,%.17g\n", r.width,
                      r.errored ? "error" : status_name(r.o.status), r.o.iterations,
                      r.o.violation_count, r.o.max_violation, r.o.max_v_dev,
                      r.o.devices_at_bounds, r.taps, r.shunts, r.o.wall);
        csv << buf;
      }
      write_file(spec.out, csv.str());
    } else {
      ordered_json jrows = ordered_json::array();
      ordered_json timings = ordered_json::array();
      for (const Row& r : rows) {
        ordered_json jr;
        jr["width"] = r.width;
        jr["status"] = r.errored ? "error" : status_name(r.o.status);
        if (r.errored) jr["error"] = r.error;
        jr["iterations"] = r.o.iterations;
        jr["violations"] = r.o.violation_count;
        jr["max_violation"] = r.o.max_violation;
        jr["max_v_dev"] = r.o.max_v_dev;
        jr["devices_at_bounds"] = r.o.devices_at_bounds;
        jr["tap_devices"] = r.taps;
        jr["shunt_devices"] = r.shunts;
        jrows.push_back(jr);
        timings.push_back(r.o.wall);
      }
      ordered_json doc;
      doc["schema"] = "pfmcp-bound-sweep/1";
      doc["metadata"] = {{"generated_at", timestamp_utc()}, {"wall_time_sec", timings}};
      doc["case"] = lc.grid.name;
      doc["solver"] = spec.solver;
      doc["controls"] = control_names(c);
      doc["rows"] = jrows;
      write_file(spec.out, doc.dump(2) + "\n");
    }
  }
  return all_ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// flag / config plumbing

void add_common_options(CLI::App* sub, RunSpec& spec) {
  sub->add_option("--case", spec.cases, "MATPOWER case file (repeatable for compare)");
  sub->add_option("--sidecar", spec.sidecar, "regulation sidecar JSON");
  sub->add_option("--controls", spec.controls,
                  "comma list of gen-voltage,taps,shunts,frequency")
      ->delimiter(',');
  sub->add_option("--solver", spec.solver, "mcp|nr|fb")
      ->check(CLI::IsMember({"mcp", "nr", "fb"}));
  sub->add_option("--tol", spec.tol, "convergence tolerance (default 1e-8)");
  sub->add_option("--max-iter", spec.max_iter, "iteration cap (default per solver)");
  sub->add_option("--warm-start", spec.warm_start, "solution JSON to start from");
  sub->add_option("--outages", spec.outages, "generator ids removed cumulatively in order")
      ->delimiter(',');
  sub->add_option("--widths", spec.widths,
                  "fractional bound widths (default 0,0.05,...,0.20)")
      ->delimiter(',');
  sub->add_option("--format", spec.format, "json|csv (default json)")
      ->check(CLI::IsMember({"json", "csv"}));
  sub->add_option("--out", spec.out, "artifact path (omit to skip the artifact)");
  sub->add_flag("--verbose", spec.verbose, "solver traces and parser notes on stderr");
}

// Config JSON mirrors the flag names; explicitly passed flags win.
void merge_config(const CLI::App* sub, RunSpec& spec, const std::string& path) {
  json cfg;
  try {
    cfg = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw InputError("config '" + path + "': " + e.what());
  }
  if (!cfg.is_object()) throw InputError("config '" + path + "' must be a JSON object");

  auto unset = [&](const std::string& flag) { return sub->count(flag) == 0; };
  auto str_list = [&](const json& v, const char* key) {
    std::vector<std::string> out;
    if (v.is_string()) {
      std::stringstream ss(v.get<std::string>());
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
      }
    } else if (v.is_array()) {
      for (const auto& e : v) out.push_back(e.get<std::string>());
    } else {
      throw InputError(std::string("config key '") + key + "' must be a string or array");
    }
    return out;
  };

  for (const auto& [key, value] : cfg.items()) {
    try {
      if (key == "case") {
        if (unset("--case")) spec.cases = str_list(value, "case");
      } else if (key == "sidecar") {
        if (unset("--sidecar")) spec.sidecar = value.get<std::string>();
      } else if (key == "controls") {
        if (unset("--controls")) spec.controls = str_list(value, "controls");
      } else if (key == "solver") {
        if (unset("--solver")) spec.solver = value.get<std::string>();
      } else if (key == "tol") {
        if (unset("--tol")) spec.tol = value.get<double>();
      } else if (key == "max-iter") {
        if (unset("--max-iter")) spec.max_iter = value.get<int>();
      } else if (key == "warm-start") {
        if (unset("--warm-start")) spec.warm_start = value.get<std::string>();
      } else if (key == "outages") {
        if (unset("--outages")) spec.outages = value.get<std::vector<int>>();
      } else if (key == "widths") {
        if (unset("--widths")) spec.widths = value.get<std::vector<double>>();
      } else if (key == "format") {
        if (unset("--format")) spec.format = value.get<std::string>();
      } else if (key == "out") {
        if (unset("--out")) spec.out = value.get<std::string>();
      } else if (key == "verbose") {
        if (unset("--verbose")) spec.verbose = value.get<bool>();
      } else {
        throw InputError("config key '" + key + "' is not a recognized flag");
      }
    } catch (const json::exception& e) {
      throw InputError("config key '" + key + "': " + e.what());
    }
  }
  if (spec.solver != "mcp" && spec.solver != "nr" && spec.solver != "fb") {
    throw InputError("config solver must be mcp, nr, or fb");
  }
  if (spec.format != "json" && spec.format != "csv") {
    throw InputError("config format must be json or csv");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed-complementarity AC power flow driver"};
  app.require_subcommand(1);

  RunSpec spec;
  std::string config_path;

  CLI::App* s_solve = app.add_subcommand("solve", "solve one case and report regulation");
  CLI::App* s_compare =
      app.add_subcommand("compare", "run nr, mcp, and fb on each case; emit one table");
  CLI::App* s_outage = app.add_subcommand(
      "outage-sweep", "remove generators cumulatively; track frequency per prefix");
  CLI::App* s_bound = app.add_subcommand(
      "bound-sweep", "widen tap/shunt bounds stepwise; track voltage violations");
  for (CLI::App* sub : {s_solve, s_compare, s_outage, s_bound}) {
    add_common_options(sub, spec);
    sub->add_option("--config", config_path, "JSON config mirroring the flags (flags win)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!config_path.empty()) merge_config(sub, spec, config_path);
    if (spec.cases.empty() && sub != s_compare) {
      throw InputError("missing --case");
    }
    if (sub == s_solve) return cmd_solve(spec);
    if (sub == s_compare) return cmd_compare(spec);
    if (sub == s_outage) return cmd_outage_sweep(spec);
    return cmd_bound_sweep(spec);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

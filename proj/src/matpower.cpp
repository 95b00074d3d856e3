#include "mcpflow/matpower.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace mcpflow {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kNominalHz = 60.0;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

struct Statement {
  std::string key;    // "function" or field name after "mpc."
  std::string value;  // raw right-hand side without the trailing ';'
};

// Splits the file into `lhs = rhs;` statements, honoring bracket nesting so
// matrix/cell bodies stay intact. Comments are stripped outside cell blocks
// (cell strings may legitimately contain '%').
std::vector<Statement> split_statements(const std::string& text) {
  std::vector<Statement> out;
  std::string pending;
  int sq = 0, curly = 0;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (curly == 0) {
      const size_t cut = line.find('%');
      if (cut != std::string::npos) line.erase(cut);
    }
    for (char ch : line) {
      if (ch == '[') ++sq;
      else if (ch == ']') --sq;
      else if (ch == '{') ++curly;
      else if (ch == '}') --curly;
      if (ch == ';' && sq == 0 && curly == 0) {
        Statement st;
        const size_t eq = pending.find('=');
        if (eq != std::string::npos) {
          st.key = pending.substr(0, eq);
          st.value = pending.substr(eq + 1);
          // trim
          auto trim = [](std::string& s) {
            const auto a = s.find_first_not_of(" \t\n");
            const auto b = s.find_last_not_of(" \t\n");
            s = a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
          };
          trim(st.key);
          trim(st.value);
          if (!st.key.empty()) out.push_back(std::move(st));
        }
        pending.clear();
        continue;
      }
      pending += ch;
    }
    pending += '\n';
    // The function header has no semicolon; emit it when it opens a statement.
    if (sq == 0 && curly == 0) {
      const size_t start = pending.find_first_not_of(" \t\n");
      if (start != std::string::npos && pending.compare(start, 9, "function ") == 0) {
        out.push_back({"function", pending.substr(start + 9)});
        pending.clear();
      }
    }
  }
  return out;
}

std::vector<std::vector<double>> parse_matrix(const std::string& body,
                                              const std::string& field) {
  const size_t open = body.find('[');
  const size_t close = body.rfind(']');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    fail("field " + field + ": malformed matrix literal");
  }
  std::string inner = body.substr(open + 1, close - open - 1);
  // MATLAB line continuations.
  for (size_t p = inner.find("..."); p != std::string::npos; p = inner.find("...")) {
    inner.replace(p, 3, " ");
  }
  std::vector<std::vector<double>> rows;
  std::string rowtext;
  auto flush_row = [&]() {
    std::vector<double> row;
    const char* p = rowtext.c_str();
    while (*p) {
      while (*p == ' ' || *p == '\t' || *p == ',') ++p;
      if (!*p) break;
      char* end = nullptr;
      const double val = std::strtod(p, &end);
      if (end == p) fail("field " + field + ": non-numeric token near '" + std::string(p).substr(0, 12) + "'");
      row.push_back(val);
      p = end;
    }
    if (!row.empty()) rows.push_back(std::move(row));
    rowtext.clear();
  };
  for (char ch : inner) {
    if (ch == ';' || ch == '\n') flush_row();
    else rowtext += ch;
  }
  flush_row();
  for (const auto& row : rows) {
    if (row.size() != rows.front().size()) {
      fail("field " + field + ": rows have inconsistent column counts");
    }
  }
  return rows;
}

std::string strip_quotes(const std::string& s) {
  std::string t = s;
  t.erase(std::remove(t.begin(), t.end(), '\''), t.end());
  const auto a = t.find_first_not_of(" \t\n");
  const auto b = t.find_last_not_of(" \t\n");
  return a == std::string::npos ? std::string() : t.substr(a, b - a + 1);
}

}  // namespace

ParseResult parse_case(const std::string& text) {
  ParseResult res;
  GridCase& grid = res.grid;

  const std::vector<Statement> stmts = split_statements(text);
  bool have_function = false;
  std::optional<std::vector<std::vector<double>>> bus_m, gen_m, branch_m;
  std::string version;
  for (const Statement& st : stmts) {
    if (st.key == "function") {
      // "mpc = case9" -> name after '='... value here is the remainder.
      const size_t eq = st.value.find('=');
      std::string nm = eq == std::string::npos ? st.value : st.value.substr(eq + 1);
      const auto a = nm.find_first_not_of(" \t\n");
      const auto b = nm.find_last_not_of(" \t\n");
      grid.name = a == std::string::npos ? "case" : nm.substr(a, b - a + 1);
      have_function = true;
      continue;
    }
    if (st.key.rfind("mpc.", 0) != 0) continue;
    const std::string field = st.key.substr(4);
    if (field == "version") {
      version = strip_quotes(st.value);
    } else if (field == "baseMVA") {
      grid.base_mva = std::strtod(st.value.c_str(), nullptr);
    } else if (field == "bus") {
      bus_m = parse_matrix(st.value, field);
    } else if (field == "gen") {
      gen_m = parse_matrix(st.value, field);
    } else if (field == "branch") {
      branch_m = parse_matrix(st.value, field);
    } else {
      res.notes.push_back("ignored field mpc." + field);
    }
  }
  if (!have_function) fail("no case function found");
  if (version != "2") fail("unsupported MATPOWER case version '" + version + "' (need 2)");
  if (!bus_m || !gen_m || !branch_m) fail(grid.name + ": missing bus/gen/branch table");
  if (!(grid.base_mva > 0)) fail(grid.name + ": baseMVA must be positive");
  const double base = grid.base_mva;

  std::unordered_map<int, int> index_of;  // external id -> internal
  int dropped_isolated = 0;
  for (const auto& row : *bus_m) {
    if (row.size() < 13) fail(grid.name + ": bus row with fewer than 13 columns");
    const int raw_type = static_cast<int>(row[1]);
    if (raw_type == 4) {
      ++dropped_isolated;
      continue;
    }
    Bus b;
    b.id = static_cast<int>(row[0]);
    switch (raw_type) {
      case 1: b.type = BusType::PQ; break;
      case 2: b.type = BusType::PV; break;
      case 3: b.type = BusType::Slack; break;
      default: fail(grid.name + ": bus " + std::to_string(b.id) + " has unknown type");
    }
    b.p_load = row[2] / base;
    b.q_load = row[3] / base;
    b.g_shunt = row[4] / base;
    b.b_shunt = row[5] / base;
    b.v0 = row[7] > 0 ? row[7] : 1.0;
    b.delta0 = row[8] * kPi / 180.0;
    b.base_kv = row[9];
    b.v_max = row[11];
    b.v_min = row[12];
    if (!index_of.emplace(b.id, static_cast<int>(grid.buses.size())).second) {
      fail(grid.name + ": duplicate bus id " + std::to_string(b.id));
    }
    grid.buses.push_back(b);
  }
  if (dropped_isolated) {
    res.notes.push_back("dropped " + std::to_string(dropped_isolated) + " isolated bus(es)");
  }

  int gen_row = 0, dropped_gens = 0;
  for (const auto& row : *gen_m) {
    ++gen_row;
    if (row.size() < 10) fail(grid.name + ": gen row with fewer than 10 columns");
    if (row[7] <= 0) {
      ++dropped_gens;
      continue;
    }
    const int bus_id = static_cast<int>(row[0]);
    const auto it = index_of.find(bus_id);
    if (it == index_of.end()) {
      fail(grid.name + ": generator row " + std::to_string(gen_row) +
           " references unknown or isolated bus " + std::to_string(bus_id));
    }
    Generator g;
    g.id = gen_row;
    g.bus = it->second;
    g.p_sp = row[1] / base;
    g.q0 = row[2] / base;
    g.q_max = row[3] / base;
    g.q_min = row[4] / base;
    g.v_sp = row[5] > 0 ? row[5] : 1.0;
    g.p_max = row[8] / base;
    g.p_min = row[9] / base;
    grid.gens.push_back(g);
  }
  if (dropped_gens) {
    res.notes.push_back("dropped " + std::to_string(dropped_gens) + " out-of-service generator(s)");
  }

  int br_row = 0, dropped_branches = 0;
  for (const auto& row : *branch_m) {
    ++br_row;
    if (row.size() < 11) fail(grid.name + ": branch row with fewer than 11 columns");
    if (row[10] == 0) {
      ++dropped_branches;
      continue;
    }
    Branch br;
    br.id = br_row;
    const auto fi = index_of.find(static_cast<int>(row[0]));
    const auto ti = index_of.find(static_cast<int>(row[1]));
    if (fi == index_of.end() || ti == index_of.end()) {
      fail(grid.name + ": branch row " + std::to_string(br_row) + " references unknown bus");
    }
    br.from = fi->second;
    br.to = ti->second;
    br.r = row[2];
    br.x = row[3];
    br.b_charge = row[4];
    br.transformer = row[8] != 0 || row[9] != 0;
    br.tap = row[8] != 0 ? row[8] : 1.0;
    br.shift = row[9] * kPi / 180.0;
    br.tap_min = br.tap_max = br.tap;
    br.regulated_bus = br.to;
    grid.branches.push_back(br);
  }
  if (dropped_branches) {
    res.notes.push_back("dropped " + std::to_string(dropped_branches) + " out-of-service branch(es)");
  }

  // Voltage set points from generator VG, first in-service generator winning.
  const auto by_bus = grid.gens_by_bus();
  for (size_t i = 0; i < grid.buses.size(); ++i) {
    Bus& b = grid.buses[i];
    if (by_bus[i].empty()) {
      if (b.type == BusType::PV) {
        b.type = BusType::PQ;
        res.notes.push_back("bus " + std::to_string(b.id) + " demoted PV->PQ (no in-service generator)");
      }
      continue;
    }
    const double vg = grid.gens[by_bus[i].front()].v_sp;
    for (int g : by_bus[i]) {
      if (std::abs(grid.gens[g].v_sp - vg) > 1e-9) {
        res.warnings.push_back("bus " + std::to_string(b.id) +
                               ": conflicting generator VG values, using the first");
        break;
      }
    }
    b.v_sp = vg;
    for (int g : by_bus[i]) grid.gens[g].v_sp = vg;
  }

  grid.slack = -1;
  for (size_t i = 0; i < grid.buses.size(); ++i) {
    if (grid.buses[i].type == BusType::Slack) {
      if (grid.slack >= 0) fail(grid.name + ": multiple slack buses");
      grid.slack = static_cast<int>(i);
    }
  }
  if (grid.slack < 0) fail(grid.name + ": no slack bus");
  if (by_bus[grid.slack].empty()) fail(grid.name + ": slack bus has no in-service generator");

  grid.validate();
  return res;
}

ParseResult load_case(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open case file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_case(buf.str());
  } catch (const std::exception& e) {
    fail(path + ": " + e.what());
  }
}

SidecarEffects apply_sidecar(GridCase& grid, const std::string& json_text) {
  SidecarEffects eff;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const std::exception& e) {
    fail(std::string("sidecar: invalid JSON: ") + e.what());
  }
  if (doc.contains("version") && doc["version"].get<int>() != 1) {
    fail("sidecar: unsupported version");
  }
  for (const auto& entry : doc.value("taps", nlohmann::json::array())) {
    const int id = entry.at("branch").get<int>();
    auto it = std::find_if(grid.branches.begin(), grid.branches.end(),
                           [&](const Branch& b) { return b.id == id; });
    if (it == grid.branches.end()) fail("sidecar: unknown branch row " + std::to_string(id));
    it->tap_min = entry.at("min").get<double>();
    it->tap_max = entry.at("max").get<double>();
    if (entry.contains("regulated_bus")) {
      const int rb = grid.bus_index(entry["regulated_bus"].get<int>());
      if (rb < 0) fail("sidecar: unknown regulated bus for branch " + std::to_string(id));
      it->regulated_bus = rb;
    }
    if (it->tap_min > it->tap || it->tap_max < it->tap) {
      fail("sidecar: branch " + std::to_string(id) + " tap set point outside [min,max]");
    }
    ++eff.taps;
  }
  for (const auto& entry : doc.value("shunts", nlohmann::json::array())) {
    const int bus = grid.bus_index(entry.at("bus").get<int>());
    if (bus < 0) fail("sidecar: unknown shunt bus");
    SwitchedShunt dev;
    dev.bus = bus;
    dev.b_sp = entry.contains("sp") ? entry["sp"].get<double>() : grid.buses[bus].b_shunt;
    dev.b_min = entry.at("min").get<double>();
    dev.b_max = entry.at("max").get<double>();
    if (dev.b_min > dev.b_sp || dev.b_max < dev.b_sp) {
      fail("sidecar: shunt at bus " + std::to_string(grid.buses[bus].id) +
           " set point outside [min,max]");
    }
    // The device takes over the bus's controllable part; avoid double counting
    // when seeded from the fixed susceptance.
    if (!entry.contains("sp")) grid.buses[bus].b_shunt = 0;
    auto it = std::find_if(grid.shunts.begin(), grid.shunts.end(),
                           [&](const SwitchedShunt& s) { return s.bus == bus; });
    if (it != grid.shunts.end()) *it = dev;
    else grid.shunts.push_back(dev);
    ++eff.shunts;
  }
  for (const auto& entry : doc.value("droop", nlohmann::json::array())) {
    const int id = entry.at("gen").get<int>();
    auto it = std::find_if(grid.gens.begin(), grid.gens.end(),
                           [&](const Generator& g) { return g.id == id; });
    if (it == grid.gens.end()) fail("sidecar: unknown generator row " + std::to_string(id));
    it->droop = entry.at("nu").get<double>();
    if (it->droop < 0) fail("sidecar: droop must be nonnegative");
    ++eff.droops;
  }
  if (doc.contains("droop_default_scale")) {
    eff.droop_default_scale = doc["droop_default_scale"].get<double>();
  }
  return eff;
}

SidecarEffects load_sidecar(GridCase& grid, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open sidecar file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return apply_sidecar(grid, buf.str());
}

std::string frequency_hz_label(double delta_f_pu) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f Hz", kNominalHz * (1.0 + delta_f_pu));
  return buf;
}

std::string write_solution(const GridCase& grid, const GridState& state,
                           const SolutionMeta& meta, SolutionFormat format) {
  const double base = grid.base_mva;
  if (format == SolutionFormat::json) {
    nlohmann::ordered_json doc;
    doc["schema"] = "pfmcp-solution/1";
    doc["case"] = grid.name;
    doc["base_mva"] = base;
    doc["metadata"] = {{"wall_time_sec", meta.wall_time_sec}};
    nlohmann::ordered_json solver;
    solver["name"] = meta.solver;
    solver["status"] = meta.status;
    solver["iterations"] = meta.iterations;
    solver["residual_inf"] = meta.residual_inf;
    if (meta.q_order) solver["q_order"] = *meta.q_order;
    doc["solver"] = solver;
    nlohmann::ordered_json summary;
    summary["delta_f_pu"] = meta.delta_f;
    summary["frequency_hz"] = kNominalHz * (1.0 + meta.delta_f);
    summary["frequency"] = frequency_hz_label(meta.delta_f);
    summary["max_v_dev"] = meta.max_v_dev;
    summary["devices_at_bounds"] = meta.devices_at_bounds;
    summary["voltage_violations"] = meta.violations;
    doc["summary"] = summary;
    nlohmann::ordered_json buses = nlohmann::ordered_json::array();
    for (size_t i = 0; i < grid.buses.size(); ++i) {
      nlohmann::ordered_json b;
      b["id"] = grid.buses[i].id;
      b["vm_pu"] = state.v[i];
      b["va_deg"] = state.delta[i] * 180.0 / kPi;
      if (grid.buses[i].base_kv > 0) b["v_kv"] = state.v[i] * grid.buses[i].base_kv;
      buses.push_back(b);
    }
    doc["buses"] = buses;
    nlohmann::ordered_json gens = nlohmann::ordered_json::array();
    for (size_t g = 0; g < grid.gens.size(); ++g) {
      nlohmann::ordered_json j;
      j["id"] = grid.gens[g].id;
      j["bus"] = grid.buses[grid.gens[g].bus].id;
      j["pg_pu"] = state.p_g[g];
      j["qg_pu"] = state.q_g[g];
      j["pg_mw"] = state.p_g[g] * base;
      j["qg_mvar"] = state.q_g[g] * base;
      gens.push_back(j);
    }
    doc["generators"] = gens;
    nlohmann::ordered_json taps = nlohmann::ordered_json::array();
    for (size_t e = 0; e < grid.branches.size(); ++e) {
      if (!grid.branches[e].transformer && grid.branches[e].tap_min == grid.branches[e].tap_max)
        continue;
      taps.push_back({{"branch", grid.branches[e].id}, {"u", state.tap[e]}});
    }
    doc["taps"] = taps;
    nlohmann::ordered_json shunts = nlohmann::ordered_json::array();
    for (size_t s = 0; s < grid.shunts.size(); ++s) {
      shunts.push_back({{"bus", grid.buses[grid.shunts[s].bus].id}, {"b", state.b_switched[s]}});
    }
    doc["shunts"] = shunts;
    doc["delta_f_pu"] = state.delta_f;
    return doc.dump(2) + "\n";
  }

  std::ostringstream out;
  out.precision(17);
  out << "type,id,bus,v_pu,angle_deg,p_mw,q_mvar,value\n";
  out << "summary,,,,,,," << meta.solver << ":" << meta.status << ":" << meta.iterations << "\n";
  out << "frequency,,,,,,," << kNominalHz * (1.0 + state.delta_f) << "\n";
  for (size_t i = 0; i < grid.buses.size(); ++i) {
    out << "bus," << grid.buses[i].id << "," << grid.buses[i].id << "," << state.v[i] << ","
        << state.delta[i] * 180.0 / kPi << ",,,\n";
  }
  for (size_t g = 0; g < grid.gens.size(); ++g) {
    out << "gen," << grid.gens[g].id << "," << grid.buses[grid.gens[g].bus].id << ",,,"
        << state.p_g[g] * base << "," << state.q_g[g] * base << ",\n";
  }
  for (size_t e = 0; e < grid.branches.size(); ++e) {
    if (!grid.branches[e].transformer && grid.branches[e].tap_min == grid.branches[e].tap_max)
      continue;
    out << "tap," << grid.branches[e].id << ",,,,,," << state.tap[e] << "\n";
  }
  for (size_t s = 0; s < grid.shunts.size(); ++s) {
    out << "shunt," << grid.buses[grid.shunts[s].bus].id << ",,,,,," << state.b_switched[s]
        << "\n";
  }
  return out.str();
}

GridState read_solution_state(const GridCase& grid, const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const std::exception& e) {
    fail(std::string("solution: invalid JSON: ") + e.what());
  }
  if (doc.value("schema", "") != "pfmcp-solution/1") fail("solution: unknown schema");
  GridState st = flat_state(grid);
  if (doc.contains("buses")) {
    std::unordered_map<int, int> index_of;
    for (size_t i = 0; i < grid.buses.size(); ++i) index_of[grid.buses[i].id] = static_cast<int>(i);
    for (const auto& b : doc["buses"]) {
      const auto it = index_of.find(b.at("id").get<int>());
      if (it == index_of.end()) continue;
      st.v[it->second] = b.at("vm_pu").get<double>();
      st.delta[it->second] = b.at("va_deg").get<double>() * kPi / 180.0;
    }
  }
  if (doc.contains("generators")) {
    std::unordered_map<int, int> index_of;
    for (size_t g = 0; g < grid.gens.size(); ++g) index_of[grid.gens[g].id] = static_cast<int>(g);
    for (const auto& j : doc["generators"]) {
      const auto it = index_of.find(j.at("id").get<int>());
      if (it == index_of.end()) continue;
      st.p_g[it->second] = j.at("pg_pu").get<double>();
      st.q_g[it->second] = j.at("qg_pu").get<double>();
    }
  }
  if (doc.contains("taps")) {
    std::unordered_map<int, int> index_of;
    for (size_t e = 0; e < grid.branches.size(); ++e) {
      index_of[grid.branches[e].id] = static_cast<int>(e);
    }
    for (const auto& j : doc["taps"]) {
      const auto it = index_of.find(j.at("branch").get<int>());
      if (it == index_of.end()) continue;
      st.tap[it->second] = j.at("u").get<double>();
    }
  }
  if (doc.contains("shunts")) {
    std::unordered_map<int, int> index_of;
    for (size_t s = 0; s < grid.shunts.size(); ++s) {
      index_of[grid.buses[grid.shunts[s].bus].id] = static_cast<int>(s);
    }
    for (const auto& j : doc["shunts"]) {
      const auto it = index_of.find(j.at("bus").get<int>());
      if (it == index_of.end()) continue;
      st.b_switched[it->second] = j.at("b").get<double>();
    }
  }
  st.delta_f = doc.value("delta_f_pu", 0.0);
  return st;
}

}  // namespace mcpflow

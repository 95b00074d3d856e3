#include <doctest.h>

#include "mcpflow/matpower.hpp"

#include <json.hpp>

#include <cmath>
#include <string>
#include <vector>

using namespace mcpflow;

namespace {

constexpr double kPi = 3.14159265358979323846;

const char* kTwoBus = R"(function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
  1  3  0   0   0  0   1  1.02  0     345  1  1.10  0.90;
  2  1  90  30  5  10  1  0.98  -2.5  345  1  1.08  0.92;
];
mpc.gen = [
  1  50  10  80  -40  1.03  100  1  120  5;
];
mpc.branch = [
  1  2  0.01  0.1  0.02  250  250  250  1.05  3.0  1;
];
mpc.gencost = [2 0 0 3 0.1 40 0];
)";

std::string data_path(const char* name) {
  return std::string(MCPFLOW_DATA_DIR) + "/" + name;
}

bool has_note(const std::vector<std::string>& notes, const std::string& needle) {
  for (const auto& n : notes) {
    if (n.find(needle) != std::string::npos) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("two-bus fixture parses with exact per-unit conversion") {
  const ParseResult pr = parse_case(kTwoBus);
  const GridCase& g = pr.grid;

  CHECK(g.name == "twobus");
  CHECK(g.base_mva == 100.0);
  REQUIRE(g.buses.size() == 2);
  REQUIRE(g.gens.size() == 1);
  REQUIRE(g.branches.size() == 1);

  CHECK(g.buses[0].type == BusType::Slack);
  CHECK(g.slack == 0);
  CHECK(g.buses[1].type == BusType::PQ);
  CHECK(g.buses[1].p_load == doctest::Approx(0.9));
  CHECK(g.buses[1].q_load == doctest::Approx(0.3));
  CHECK(g.buses[1].g_shunt == doctest::Approx(0.05));
  CHECK(g.buses[1].b_shunt == doctest::Approx(0.10));
  CHECK(g.buses[1].v0 == doctest::Approx(0.98));
  CHECK(g.buses[1].delta0 == doctest::Approx(-2.5 * kPi / 180.0));
  CHECK(g.buses[1].base_kv == doctest::Approx(345.0));
  CHECK(g.buses[1].v_max == doctest::Approx(1.08));
  CHECK(g.buses[1].v_min == doctest::Approx(0.92));

  const Generator& gen = g.gens[0];
  CHECK(gen.bus == 0);
  CHECK(gen.p_sp == doctest::Approx(0.5));
  CHECK(gen.q0 == doctest::Approx(0.1));
  CHECK(gen.q_max == doctest::Approx(0.8));
  CHECK(gen.q_min == doctest::Approx(-0.4));
  CHECK(gen.p_max == doctest::Approx(1.2));
  CHECK(gen.p_min == doctest::Approx(0.05));
  CHECK(gen.v_sp == doctest::Approx(1.03));
  // Generator VG becomes the bus regulation target.
  CHECK(g.buses[0].v_sp == doctest::Approx(1.03));

  const Branch& br = g.branches[0];
  CHECK(br.from == 0);
  CHECK(br.to == 1);
  CHECK(br.r == doctest::Approx(0.01));
  CHECK(br.x == doctest::Approx(0.1));
  CHECK(br.b_charge == doctest::Approx(0.02));
  CHECK(br.tap == doctest::Approx(1.05));
  CHECK(br.shift == doctest::Approx(3.0 * kPi / 180.0));
  CHECK(br.transformer);
  CHECK(br.regulated_bus == 1);

  CHECK(has_note(pr.notes, "ignored field mpc.gencost"));
  CHECK(pr.warnings.empty());
}

TEST_CASE("out-of-service rows are dropped with notes") {
  std::string text = kTwoBus;
  // Second gen at bus 2, out of service; second branch out of service.
  text.replace(text.find("mpc.gen = [\n"), 12,
               "mpc.gen = [\n  2  10  0  20  -20  1.00  100  0  30  0;\n");
  text.replace(text.find("mpc.branch = [\n"), 15,
               "mpc.branch = [\n  1  2  0.02  0.2  0  0 0 0  0  0  0;\n");
  const ParseResult pr = parse_case(text);
  CHECK(pr.grid.gens.size() == 1);
  CHECK(pr.grid.branches.size() == 1);
  CHECK(has_note(pr.notes, "out-of-service generator"));
  CHECK(has_note(pr.notes, "out-of-service branch"));
  // Generator ids keep the original row numbers even after drops.
  CHECK(pr.grid.gens[0].id == 2);
  CHECK(pr.grid.gens[0].bus == 0);
}

TEST_CASE("PV bus without in-service generator is demoted to PQ") {
  std::string text = kTwoBus;
  text.replace(text.find("2  1  90"), 8, "2  2  90");  // bus 2 claims PV
  const ParseResult pr = parse_case(text);
  CHECK(pr.grid.buses[1].type == BusType::PQ);
  CHECK(has_note(pr.notes, "demoted PV->PQ"));
}

TEST_CASE("conflicting generator voltage targets produce a warning") {
  std::string text = kTwoBus;
  text.replace(text.find("mpc.gen = [\n"), 12,
               "mpc.gen = [\n  1  10  0  20  -20  0.99  100  1  30  0;\n");
  const ParseResult pr = parse_case(text);
  REQUIRE(!pr.warnings.empty());
  CHECK(pr.warnings[0].find("conflicting generator VG") != std::string::npos);
  // First in-service generator wins and is propagated to all of them.
  CHECK(pr.grid.buses[0].v_sp == doctest::Approx(0.99));
  for (const auto& gen : pr.grid.gens) CHECK(gen.v_sp == doctest::Approx(0.99));
}

TEST_CASE("malformed cases are rejected") {
  CHECK_THROWS(parse_case(""));  // no function
  std::string v1 = kTwoBus;
  v1.replace(v1.find("'2'"), 3, "'1'");
  CHECK_THROWS(parse_case(v1));

  std::string no_gen = kTwoBus;
  no_gen.replace(no_gen.find("mpc.gen"), 7, "mpc.foo");
  CHECK_THROWS(parse_case(no_gen));

  std::string bad_token = kTwoBus;
  bad_token.replace(bad_token.find("0.01"), 4, "zz");
  CHECK_THROWS(parse_case(bad_token));

  std::string dup_bus = kTwoBus;
  dup_bus.replace(dup_bus.find("  2  1  90"), 10, "  1  1  90");
  CHECK_THROWS(parse_case(dup_bus));

  std::string off_slack_gen = kTwoBus;
  off_slack_gen.replace(off_slack_gen.find("100  1  120"), 11, "100  0  120");
  CHECK_THROWS(parse_case(off_slack_gen));

  CHECK_THROWS(load_case(data_path("does_not_exist.m")));
}

TEST_CASE("corpus parses cleanly with expected dimensions") {
  struct Expect {
    const char* file;
    size_t buses;
  };
  const Expect table[] = {
      {"case9.m", 9},         {"case14.m", 14},         {"case118.m", 118},
      {"case300.m", 300},     {"case1354pegase.m", 1354}, {"case2869pegase.m", 2869},
      {"case3120sp.m", 3120},
  };
  for (const Expect& e : table) {
    const ParseResult pr = load_case(data_path(e.file));
    CHECK_MESSAGE(pr.grid.buses.size() == e.buses, e.file);
    CHECK_MESSAGE(pr.warnings.empty(), e.file);
    CHECK(pr.grid.slack >= 0);
    CHECK(!pr.grid.gens.empty());
    CHECK(!pr.grid.branches.empty());
  }
}

TEST_CASE("sidecar attaches tap ranges, shunt devices, and droop gains") {
  GridCase g = load_case(data_path("case14.m")).grid;
  const char* sidecar = R"({
    "version": 1,
    "taps":   [{"branch": 8, "min": 0.9, "max": 1.1}],
    "shunts": [{"bus": 9, "min": 0.0, "max": 0.39}],
    "droop":  [{"gen": 1, "nu": 25.0}],
    "droop_default_scale": 18.0
  })";
  const SidecarEffects eff = apply_sidecar(g, sidecar);
  CHECK(eff.taps == 1);
  CHECK(eff.shunts == 1);
  CHECK(eff.droops == 1);
  REQUIRE(eff.droop_default_scale.has_value());
  CHECK(*eff.droop_default_scale == doctest::Approx(18.0));

  const Branch& br = g.branches[7];  // 1-based row 8
  CHECK(br.id == 8);
  CHECK(br.tap_min == doctest::Approx(0.9));
  CHECK(br.tap_max == doctest::Approx(1.1));

  REQUIRE(g.shunts.size() == 1);
  const int bus9 = g.bus_index(9);
  CHECK(g.shunts[0].bus == bus9);
  // Seeded from the fixed susceptance (0.19 pu in case14), which is zeroed to
  // avoid double counting.
  CHECK(g.shunts[0].b_sp == doctest::Approx(0.19));
  CHECK(g.buses[bus9].b_shunt == 0.0);

  CHECK(g.gens[0].droop == doctest::Approx(25.0));
}

TEST_CASE("sidecar rejects inconsistent declarations") {
  GridCase g = load_case(data_path("case14.m")).grid;
  CHECK_THROWS(apply_sidecar(g, "not json"));
  CHECK_THROWS(apply_sidecar(g, R"({"version": 7})"));
  CHECK_THROWS(apply_sidecar(g, R"({"taps":[{"branch": 999, "min": 0.9, "max": 1.1}]})"));
  // Set point outside the declared range.
  CHECK_THROWS(apply_sidecar(g, R"({"taps":[{"branch": 8, "min": 1.05, "max": 1.1}]})"));
  CHECK_THROWS(apply_sidecar(g, R"({"shunts":[{"bus": 9, "min": 0.5, "max": 0.6}]})"));
  CHECK_THROWS(apply_sidecar(g, R"({"droop":[{"gen": 1, "nu": -2.0}]})"));
  CHECK_THROWS(apply_sidecar(g, R"({"droop":[{"gen": 99, "nu": 2.0}]})"));
}

TEST_CASE("solution JSON round trips through read_solution_state") {
  const GridCase g = load_case(data_path("case9.m")).grid;
  GridState st = case_state(g);
  st.v[3] = 1.0321;
  st.delta[3] = 0.1234;
  st.p_g[1] = 0.777;
  st.q_g[2] = -0.123;
  st.delta_f = -0.002;

  SolutionMeta meta;
  meta.solver = "mcp";
  meta.iterations = 5;
  meta.residual_inf = 3e-9;
  const std::string text = write_solution(g, st, meta, SolutionFormat::json);

  const nlohmann::json doc = nlohmann::json::parse(text);
  CHECK(doc.at("schema") == "pfmcp-solution/1");
  CHECK(doc.at("case") == g.name);
  CHECK(doc.at("solver").at("name") == "mcp");
  CHECK(doc.at("solver").at("iterations") == 5);
  CHECK(doc.at("buses").size() == 9);
  CHECK(doc.at("generators").size() == 3);
  CHECK(doc.at("summary").contains("frequency_hz"));
  CHECK(doc.at("metadata").contains("wall_time_sec"));

  const GridState back = read_solution_state(g, text);
  CHECK((back.v - st.v).lpNorm<Eigen::Infinity>() <= 1e-12);
  CHECK((back.delta - st.delta).lpNorm<Eigen::Infinity>() <= 1e-12);
  CHECK((back.p_g - st.p_g).lpNorm<Eigen::Infinity>() <= 1e-12);
  CHECK((back.q_g - st.q_g).lpNorm<Eigen::Infinity>() <= 1e-12);
  CHECK(back.delta_f == doctest::Approx(st.delta_f));

  CHECK_THROWS(read_solution_state(g, "{}"));
  CHECK_THROWS(read_solution_state(g, "not json"));
}

TEST_CASE("solution ids bridge across case edits") {
  // A state written for the full case still seeds a case with one generator
  // removed: matching ids load, the removed one is skipped.
  const GridCase g = load_case(data_path("case9.m")).grid;
  GridState st = case_state(g);
  for (int k = 0; k < st.p_g.size(); ++k) st.p_g[k] = 0.1 * (k + 1);
  const std::string text = write_solution(g, st, SolutionMeta{}, SolutionFormat::json);

  GridCase reduced = g;
  reduced.gens.erase(reduced.gens.begin() + 1);
  const GridState back = read_solution_state(reduced, text);
  REQUIRE(back.p_g.size() == 2);
  CHECK(back.p_g[0] == doctest::Approx(0.1));
  CHECK(back.p_g[1] == doctest::Approx(0.3));  // originally the third generator
}

TEST_CASE("CSV output carries the shared header and typed rows") {
  const GridCase g = load_case(data_path("case9.m")).grid;
  const GridState st = case_state(g);
  SolutionMeta meta;
  meta.solver = "nr";
  meta.status = "converged";
  meta.iterations = 4;
  const std::string text = write_solution(g, st, meta, SolutionFormat::csv);

  CHECK(text.rfind("type,id,bus,v_pu,angle_deg,p_mw,q_mvar,value\n", 0) == 0);
  CHECK(text.find("summary,,,,,,,nr:converged:4\n") != std::string::npos);
  CHECK(text.find("frequency,,,,,,,60\n") != std::string::npos);
  int bus_rows = 0, gen_rows = 0;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.rfind("bus,", 0) == 0) ++bus_rows;
    if (line.rfind("gen,", 0) == 0) ++gen_rows;
  }
  CHECK(bus_rows == 9);
  CHECK(gen_rows == 3);
}

TEST_CASE("frequency label formats nominal and depressed frequencies") {
  CHECK(frequency_hz_label(0.0) == "60.00 Hz");
  CHECK(frequency_hz_label(-0.0013333333) == "59.92 Hz");
  CHECK(frequency_hz_label(0.001) == "60.06 Hz");
}

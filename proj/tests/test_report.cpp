#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "chpsim/report.hpp"
#include "test_support.hpp"

using namespace chpsim;
using Catch::Approx;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

TEST_CASE("settling time", "[report]") {
  const int n = 10001;
  const double dt = 1e-3;
  std::vector<double> time(n);
  for (int i = 0; i < n; ++i) time[static_cast<std::size_t>(i)] = i * dt;

  SECTION("signal already inside the band settles immediately") {
    const Eigen::VectorXd flat = Eigen::VectorXd::Constant(n, 0.01);
    const auto t = settling_time(flat, time, 0.01, 0.02);
    REQUIRE(t.has_value());
    REQUIRE(*t == 0.0);
  }

  SECTION("exponential decay crosses the band at ln(50)") {
    Eigen::VectorXd decay(n);
    for (int i = 0; i < n; ++i) decay(i) = std::exp(-time[static_cast<std::size_t>(i)]);
    const auto t = settling_time(decay, time, 0.0, 0.02);
    REQUIRE(t.has_value());
    REQUIRE(*t == Approx(std::log(50.0)).margin(dt + 1e-12));
  }

  SECTION("divergence is reported as absent") {
    Eigen::VectorXd grow(n);
    for (int i = 0; i < n; ++i) grow(i) = 0.001 * std::exp(time[static_cast<std::size_t>(i)]);
    REQUIRE_FALSE(settling_time(grow, time, 0.0, 0.02).has_value());
  }

  SECTION("settling is reported relative to the disturbance") {
    Eigen::VectorXd decay(n);
    for (int i = 0; i < n; ++i)
      decay(i) = time[static_cast<std::size_t>(i)] < 2.0
                     ? 0.0
                     : std::exp(-(time[static_cast<std::size_t>(i)] - 2.0));
    const auto t = settling_time(decay, time, 0.0, 0.02, 2.0);
    REQUIRE(t.has_value());
    REQUIRE(*t == Approx(std::log(50.0)).margin(dt + 1e-12));
  }
}

TEST_CASE("max deviation", "[report]") {
  std::vector<double> time{0.0, 0.1, 0.2, 0.3};
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(4);
  REQUIRE(max_deviation(zero, time, 0.0, 0.3) == 0.0);

  Eigen::VectorXd spike(4);
  spike << 0.0, -0.08, 0.02, 0.0;
  REQUIRE(max_deviation(spike, time, 0.0, 0.3) == Approx(0.08));

  REQUIRE_THROWS_AS(max_deviation(spike, time, 5.0, 6.0), ValidationError);
}

TEST_CASE("csv output", "[report]") {
  const Scenario sc = load_scenario(testing::scenario_path("null.scn"));

  SECTION("row count and header follow the contract") {
    const Trajectory traj = simulate(sc, SimOptions{.t_end = 0.01});
    write_csv("tmp_null.csv", traj);
    const CsvTable table = read_csv("tmp_null.csv");
    REQUIRE(table.values.rows() == 11); // t_end/dt + 1
    REQUIRE(table.names.front() == "t");
    REQUIRE(table.names[1] == "omega_1");
    REQUIRE(table.names.back() == "Tbar");
    // 3 omega + 2 eta + 2 pG + 10 TE + 10 TN + 3 hG + 1 pP + 1 hP + Tbar
    REQUIRE(table.names.size() == 1 + 3 + 2 + 2 + 10 + 10 + 3 + 1 + 1 + 1);

    // null experiment: every column but t is identically zero
    for (Eigen::Index j = 1; j < table.values.cols(); ++j)
      REQUIRE(table.values.col(j).cwiseAbs().maxCoeff() == 0.0);
    std::remove("tmp_null.csv");
  }

  SECTION("byte-identical output across runs") {
    const Trajectory a = simulate(sc, SimOptions{.t_end = 0.05});
    const Trajectory b = simulate(sc, SimOptions{.t_end = 0.05});
    write_csv("tmp_a.csv", a);
    write_csv("tmp_b.csv", b);
    REQUIRE(slurp("tmp_a.csv") == slurp("tmp_b.csv"));
    std::remove("tmp_a.csv");
    std::remove("tmp_b.csv");
  }
}

TEST_CASE("run report round-trips through the csv", "[report]") {
  Scenario sc = load_scenario(testing::scenario_path("paper_mode1.scn"));
  sc.disturbances[0].time = 0.5;
  const CombinedSystem sys(sc);
  const Trajectory traj = simulate(sys, SimOptions{.t_end = 3.0});
  const RunReport report = build_run_report(traj, sys);

  write_csv("tmp_roundtrip.csv", traj);
  const CsvTable table = read_csv("tmp_roundtrip.csv");
  std::vector<double> time(static_cast<std::size_t>(table.values.rows()));
  for (Eigen::Index i = 0; i < table.values.rows(); ++i)
    time[static_cast<std::size_t>(i)] = table.values(i, 0);

  // metrics recomputed from the file match the in-memory report exactly
  for (int b = 0; b < 3; ++b) {
    const Eigen::VectorXd omega = table.column("omega_" + std::to_string(b + 1));
    const Eigen::Index tail = omega.size() - omega.size() / 10;
    const double steady = omega.tail(omega.size() - tail).mean();
    const auto settle = settling_time(omega, time, steady, report.settle_band, 0.5);
    REQUIRE(settle.has_value() == report.settling[static_cast<std::size_t>(b)].has_value());
    if (settle)
      REQUIRE(*settle == *report.settling[static_cast<std::size_t>(b)]);
    REQUIRE(max_deviation(omega, time, 0.5, time.back()) ==
            report.max_dev[static_cast<std::size_t>(b)]);
  }
  std::remove("tmp_roundtrip.csv");
}

TEST_CASE("run orchestration writes files", "[report]") {
  const Scenario sc = load_scenario(testing::scenario_path("null.scn"));
  RunOptions opt;
  opt.t_end = 0.02;
  opt.out_dir = ".";
  const RunResult result = run_scenario(sc, opt);
  REQUIRE(result.csv_path == "./null_mode1.csv");
  REQUIRE(slurp(result.report_path).find("chpsim run report") == 0);
  REQUIRE(result.report.steady_freq == 0.0);
  REQUIRE(result.report.secure);

  // a second run reproduces both files byte for byte
  const std::string csv = slurp(result.csv_path);
  const std::string rep = slurp(result.report_path);
  const RunResult again = run_scenario(sc, opt);
  REQUIRE(slurp(again.csv_path) == csv);
  REQUIRE(slurp(again.report_path) == rep);

  std::remove(result.csv_path.c_str());
  std::remove(result.report_path.c_str());
}

TEST_CASE("audits pass on engine trajectories across random scenarios", "[report]") {
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> cost(0.4, 2.5);
  std::uniform_real_distribution<double> step(-0.15, 0.15);
  const Scenario base = load_scenario(testing::scenario_path("paper_mode2.scn"));
  for (int trial = 0; trial < 5; ++trial) {
    Scenario sc = base;
    for (auto& g : sc.generators) g.cost = cost(rng);
    for (auto& s : sc.sources) s.cost = cost(rng);
    sc.coupling.pumps[0].freq_droop = cost(rng);
    sc.coupling.pumps[0].temp_gain = 0.2 * cost(rng);
    sc.disturbances[0].magnitude = step(rng);
    if (trial % 2 == 1) {
      // mix higher-order dynamics into both sectors
      sc.generators[0].block = BlockKind::DemoSecondOrder;
      sc.sources[0].block = BlockKind::DemoSecondOrder;
    }
    sc.electric.generator_buses.clear();
    for (const auto& g : sc.generators) sc.electric.generator_buses.push_back(g.bus);

    for (const PumpMode mode : {PumpMode::FrequencyLoad, PumpMode::ConverterLinked}) {
      const CombinedSystem sys(sc, mode);
      const Trajectory traj = simulate(sys, SimOptions{.dt = 2e-3, .t_end = 40.0});
      const RunReport report = build_run_report(traj, sys);
      INFO("trial " << trial << " mode " << (mode == PumpMode::FrequencyLoad ? 1 : 2));
      REQUIRE(report.audit_note.empty());
      REQUIRE(report.audits.size() == 5);
      for (const auto& a : report.audits) {
        INFO("block " << a.name << " slack " << a.worst_slack);
        REQUIRE(a.pass);
      }
    }
  }
}

TEST_CASE("mode comparison on the reference fixture", "[report]") {
  const Scenario sc = load_scenario(testing::scenario_path("paper_mode2.scn"));
  RunOptions opt;
  opt.dt = 2e-3;
  const CompareResult result = compare_modes(sc, opt);

  SECTION("both modes certify against their own oracle") {
    REQUIRE(result.mode1.report.dispatch.pass);
    REQUIRE(result.mode2.report.dispatch.pass);
  }

  SECTION("the converter scheme holds the frequency closer to nominal") {
    REQUIRE(std::abs(result.mode2.report.steady_freq) <=
            std::abs(result.mode1.report.steady_freq));
    double dev1 = 0.0, dev2 = 0.0;
    for (int b = 0; b < 3; ++b) {
      dev1 = std::max(dev1, result.mode1.report.max_dev[static_cast<std::size_t>(b)]);
      dev2 = std::max(dev2, result.mode2.report.max_dev[static_cast<std::size_t>(b)]);
    }
    REQUIRE(dev2 < dev1);
  }

  SECTION("each outcome wins under its own objective") {
    REQUIRE(result.mode2.joint_objective <= result.mode1.joint_objective);
    REQUIRE(result.mode1.separate_objective <= result.mode2.separate_objective);
  }

  write_compare_report("tmp_compare.txt", result);
  REQUIRE(slurp("tmp_compare.txt").find("chpsim mode comparison") == 0);
  std::remove("tmp_compare.txt");
}

TEST_CASE("mode comparison on a pump-free scenario is a no-op", "[report]") {
  const Scenario sc = load_scenario(testing::scenario_path("no_pump.scn"));
  RunOptions opt;
  opt.t_end = 4.0;
  const CompareResult result = compare_modes(sc, opt);
  REQUIRE(result.mode1.report.steady_freq == result.mode2.report.steady_freq);
  REQUIRE(result.mode1.gen_power == result.mode2.gen_power);
  REQUIRE(result.mode1.source_heat == result.mode2.source_heat);
  REQUIRE(result.mode1.damping_load == result.mode2.damping_load);
  for (std::size_t b = 0; b < result.mode1.report.max_dev.size(); ++b)
    REQUIRE(result.mode1.report.max_dev[b] == result.mode2.report.max_dev[b]);
  REQUIRE(result.mode1.separate_objective == result.mode2.separate_objective);
}

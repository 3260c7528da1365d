#pragma once

// Run reports, CSV serialization, and the run/compare orchestration shared
// by the command-line front end and the integration tests. Output is
// deterministic: identical scenarios produce byte-identical files.

#include <Eigen/Dense>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "chpsim/dispatch.hpp"
#include "chpsim/dynamics.hpp"
#include "chpsim/errors.hpp"
#include "chpsim/metrics.hpp"
#include "chpsim/scenario.hpp"

namespace chpsim {

/// Full double precision, locale-independent.
inline std::string fmt17(double v) {
  char buf[40];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v,
                                       std::chars_format::general, 17);
  return std::string(buf, ptr);
}

// ---------------------------------------------------------------------------
// Time-series CSV
// ---------------------------------------------------------------------------

/// Column order of the time-series file: t, bus frequencies, line angles,
/// generator outputs, edge temperatures, node temperatures, source outputs,
/// pump electric and heat powers, average temperature.
struct CsvColumns {
  std::vector<std::string> names;
  // source: true = derived matrix, false = state matrix; then column index
  std::vector<std::pair<bool, int>> sources;
};

inline CsvColumns csv_columns(const Trajectory& traj) {
  const auto& sl = traj.layout;
  const auto& dl = traj.dlayout;
  CsvColumns cols;
  const auto add_derived = [&](int offset, int count) {
    for (int i = 0; i < count; ++i) {
      cols.names.push_back(traj.derived_names[static_cast<std::size_t>(offset + i)]);
      cols.sources.emplace_back(true, offset + i);
    }
  };
  const auto add_state = [&](int offset, int count) {
    for (int i = 0; i < count; ++i) {
      cols.names.push_back(traj.state_names[static_cast<std::size_t>(offset + i)]);
      cols.sources.emplace_back(false, offset + i);
    }
  };
  add_derived(dl.omega_offset, dl.n_bus);
  add_state(sl.eta_offset, sl.n_lines);
  add_derived(dl.gen_offset, dl.n_gen);
  add_state(sl.temp_offset, sl.n_heat_edges);                        // TE_*
  add_state(sl.temp_offset + sl.n_heat_edges, sl.n_temp - sl.n_heat_edges); // TN_*
  add_derived(dl.src_offset, dl.n_src);
  add_derived(dl.pump_p_offset, dl.n_pumps);
  add_derived(dl.pump_h_offset, dl.n_pumps);
  add_derived(dl.tbar_offset, 1);
  return cols;
}

inline void write_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const CsvColumns cols = csv_columns(traj);
  out << "t";
  for (const auto& name : cols.names) out << ',' << name;
  out << '\n';
  std::string line;
  for (Eigen::Index i = 0; i < traj.n_samples(); ++i) {
    line.clear();
    line += fmt17(traj.time[static_cast<std::size_t>(i)]);
    for (const auto& [derived, col] : cols.sources) {
      line += ',';
      line += fmt17(derived ? traj.derived(i, col) : traj.states(i, col));
    }
    line += '\n';
    out << line;
  }
  if (!out) throw IoError("failed while writing '" + path + "'");
}

struct CsvTable {
  std::vector<std::string> names;
  Eigen::MatrixXd values; // one row per instant, first column is t

  Eigen::VectorXd column(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return values.col(static_cast<Eigen::Index>(i));
    throw IoError("csv: no column named '" + name + "'");
  }
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("csv: empty file '" + path + "'");
  CsvTable table;
  {
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',')) table.names.push_back(cell);
  }
  std::vector<double> data;
  Eigen::Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::size_t cells = 0;
    while (std::getline(row, cell, ',')) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc{} || ptr != cell.data() + cell.size())
        throw IoError("csv: malformed number '" + cell + "' in '" + path + "'");
      data.push_back(v);
      ++cells;
    }
    if (cells != table.names.size()) throw IoError("csv: ragged row in '" + path + "'");
    ++rows;
  }
  table.values.resize(rows, static_cast<Eigen::Index>(table.names.size()));
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < table.values.cols(); ++j)
      table.values(i, j) =
          data[static_cast<std::size_t>(i) * table.names.size() + static_cast<std::size_t>(j)];
  return table;
}

// ---------------------------------------------------------------------------
// Run report
// ---------------------------------------------------------------------------

struct BlockAuditSummary {
  std::string name;
  bool pass = false;
  double worst_slack = 0.0;
  bool plain_form = true; // no dissipation rate declared, plain passivity checked
};

struct RunReport {
  std::string scenario_name;
  int mode = 1;
  double dt = 0.0;
  double t_end = 0.0;
  double settle_band = 0.0;
  double disturbance_time = 0.0; // last scheduled step, 0 when none
  std::vector<int> buses;        // 1-based ids, converter buses included
  std::vector<std::optional<double>> settling; // per bus, relative to the disturbance
  std::vector<double> max_dev;                 // per bus, post-disturbance window
  double steady_freq = 0.0;  // tail mean over buses
  double steady_temp = 0.0;  // tail mean of the average temperature
  double security_margin = 0.0;
  bool secure = false;
  OptimalityReport dispatch;
  std::vector<BlockAuditSummary> audits;
  std::string audit_note; // set when the audits could not run
};

inline constexpr double default_settle_band = 2e-4;

namespace detail {

inline Eigen::Index tail_begin_index(Eigen::Index n) {
  return n - std::max<Eigen::Index>(n / 10, std::min<Eigen::Index>(n, 2));
}

inline double tail_mean(const Eigen::VectorXd& col) {
  const Eigen::Index begin = tail_begin_index(col.size());
  return col.segment(begin, col.size() - begin).mean();
}

} // namespace detail

/// Metrics, oracle comparison, and passivity audits for one finished run.
inline RunReport build_run_report(const Trajectory& traj, const CombinedSystem& sys,
                                  double settle_band = default_settle_band,
                                  double dispatch_tol = 1e-4) {
  const Scenario& sc = sys.scenario();
  RunReport report;
  report.scenario_name = sc.name;
  report.mode = sys.mode() == PumpMode::FrequencyLoad ? 1 : 2;
  report.dt = traj.dt;
  report.t_end = traj.time.back();
  report.settle_band = settle_band;
  for (const auto& d : sc.disturbances)
    report.disturbance_time = std::max(report.disturbance_time, d.time);

  const auto& dl = traj.dlayout;
  double freq_sum = 0.0;
  for (int b = 0; b < dl.n_bus; ++b) {
    report.buses.push_back(b + 1);
    const Eigen::VectorXd omega = traj.derived.col(dl.omega_offset + b);
    const double steady = detail::tail_mean(omega);
    freq_sum += steady;
    report.settling.push_back(
        settling_time(omega, traj.time, steady, settle_band, report.disturbance_time));
    report.max_dev.push_back(
        max_deviation(omega, traj.time, report.disturbance_time, traj.time.back()));
  }
  report.steady_freq = freq_sum / dl.n_bus;
  report.steady_temp = detail::tail_mean(traj.derived.col(dl.tbar_offset));

  Eigen::VectorXd eta_tail(traj.layout.n_lines);
  for (int e = 0; e < traj.layout.n_lines; ++e)
    eta_tail(e) = detail::tail_mean(traj.states.col(traj.layout.eta_offset + e));
  const auto [secure, margin] = check_security(eta_tail);
  report.secure = secure;
  report.security_margin = margin;

  const DispatchInputs inputs = dispatch_inputs(sc, traj.time.back());
  const DispatchSolution oracle = sys.mode() == PumpMode::FrequencyLoad
                                      ? solve_dispatch_mode1(inputs).combined()
                                      : solve_dispatch_mode2(inputs);
  report.dispatch = verify_power_sharing(traj, oracle, inputs, dispatch_tol);

  // passivity audit of every generation block along the recorded run
  try {
    const EquilibriumPoint eq = compute_equilibrium(sys);
    const auto audit_block = [&](const PassiveBlock& block, const std::string& name,
                                 int input_col, int state_offset) {
      const Eigen::VectorXd inputs_trace = traj.derived.col(input_col);
      const Eigen::MatrixXd states_trace =
          traj.states.middleCols(state_offset, block.dim);
      BlockEquilibrium beq;
      beq.state = eq.state.segment(state_offset, block.dim);
      beq.input = input_col == dl.tbar_offset ? eq.avg_temp : eq.sync_freq;
      beq.output = block.characteristic(beq.input);
      const PassivityReport audit =
          passivity_audit(block, inputs_trace, states_trace, traj.dt, beq);
      report.audits.push_back({name, audit.pass, audit.worst_slack, audit.plain_form});
    };
    for (std::size_t g = 0; g < sys.generator_blocks().size(); ++g)
      audit_block(sys.generator_blocks()[g],
                  "generator_bus_" + std::to_string(sc.generators[g].bus + 1),
                  dl.omega_offset + sc.generators[g].bus, traj.layout.gen_offset[g]);
    for (std::size_t s = 0; s < sys.source_blocks().size(); ++s)
      audit_block(sys.source_blocks()[s],
                  "source_edge_" + std::to_string(sc.sources[s].edge + 1), dl.tbar_offset,
                  traj.layout.src_offset[s]);
  } catch (const std::exception& err) {
    report.audit_note = err.what();
  }
  return report;
}

inline void write_report(const std::string& path, const RunReport& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "chpsim run report\n";
  out << "scenario = " << r.scenario_name << "\n";
  out << "mode = " << r.mode << "\n";
  out << "dt = " << fmt17(r.dt) << "\n";
  out << "t_end = " << fmt17(r.t_end) << "\n";
  out << "settle_band = " << fmt17(r.settle_band) << "\n";
  out << "disturbance_time = " << fmt17(r.disturbance_time) << "\n";
  out << "steady_freq = " << fmt17(r.steady_freq) << "\n";
  out << "steady_temp = " << fmt17(r.steady_temp) << "\n";
  out << "security_margin = " << fmt17(r.security_margin) << "\n";
  out << "secure = " << (r.secure ? "yes" : "no") << "\n";
  out << "\n[settling]\n";
  for (std::size_t b = 0; b < r.buses.size(); ++b)
    out << "bus_" << r.buses[b] << " = "
        << (r.settling[b] ? fmt17(*r.settling[b]) : std::string("absent")) << "\n";
  out << "\n[max_deviation]\n";
  for (std::size_t b = 0; b < r.buses.size(); ++b)
    out << "bus_" << r.buses[b] << " = " << fmt17(r.max_dev[b]) << "\n";
  out << "\n[dispatch]\n";
  out << "settled = " << (r.dispatch.settled ? "yes" : "no") << "\n";
  out << "pass = " << (r.dispatch.pass ? "yes" : "no") << "\n";
  out << "tolerance = " << fmt17(r.dispatch.tolerance) << "\n";
  out << "tail_start = " << fmt17(r.dispatch.tail_start) << "\n";
  out << "tail_peak_to_peak = " << fmt17(r.dispatch.settle_peak_to_peak) << "\n";
  out << "max_delta = " << fmt17(r.dispatch.max_delta) << "\n";
  out << "gen_marginal_spread = " << fmt17(r.dispatch.gen_marginal_spread) << "\n";
  out << "src_marginal_spread = " << fmt17(r.dispatch.src_marginal_spread) << "\n";
  if (!r.dispatch.diagnostic.empty()) out << "diagnostic = " << r.dispatch.diagnostic << "\n";
  for (const auto& row : r.dispatch.rows)
    out << "row = name:" << row.name << " simulated:" << fmt17(row.simulated)
        << " oracle:" << fmt17(row.oracle) << " delta:" << fmt17(row.delta) << "\n";
  out << "\n[passivity]\n";
  if (!r.audit_note.empty()) out << "note = " << r.audit_note << "\n";
  for (const auto& a : r.audits)
    out << "block = name:" << a.name << " pass:" << (a.pass ? "yes" : "no")
        << " worst_slack:" << fmt17(a.worst_slack)
        << " form:" << (a.plain_form ? "plain" : "declared") << "\n";
  if (!out) throw IoError("failed while writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

struct RunOptions {
  std::optional<int> mode;
  std::optional<double> dt;
  std::optional<double> t_end;
  double settle_band = default_settle_band;
  std::string out_dir = ".";
  bool write_files = true;
};

struct RunResult {
  Trajectory trajectory;
  RunReport report;
  std::string csv_path;
  std::string report_path;
};

inline RunResult run_scenario(const Scenario& sc, const RunOptions& opt = {}) {
  PumpMode mode = sc.sim.mode;
  if (opt.mode) {
    if (*opt.mode != 1 && *opt.mode != 2)
      throw ValidationError("run: mode must be 1 or 2");
    mode = *opt.mode == 1 ? PumpMode::FrequencyLoad : PumpMode::ConverterLinked;
  }
  Scenario adjusted = sc;
  if (opt.dt) adjusted.sim.dt = *opt.dt;
  if (opt.t_end) adjusted.sim.t_end = *opt.t_end;
  validate_scenario(adjusted);

  CombinedSystem sys(adjusted, mode);
  RunResult result;
  result.trajectory = simulate(sys);
  result.report = build_run_report(result.trajectory, sys, opt.settle_band);
  if (opt.write_files) {
    std::error_code ec;
    std::filesystem::create_directories(opt.out_dir, ec);
    const std::string stem =
        opt.out_dir + "/" + adjusted.name + "_mode" + std::to_string(result.report.mode);
    result.csv_path = stem + ".csv";
    result.report_path = stem + "_report.txt";
    write_csv(result.csv_path, result.trajectory);
    write_report(result.report_path, result.report);
  }
  return result;
}

/// Quadratic objective of the mode 1 problems evaluated at given values.
inline double objective_separate(const DispatchInputs& in, const Eigen::VectorXd& gen_power,
                                 const Eigen::VectorXd& pump_power,
                                 const Eigen::VectorXd& damping_load,
                                 const Eigen::VectorXd& source_heat) {
  double obj = 0.0;
  for (int j = 0; j < in.n_gen(); ++j)
    obj += 0.5 * in.gen_cost[static_cast<std::size_t>(j)] * gen_power(j) * gen_power(j);
  for (int k = 0; k < in.n_pumps(); ++k)
    obj += 0.5 / in.pump_droop[static_cast<std::size_t>(k)] * pump_power(k) * pump_power(k);
  for (int b = 0; b < in.n_bus(); ++b)
    obj += 0.5 / in.bus_damping[static_cast<std::size_t>(b)] * damping_load(b) * damping_load(b);
  for (int j = 0; j < in.n_src(); ++j)
    obj += 0.5 * in.src_cost[static_cast<std::size_t>(j)] * source_heat(j) * source_heat(j);
  return obj;
}

/// Quadratic objective of the joint problem evaluated at given values.
inline double objective_joint(const DispatchInputs& in, const Eigen::VectorXd& gen_power,
                              const Eigen::VectorXd& damping_load,
                              const Eigen::VectorXd& source_heat) {
  const double weight = in.n_pumps() > 0 ? in.common_temp_gain() / in.common_cop() : 1.0;
  double obj = 0.0;
  for (int j = 0; j < in.n_gen(); ++j)
    obj += 0.5 * in.gen_cost[static_cast<std::size_t>(j)] * gen_power(j) * gen_power(j);
  for (int j = 0; j < in.n_src(); ++j)
    obj += 0.5 * weight * in.src_cost[static_cast<std::size_t>(j)] * source_heat(j) * source_heat(j);
  for (int b = 0; b < in.n_bus(); ++b)
    obj += 0.5 / in.bus_damping[static_cast<std::size_t>(b)] * damping_load(b) * damping_load(b);
  return obj;
}

struct ModeOutcome {
  RunReport report;
  Eigen::VectorXd gen_power, pump_power, damping_load, source_heat; // tail means
  double separate_objective = 0.0;
  double joint_objective = 0.0;
};

struct CompareResult {
  ModeOutcome mode1;
  ModeOutcome mode2;
};

namespace detail {

inline ModeOutcome mode_outcome(const RunResult& run, const DispatchInputs& in) {
  ModeOutcome out;
  out.report = run.report;
  const auto& traj = run.trajectory;
  const auto& dl = traj.dlayout;
  const auto tail_vec = [&](int offset, int count) {
    Eigen::VectorXd v(count);
    for (int i = 0; i < count; ++i) v(i) = tail_mean(traj.derived.col(offset + i));
    return v;
  };
  out.gen_power = tail_vec(dl.gen_offset, dl.n_gen);
  out.source_heat = tail_vec(dl.src_offset, dl.n_src);
  out.pump_power = tail_vec(dl.pump_p_offset, dl.n_pumps);
  out.damping_load = tail_vec(dl.damping_offset, in.n_bus());
  out.separate_objective =
      objective_separate(in, out.gen_power, out.pump_power, out.damping_load, out.source_heat);
  out.joint_objective = objective_joint(in, out.gen_power, out.damping_load, out.source_heat);
  return out;
}

} // namespace detail

/// Runs the same disturbance under both pump modes and tabulates the
/// metrics plus both dispatch objectives evaluated on both outcomes.
inline CompareResult compare_modes(const Scenario& sc, RunOptions opt = {}) {
  opt.write_files = false;
  RunOptions opt1 = opt, opt2 = opt;
  opt1.mode = 1;
  opt2.mode = 2;
  const RunResult run1 = run_scenario(sc, opt1);
  const RunResult run2 = run_scenario(sc, opt2);
  const DispatchInputs in = dispatch_inputs(sc, run1.trajectory.time.back());
  CompareResult result;
  result.mode1 = detail::mode_outcome(run1, in);
  result.mode2 = detail::mode_outcome(run2, in);
  return result;
}

inline void write_compare_report(const std::string& path, const CompareResult& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const auto banner = [&](const ModeOutcome& m, const std::string& tag) {
    out << "[" << tag << "]\n";
    out << "steady_freq = " << fmt17(m.report.steady_freq) << "\n";
    out << "steady_temp = " << fmt17(m.report.steady_temp) << "\n";
    double worst_dev = 0.0;
    for (double d : m.report.max_dev) worst_dev = std::max(worst_dev, d);
    out << "max_deviation = " << fmt17(worst_dev) << "\n";
    for (std::size_t b = 0; b < m.report.buses.size(); ++b)
      out << "settling_bus_" << m.report.buses[b] << " = "
          << (m.report.settling[b] ? fmt17(*m.report.settling[b]) : std::string("absent"))
          << "\n";
    out << "separate_objective = " << fmt17(m.separate_objective) << "\n";
    out << "joint_objective = " << fmt17(m.joint_objective) << "\n";
    out << "dispatch_pass = " << (m.report.dispatch.pass ? "yes" : "no") << "\n";
    for (const auto& row : m.report.dispatch.rows)
      out << "row = name:" << row.name << " simulated:" << fmt17(row.simulated)
          << " oracle:" << fmt17(row.oracle) << " delta:" << fmt17(row.delta) << "\n";
    out << "\n";
  };
  out << "chpsim mode comparison\n\n";
  banner(c.mode1, "mode1");
  banner(c.mode2, "mode2");
  if (!out) throw IoError("failed while writing '" + path + "'");
}

} // namespace chpsim

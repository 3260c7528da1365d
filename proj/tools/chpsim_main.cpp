// chpsim command line: validate, run, verify, and compare combined heat and
// power scenarios. Exit codes: 0 success, 1 validation failure, 2 numerical
// failure, 3 I/O failure.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>

#include "chpsim/report.hpp"

namespace {

struct CommonFlags {
  std::string scenario_path;
  std::string out_dir = ".";
  int mode = 0; // 0 = use the scenario's setting
  double dt = 0.0;
  double t_end = 0.0;
  double settle_band = chpsim::default_settle_band;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_outputs) {
  cmd->add_option("scenario", flags.scenario_path, "scenario file")->required();
  cmd->add_option("--mode", flags.mode, "pump participation mode (1 or 2)")
      ->check(CLI::Range(1, 2));
  cmd->add_option("--dt", flags.dt, "integration step in seconds")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--t-end", flags.t_end, "horizon in seconds")->check(CLI::PositiveNumber);
  cmd->add_option("--settle-band", flags.settle_band,
                  "settling band on frequency deviation (rad/s)")
      ->check(CLI::PositiveNumber);
  if (with_outputs) cmd->add_option("--out", flags.out_dir, "output directory");
}

chpsim::RunOptions to_options(const CommonFlags& flags, bool write_files) {
  chpsim::RunOptions opt;
  if (flags.mode != 0) opt.mode = flags.mode;
  if (flags.dt > 0.0) opt.dt = flags.dt;
  if (flags.t_end > 0.0) opt.t_end = flags.t_end;
  opt.settle_band = flags.settle_band;
  opt.out_dir = flags.out_dir;
  opt.write_files = write_files;
  return opt;
}

void print_dispatch_table(const chpsim::OptimalityReport& d) {
  std::cout << "dispatch verification: " << (d.pass ? "pass" : "FAIL")
            << (d.settled ? "" : " (tail not settled)") << "\n";
  if (!d.diagnostic.empty()) std::cout << "  " << d.diagnostic << "\n";
  for (const auto& row : d.rows)
    std::cout << "  " << row.name << ": simulated " << chpsim::fmt17(row.simulated)
              << ", oracle " << chpsim::fmt17(row.oracle) << ", delta "
              << chpsim::fmt17(row.delta) << "\n";
}

int do_check(const CommonFlags& flags) {
  const chpsim::Scenario sc = chpsim::load_scenario(flags.scenario_path);
  std::cout << "scenario '" << sc.name << "' is valid: " << sc.electric.n_bus << " buses, "
            << sc.electric.n_lines() << " lines, " << sc.heat.n_edges() << " heat edges, "
            << sc.heat.n_node << " heat nodes, " << sc.coupling.n_pumps() << " pump(s), mode "
            << (sc.sim.mode == chpsim::PumpMode::FrequencyLoad ? 1 : 2) << "\n";
  return 0;
}

int do_run(const CommonFlags& flags, bool verify_required) {
  const chpsim::Scenario sc = chpsim::load_scenario(flags.scenario_path);
  const chpsim::RunResult result = chpsim::run_scenario(sc, to_options(flags, true));
  std::cout << "wrote " << result.csv_path << "\n";
  std::cout << "wrote " << result.report_path << "\n";
  std::cout << "steady frequency deviation " << chpsim::fmt17(result.report.steady_freq)
            << " rad/s, steady average temperature " << chpsim::fmt17(result.report.steady_temp)
            << "\n";
  print_dispatch_table(result.report.dispatch);
  if (verify_required && !result.report.dispatch.pass) return 2;
  return 0;
}

int do_verify(const CommonFlags& flags) {
  const chpsim::Scenario sc = chpsim::load_scenario(flags.scenario_path);
  chpsim::RunOptions opt = to_options(flags, false);
  const chpsim::RunResult result = chpsim::run_scenario(sc, opt);
  const auto& report = result.report;

  bool ok = true;
  const auto line = [&](const std::string& name, bool pass, const std::string& detail) {
    std::cout << (pass ? "[pass] " : "[FAIL] ") << name << ": " << detail << "\n";
    ok = ok && pass;
  };
  line("security", report.secure,
       "equilibrium angle margin " + chpsim::fmt17(report.security_margin) + " rad");
  line("dispatch", report.dispatch.pass,
       report.dispatch.settled
           ? "max deviation from oracle " + chpsim::fmt17(report.dispatch.max_delta)
           : report.dispatch.diagnostic);
  line("marginal costs",
       report.dispatch.settled && report.dispatch.gen_marginal_spread < 1e-6 &&
           report.dispatch.src_marginal_spread < 1e-6,
       "generator spread " + chpsim::fmt17(report.dispatch.gen_marginal_spread) +
           ", source spread " + chpsim::fmt17(report.dispatch.src_marginal_spread));
  bool audits_ok = report.audit_note.empty();
  for (const auto& a : report.audits) audits_ok = audits_ok && a.pass;
  line("passivity", audits_ok,
       report.audit_note.empty() ? std::to_string(report.audits.size()) + " block(s) audited"
                                 : report.audit_note);
  print_dispatch_table(report.dispatch);
  return ok ? 0 : 2;
}

int do_compare(const CommonFlags& flags) {
  const chpsim::Scenario sc = chpsim::load_scenario(flags.scenario_path);
  const chpsim::CompareResult result = chpsim::compare_modes(sc, to_options(flags, false));
  std::error_code ec;
  std::filesystem::create_directories(flags.out_dir, ec);
  const std::string path = flags.out_dir + "/" + sc.name + "_compare.txt";
  chpsim::write_compare_report(path, result);
  std::cout << "wrote " << path << "\n";

  const auto row = [](const std::string& name, double v1, double v2) {
    std::cout << "  " << name << ": mode 1 " << chpsim::fmt17(v1) << ", mode 2 "
              << chpsim::fmt17(v2) << "\n";
  };
  std::cout << "mode comparison for '" << sc.name << "':\n";
  row("steady frequency deviation", result.mode1.report.steady_freq,
      result.mode2.report.steady_freq);
  double dev1 = 0.0, dev2 = 0.0;
  for (double d : result.mode1.report.max_dev) dev1 = std::max(dev1, d);
  for (double d : result.mode2.report.max_dev) dev2 = std::max(dev2, d);
  row("max transient deviation", dev1, dev2);
  row("separate-dispatch objective", result.mode1.separate_objective,
      result.mode2.separate_objective);
  row("joint-dispatch objective", result.mode1.joint_objective, result.mode2.joint_objective);
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"combined heat and power frequency-regulation simulator"};
  app.require_subcommand(1);

  CommonFlags check_flags, run_flags, verify_flags, compare_flags;
  bool run_verify = false;

  CLI::App* check = app.add_subcommand("check", "validate a scenario file");
  add_common(check, check_flags, false);

  CLI::App* run = app.add_subcommand("run", "simulate and write CSV plus report");
  add_common(run, run_flags, true);
  run->add_flag("--verify", run_verify, "fail when the dispatch verification fails");

  CLI::App* verify = app.add_subcommand("verify", "certify the settled dispatch against the oracle");
  add_common(verify, verify_flags, false);

  CLI::App* compare = app.add_subcommand("compare", "run both pump modes and tabulate");
  add_common(compare, compare_flags, true);

  try {
    app.parse(argc, argv);
    if (check->parsed()) return do_check(check_flags);
    if (run->parsed()) return do_run(run_flags, run_verify);
    if (verify->parsed()) return do_verify(verify_flags);
    if (compare->parsed()) return do_compare(compare_flags);
    return 0;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const chpsim::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const chpsim::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const chpsim::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

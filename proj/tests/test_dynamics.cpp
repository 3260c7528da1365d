#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "chpsim/dynamics.hpp"
#include "test_support.hpp"

using namespace chpsim;
using Catch::Approx;

TEST_CASE("line flow", "[dynamics]") {
  REQUIRE(line_flow(std::numbers::pi / 6.0, 1.0, 0.0) == Approx(0.5));
  REQUIRE(line_flow(0.0, 3.7, 0.25) == Approx(-0.25));
  REQUIRE(line_flow(0.3, 2.5, 0.1) == Approx(2.5 * std::sin(0.3) - 0.1).epsilon(1e-15));
}

TEST_CASE("mode 1 pump power", "[dynamics]") {
  REQUIRE(pump_mode1_power(0.0, 4.0) == 0.0);
  REQUIRE(pump_mode1_power(-0.02, 3.0) == Approx(-0.06));
  // heat output chains through the CoP
  const double cop = 3.0;
  REQUIRE(cop * pump_mode1_power(-0.02, 3.0) == Approx(-0.18));
}

TEST_CASE("rk4 step", "[dynamics]") {
  SECTION("scalar decay matches the stability polynomial") {
    Eigen::VectorXd x = Eigen::VectorXd::Ones(1);
    rk4_step([](double, const Eigen::VectorXd& s, Eigen::VectorXd& d) { d = -s; }, 0.0, 0.1, x);
    REQUIRE(x(0) == Approx(0.9048375).epsilon(1e-12));
  }

  SECTION("zero field leaves the state untouched") {
    Eigen::VectorXd x(3);
    x << 1.0, -2.0, 0.5;
    const Eigen::VectorXd before = x;
    rk4_step([](double, const Eigen::VectorXd& s, Eigen::VectorXd& d) { d.setZero(s.size()); },
             0.0, 0.1, x);
    REQUIRE(x == before);
  }

  SECTION("halving the step shrinks the error about sixteenfold") {
    const auto decay_error = [](double dt) {
      Eigen::VectorXd x = Eigen::VectorXd::Ones(1);
      const long n = std::lround(1.0 / dt);
      for (long i = 0; i < n; ++i)
        rk4_step([](double, const Eigen::VectorXd& s, Eigen::VectorXd& d) { d = -s; },
                 i * dt, dt, x);
      return std::abs(x(0) - std::exp(-1.0));
    };
    const double ratio = decay_error(0.02) / decay_error(0.01);
    REQUIRE(ratio > 12.0);
    REQUIRE(ratio < 20.0);
  }
}

TEST_CASE("right-hand side assembly", "[dynamics]") {
  const Scenario sc = load_scenario(testing::scenario_path("paper_mode1.scn"));
  const CombinedSystem sys(sc);
  const auto& layout = sys.layout();

  SECTION("origin is an equilibrium before the disturbance") {
    Eigen::VectorXd dx;
    sys.rhs(0.0, Eigen::VectorXd::Zero(layout.dim), dx);
    REQUIRE(dx.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("an active load step only accelerates the disturbed bus") {
    Eigen::VectorXd dx;
    sys.rhs(5.0, Eigen::VectorXd::Zero(layout.dim), dx);
    const int omega2 = layout.omega_offset + layout.bus_omega[1];
    REQUIRE(dx(omega2) == Approx(-0.1 / 3.5));
    dx(omega2) = 0.0;
    REQUIRE(dx.cwiseAbs().maxCoeff() == 0.0);
    // temperatures in particular stay put until the pump responds
    REQUIRE(dx.segment(layout.temp_offset, layout.n_temp).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("uniform temperatures do not diffuse") {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(layout.dim);
    x.segment(layout.temp_offset, layout.n_temp).setConstant(0.7);
    Eigen::VectorXd dx;
    sys.rhs(0.0, x, dx);
    REQUIRE(dx.segment(layout.temp_offset, layout.n_temp).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("simulation", "[dynamics]") {
  SECTION("zero disturbance keeps the trajectory at the origin") {
    const Scenario sc = load_scenario(testing::scenario_path("null.scn"));
    const Trajectory traj = simulate(sc, SimOptions{.t_end = 1.0});
    REQUIRE(traj.states.cwiseAbs().maxCoeff() < 1e-14);
    REQUIRE(traj.n_samples() == 1001);
  }

  SECTION("derivative jump at the step instant is confined to the disturbed bus") {
    const Scenario sc = load_scenario(testing::scenario_path("paper_mode1.scn"));
    const CombinedSystem sys(sc);
    const Trajectory traj = simulate(sys, SimOptions{.t_end = 6.0});
    const auto step_index = static_cast<Eigen::Index>(std::lround(5.0 / traj.dt));
    const Eigen::VectorXd state = traj.states.row(step_index);
    Eigen::VectorXd before, after;
    sys.rhs(5.0 - traj.dt, state, before);
    sys.rhs(5.0, state, after);
    const Eigen::VectorXd jump = after - before;
    const int omega2 = traj.layout.omega_offset + traj.layout.bus_omega[1];
    REQUIRE(jump(omega2) == Approx(-0.1 / 3.5));
    for (int c = 0; c < traj.layout.dim; ++c)
      if (c != omega2) REQUIRE(jump(c) == 0.0);
  }

  SECTION("step halving agrees at fourth order") {
    Scenario sc = load_scenario(testing::scenario_path("paper_mode1.scn"));
    sc.disturbances[0].time = 0.5;
    sc.sim.t_end = 2.0;
    const Trajectory coarse = simulate(sc, SimOptions{.dt = 2e-3});
    const Trajectory fine = simulate(sc, SimOptions{.dt = 1e-3});
    const Eigen::VectorXd end_coarse = coarse.states.row(coarse.n_samples() - 1);
    const Eigen::VectorXd end_fine = fine.states.row(fine.n_samples() - 1);
    REQUIRE((end_coarse - end_fine).cwiseAbs().maxCoeff() < 1e-10);
  }

  SECTION("thermal energy is conserved without injections") {
    std::mt19937_64 rng(23);
    const HeatNetwork heat = testing::random_flow_conserving_network(rng);
    const Scenario sc = testing::thermal_scenario(heat, 1e-3, 10.0);
    const CombinedSystem sys(sc);
    const auto& layout = sys.layout();

    Eigen::VectorXd x0 = Eigen::VectorXd::Zero(layout.dim);
    std::uniform_real_distribution<double> temp(-1.0, 1.0);
    for (int i = 0; i < layout.n_temp; ++i)
      x0(layout.temp_offset + i) = temp(rng);

    const Trajectory traj = simulate(sys, SimOptions{.initial_state = x0});
    const Eigen::VectorXd volume = heat.volume_vector();
    const double initial =
        volume.dot(x0.segment(layout.temp_offset, layout.n_temp));
    for (Eigen::Index i = 0; i < traj.n_samples(); i += 100) {
      const Eigen::VectorXd temps =
          traj.states.row(i).segment(layout.temp_offset, layout.n_temp);
      REQUIRE(std::abs(volume.dot(temps) - initial) < 1e-9);
    }
  }

  SECTION("recorded outputs satisfy the bus power balance") {
    const Scenario sc = load_scenario(testing::scenario_path("paper_mode1.scn"));
    const CombinedSystem sys(sc);
    const Trajectory traj = simulate(sys, SimOptions{.t_end = 8.0});
    const auto& dl = traj.dlayout;
    const auto& layout = traj.layout;

    for (Eigen::Index i = 0; i < traj.n_samples(); i += 500) {
      const double t = traj.time[static_cast<std::size_t>(i)];
      const Eigen::VectorXd state = traj.states.row(i);
      Eigen::VectorXd dx;
      sys.rhs(t, state, dx);
      for (int b = 0; b < sc.electric.n_bus; ++b) {
        double balance = -sc.bus_load(b, t) - traj.derived(i, dl.damping_offset + b);
        if (const int g = sys.generator_at_bus(b); g >= 0)
          balance += traj.derived(i, dl.gen_offset + g);
        if (const int k = sys.pump_at_bus(b); k >= 0)
          balance -= traj.derived(i, dl.pump_p_offset + k);
        for (int e = 0; e < sc.electric.n_lines(); ++e) {
          if (sc.electric.lines[static_cast<std::size_t>(e)].to == b)
            balance += traj.derived(i, dl.flow_offset + e);
          if (sc.electric.lines[static_cast<std::size_t>(e)].from == b)
            balance -= traj.derived(i, dl.flow_offset + e);
        }
        const double accel =
            sc.electric.inertia[static_cast<std::size_t>(b)] *
            dx(layout.omega_offset + layout.bus_omega[static_cast<std::size_t>(b)]);
        REQUIRE(std::abs(balance - accel) < 1e-8);
      }
    }
  }

  SECTION("instability blow-up aborts with a component name") {
    Scenario sc = load_scenario(testing::scenario_path("paper_mode1.scn"));
    sc.sim.dt = 1.0; // far outside the RK4 stability region for the swing modes
    sc.sim.t_end = 50.0;
    sc.disturbances[0].time = 0.0;
    REQUIRE_THROWS_AS(simulate(sc), NumericalError);
  }
}

TEST_CASE("mode 2 converter coupling", "[dynamics]") {
  const Scenario sc = load_scenario(testing::scenario_path("paper_mode2.scn"));
  const CombinedSystem sys(sc);
  const auto& layout = sys.layout();

  SECTION("zero average temperature pins the converter frequency at zero") {
    const auto [freq, power] = sys.converter_coupling(Eigen::VectorXd::Zero(layout.dim));
    REQUIRE(freq(0) == 0.0);
    REQUIRE(power(0) == 0.0);
  }

  SECTION("converter power is the link inflow") {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(layout.dim);
    x(layout.eta_offset + 2) = 0.1; // host-to-converter link is the appended line
    const auto [freq, power] = sys.converter_coupling(x);
    REQUIRE(power(0) == Approx(6.0 * std::sin(0.1)).epsilon(1e-15));
  }

  SECTION("converter frequency tracks the scaled average temperature") {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(layout.dim);
    x.segment(layout.temp_offset, layout.n_temp).setConstant(-0.1);
    const auto [freq, power] = sys.converter_coupling(x);
    REQUIRE(freq(0) == Approx(0.25 * -0.1).epsilon(1e-15));
  }

  SECTION("recorded converter quantities are algebraically exact") {
    const Trajectory traj = simulate(sys, SimOptions{.t_end = 8.0});
    const auto& dl = traj.dlayout;
    const int link = 2; // appended line index
    const int conv_bus = 3;
    for (Eigen::Index i = 0; i < traj.n_samples(); i += 250) {
      REQUIRE(traj.derived(i, dl.pump_p_offset) == traj.derived(i, dl.flow_offset + link));
      REQUIRE(traj.derived(i, dl.omega_offset + conv_bus) ==
              0.25 * traj.derived(i, dl.tbar_offset));
    }
  }
}

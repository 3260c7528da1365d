#pragma once

// Combined heat and power dynamics: assembles the full right-hand side for
// either pump participation mode, integrates it with fixed-step RK4, and
// records state plus derived outputs on a uniform grid.

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chpsim/blocks.hpp"
#include "chpsim/dense_solver.hpp"
#include "chpsim/errors.hpp"
#include "chpsim/network.hpp"
#include "chpsim/scenario.hpp"

namespace chpsim {

// ---------------------------------------------------------------------------
// Elementary maps
// ---------------------------------------------------------------------------

/// Power flowing along a line for a given angle difference.
inline double line_flow(double angle, double susceptance, double nominal_flow) {
  return susceptance * std::sin(angle) - nominal_flow;
}

/// Mode 1 pump electric power: proportional frequency-dependent load.
inline double pump_mode1_power(double freq, double freq_droop) { return freq_droop * freq; }

// ---------------------------------------------------------------------------
// State bookkeeping
// ---------------------------------------------------------------------------

/// Offsets of each component inside the flat state vector:
/// [line angles | inertial bus frequencies | generator block states |
///  edge+node temperatures | heat source block states].
struct StateLayout {
  int n_lines = 0;
  int n_omega = 0; // inertial buses only; converter frequencies are algebraic
  int n_temp = 0;
  int n_heat_edges = 0; // temperatures are edge entries then node entries
  std::vector<int> omega_bus;  // frequency state index -> bus
  std::vector<int> bus_omega;  // bus -> frequency state index, -1 for converters
  int eta_offset = 0;
  int omega_offset = 0;
  std::vector<int> gen_offset; // per generator block
  std::vector<int> gen_dim;
  int temp_offset = 0;
  std::vector<int> src_offset; // per heat source block
  std::vector<int> src_dim;
  int dim = 0;
};

/// Offsets inside the per-step derived-output vector.
struct DerivedLayout {
  int omega_offset = 0; // frequency at every bus, converters included
  int flow_offset = 0;  // line flows
  int gen_offset = 0;   // generator outputs
  int src_offset = 0;   // heat source outputs
  int pump_p_offset = 0;
  int pump_h_offset = 0;
  int damping_offset = 0; // frequency-dependent uncontrollable load per bus
  int tbar_offset = 0;
  int dim = 0;
  int n_bus = 0, n_lines = 0, n_gen = 0, n_src = 0, n_pumps = 0;
};

struct Trajectory {
  double dt = 0.0;
  std::vector<double> time;
  Eigen::MatrixXd states;  // one row per instant
  Eigen::MatrixXd derived; // recomputed from states, never integrated
  StateLayout layout;
  DerivedLayout dlayout;
  std::vector<std::string> state_names;
  std::vector<std::string> derived_names;

  Eigen::Index n_samples() const { return states.rows(); }
};

// ---------------------------------------------------------------------------
// Assembled system
// ---------------------------------------------------------------------------

struct SimOptions {
  std::optional<double> dt;
  std::optional<double> t_end;
  std::optional<Eigen::VectorXd> initial_state;
  double blowup_limit = 1e6;
};

/// One scenario instantiated for a specific mode: validated (and, for
/// mode 2, converter-augmented) networks, generation blocks, the heat
/// transport matrix, and the disturbance schedule snapped to the grid.
/// An instance owns mutable evaluation workspace, so each concurrent run
/// needs its own copy.
class CombinedSystem {
public:
  explicit CombinedSystem(const Scenario& sc) : CombinedSystem(sc, sc.sim.mode) {}

  CombinedSystem(const Scenario& sc, PumpMode mode) : scenario_(sc), mode_(mode) {
    scenario_.sim.mode = mode;
    if (mode == PumpMode::ConverterLinked) {
      Networks nets = mode2_networks(scenario_);
      electric_ = std::move(nets.electric);
      coupling_ = std::move(nets.coupling);
    } else {
      Networks nets = validate_networks(sc.electric, sc.heat, sc.coupling);
      electric_ = std::move(nets.electric);
      coupling_ = std::move(nets.coupling);
    }
    heat_ = scenario_.heat;
    transport_ = assemble_transport_matrix(heat_);
    volume_ = heat_.volume_vector();
    total_volume_ = volume_.sum();
    source_edges_ = heat_.edges_of_kind(HeatEdgeKind::Source);

    for (const auto& g : scenario_.generators)
      gen_blocks_.push_back(g.block == BlockKind::FirstOrder
                                ? wrap_first_order_as_passive(FirstOrderBlock{g.cost, 0.0})
                                : make_demo_second_order_block(g.cost));
    for (const auto& s : scenario_.sources)
      src_blocks_.push_back(s.block == BlockKind::FirstOrder
                                ? wrap_first_order_as_passive(FirstOrderBlock{s.cost, 0.0})
                                : make_demo_second_order_block(s.cost));

    build_layout();
    snap_disturbances();
    ws_temp_.resize(layout_.n_temp);
    ws_inj_.resize(layout_.n_temp);
    ws_omega_.resize(electric_.n_bus);
    ws_flow_.resize(electric_.n_lines());
    ws_pump_.resize(coupling_.n_pumps());
  }

  const Scenario& scenario() const { return scenario_; }
  PumpMode mode() const { return mode_; }
  const ElectricNetwork& electric() const { return electric_; }
  const HeatNetwork& heat() const { return heat_; }
  const PumpCoupling& coupling() const { return coupling_; }
  const StateLayout& layout() const { return layout_; }
  const DerivedLayout& derived_layout() const { return dlayout_; }
  const Eigen::MatrixXd& transport_matrix() const { return transport_; }
  const std::vector<PassiveBlock>& generator_blocks() const { return gen_blocks_; }
  const std::vector<PassiveBlock>& source_blocks() const { return src_blocks_; }

  /// Mode 2 converter frequencies and pump powers for the current state:
  /// each converter runs at temp_gain * average temperature, and its pump
  /// consumes the net line inflow of the converter bus.
  std::pair<Eigen::VectorXd, Eigen::VectorXd> converter_coupling(const Eigen::VectorXd& x) const {
    if (mode_ != PumpMode::ConverterLinked)
      throw ValidationError("converter_coupling: system is not in mode 2");
    compute_derived_core(0.0, x);
    Eigen::VectorXd conv_freq(coupling_.n_pumps()), pump_power(coupling_.n_pumps());
    for (int k = 0; k < coupling_.n_pumps(); ++k) {
      conv_freq(k) = ws_omega_(coupling_.pumps[static_cast<std::size_t>(k)].bus);
      pump_power(k) = ws_pump_(k);
    }
    return {conv_freq, pump_power};
  }

  double average_temp(const Eigen::VectorXd& x) const {
    return volume_.dot(x.segment(layout_.temp_offset, layout_.n_temp)) / total_volume_;
  }

  /// Full right-hand side. Piecewise-constant inputs (load and demand
  /// steps) are evaluated at `t`; the integrator freezes `t` at the step
  /// start so no stage straddles a discontinuity.
  void rhs(double t, const Eigen::VectorXd& x, Eigen::VectorXd& dxdt) const {
    compute_derived_core(t, x);
    dxdt.resize(layout_.dim);

    // line angles: difference of terminal frequencies
    for (int e = 0; e < electric_.n_lines(); ++e) {
      const auto& l = electric_.lines[static_cast<std::size_t>(e)];
      dxdt(layout_.eta_offset + e) = ws_omega_(l.from) - ws_omega_(l.to);
    }

    // swing dynamics at inertial buses
    for (int s = 0; s < layout_.n_omega; ++s) {
      const int bus = layout_.omega_bus[static_cast<std::size_t>(s)];
      double power = -scenario_.bus_load(bus, t) -
                     electric_.damping[static_cast<std::size_t>(bus)] * ws_omega_(bus);
      if (const int g = generator_at_bus(bus); g >= 0)
        power += block_output(gen_blocks_[static_cast<std::size_t>(g)], x,
                              layout_.gen_offset[static_cast<std::size_t>(g)], ws_omega_(bus));
      if (mode_ == PumpMode::FrequencyLoad)
        if (const int k = pump_at_bus(bus); k >= 0) power -= ws_pump_(k);
      for (int e = 0; e < electric_.n_lines(); ++e) {
        const auto& l = electric_.lines[static_cast<std::size_t>(e)];
        if (l.to == bus) power += ws_flow_(e);
        if (l.from == bus) power -= ws_flow_(e);
      }
      dxdt(layout_.omega_offset + s) = power / electric_.inertia[static_cast<std::size_t>(bus)];
    }

    // generator block states driven by their bus frequency
    for (std::size_t g = 0; g < gen_blocks_.size(); ++g) {
      const int off = layout_.gen_offset[g];
      const int dim = layout_.gen_dim[g];
      gen_blocks_[g].drift(std::span<const double>(x.data() + off, static_cast<std::size_t>(dim)),
                           ws_omega_(scenario_.generators[g].bus),
                           std::span<double>(dxdt.data() + off, static_cast<std::size_t>(dim)));
    }

    // temperatures: volume-weighted transport plus edge injections
    const double tbar = average_temp(x);
    ws_inj_.setZero();
    for (int k = 0; k < coupling_.n_pumps(); ++k)
      ws_inj_(coupling_.pumps[static_cast<std::size_t>(k)].edge) +=
          coupling_.pumps[static_cast<std::size_t>(k)].cop * ws_pump_(k);
    for (std::size_t s = 0; s < src_blocks_.size(); ++s)
      ws_inj_(scenario_.sources[s].edge) +=
          block_output(src_blocks_[s], x, layout_.src_offset[s], tbar);
    for (int j = 0; j < heat_.n_edges(); ++j)
      if (heat_.edges[static_cast<std::size_t>(j)].kind == HeatEdgeKind::Load)
        ws_inj_(j) -= scenario_.edge_demand(j, t);

    ws_temp_.noalias() = -(transport_ * x.segment(layout_.temp_offset, layout_.n_temp));
    ws_temp_ += ws_inj_;
    dxdt.segment(layout_.temp_offset, layout_.n_temp) = ws_temp_.cwiseQuotient(volume_);

    // heat source block states driven by the average temperature
    for (std::size_t s = 0; s < src_blocks_.size(); ++s) {
      const int off = layout_.src_offset[s];
      const int dim = layout_.src_dim[s];
      src_blocks_[s].drift(std::span<const double>(x.data() + off, static_cast<std::size_t>(dim)),
                           tbar,
                           std::span<double>(dxdt.data() + off, static_cast<std::size_t>(dim)));
    }

    for (int i = 0; i < layout_.dim; ++i)
      if (!std::isfinite(dxdt(i)))
        throw NumericalError("rhs: non-finite derivative in component " + state_name(i));
  }

  /// Derived outputs (frequencies, flows, block outputs, pump powers,
  /// damping loads, average temperature) recomputed from a state.
  void derived_at(double t, const Eigen::VectorXd& x, Eigen::VectorXd& out) const {
    compute_derived_core(t, x);
    out.resize(dlayout_.dim);
    out.segment(dlayout_.omega_offset, electric_.n_bus) = ws_omega_;
    out.segment(dlayout_.flow_offset, electric_.n_lines()) = ws_flow_;
    const double tbar = average_temp(x);
    for (std::size_t g = 0; g < gen_blocks_.size(); ++g)
      out(dlayout_.gen_offset + static_cast<int>(g)) =
          block_output(gen_blocks_[g], x, layout_.gen_offset[g],
                       ws_omega_(scenario_.generators[g].bus));
    for (std::size_t s = 0; s < src_blocks_.size(); ++s)
      out(dlayout_.src_offset + static_cast<int>(s)) =
          block_output(src_blocks_[s], x, layout_.src_offset[s], tbar);
    for (int k = 0; k < coupling_.n_pumps(); ++k) {
      out(dlayout_.pump_p_offset + k) = ws_pump_(k);
      out(dlayout_.pump_h_offset + k) =
          coupling_.pumps[static_cast<std::size_t>(k)].cop * ws_pump_(k);
    }
    for (int b = 0; b < electric_.n_bus; ++b)
      out(dlayout_.damping_offset + b) =
          electric_.damping[static_cast<std::size_t>(b)] * ws_omega_(b);
    out(dlayout_.tbar_offset) = tbar;
  }

  std::string state_name(int idx) const { return state_names_[static_cast<std::size_t>(idx)]; }
  const std::vector<std::string>& state_names() const { return state_names_; }
  const std::vector<std::string>& derived_names() const { return derived_names_; }

  int generator_at_bus(int bus) const {
    for (std::size_t g = 0; g < scenario_.generators.size(); ++g)
      if (scenario_.generators[g].bus == bus) return static_cast<int>(g);
    return -1;
  }

  int pump_at_bus(int bus) const {
    for (int k = 0; k < coupling_.n_pumps(); ++k)
      if (coupling_.pumps[static_cast<std::size_t>(k)].bus == bus) return k;
    return -1;
  }

private:
  static double block_output(const PassiveBlock& b, const Eigen::VectorXd& x, int offset,
                             double input) {
    return b.output(
        std::span<const double>(x.data() + offset, static_cast<std::size_t>(b.dim)), input);
  }

  // frequencies, line flows, and pump powers for one state
  void compute_derived_core(double /*t*/, const Eigen::VectorXd& x) const {
    const double tbar = average_temp(x);
    for (int b = 0; b < electric_.n_bus; ++b) {
      const int s = layout_.bus_omega[static_cast<std::size_t>(b)];
      ws_omega_(b) = s >= 0 ? x(layout_.omega_offset + s) : 0.0;
    }
    if (mode_ == PumpMode::ConverterLinked)
      for (const auto& p : coupling_.pumps) ws_omega_(p.bus) = p.temp_gain * tbar;

    for (int e = 0; e < electric_.n_lines(); ++e) {
      const auto& l = electric_.lines[static_cast<std::size_t>(e)];
      ws_flow_(e) = line_flow(x(layout_.eta_offset + e), l.susceptance, l.nominal_flow);
    }

    for (int k = 0; k < coupling_.n_pumps(); ++k) {
      const auto& p = coupling_.pumps[static_cast<std::size_t>(k)];
      if (mode_ == PumpMode::FrequencyLoad) {
        ws_pump_(k) = pump_mode1_power(ws_omega_(p.bus), p.freq_droop);
      } else {
        double inflow = 0.0;
        for (int e = 0; e < electric_.n_lines(); ++e) {
          const auto& l = electric_.lines[static_cast<std::size_t>(e)];
          if (l.to == p.bus) inflow += ws_flow_(e);
          if (l.from == p.bus) inflow -= ws_flow_(e);
        }
        ws_pump_(k) = inflow;
      }
    }
  }

  void build_layout() {
    layout_.n_lines = electric_.n_lines();
    layout_.bus_omega.assign(static_cast<std::size_t>(electric_.n_bus), -1);
    for (int b = 0; b < electric_.n_bus; ++b)
      if (!electric_.converter(b)) {
        layout_.bus_omega[static_cast<std::size_t>(b)] = layout_.n_omega++;
        layout_.omega_bus.push_back(b);
      }
    layout_.n_temp = heat_.n_temperatures();
    layout_.n_heat_edges = heat_.n_edges();

    int off = 0;
    layout_.eta_offset = off;
    off += layout_.n_lines;
    layout_.omega_offset = off;
    off += layout_.n_omega;
    for (const auto& b : gen_blocks_) {
      layout_.gen_offset.push_back(off);
      layout_.gen_dim.push_back(b.dim);
      off += b.dim;
    }
    layout_.temp_offset = off;
    off += layout_.n_temp;
    for (const auto& b : src_blocks_) {
      layout_.src_offset.push_back(off);
      layout_.src_dim.push_back(b.dim);
      off += b.dim;
    }
    layout_.dim = off;

    // state names, used for CSV columns and diagnostics
    for (const auto& l : electric_.lines)
      state_names_.push_back("eta_" + std::to_string(l.from + 1) + "_" + std::to_string(l.to + 1));
    for (int s = 0; s < layout_.n_omega; ++s)
      state_names_.push_back("omega_" +
                             std::to_string(layout_.omega_bus[static_cast<std::size_t>(s)] + 1));
    for (std::size_t g = 0; g < gen_blocks_.size(); ++g)
      for (int d = 0; d < gen_blocks_[g].dim; ++d)
        state_names_.push_back("genstate_" + std::to_string(scenario_.generators[g].bus + 1) +
                               (gen_blocks_[g].dim > 1 ? "_" + std::to_string(d + 1) : ""));
    for (int j = 0; j < heat_.n_edges(); ++j) state_names_.push_back("TE_" + std::to_string(j + 1));
    for (int k = 0; k < heat_.n_node; ++k) state_names_.push_back("TN_" + std::to_string(k + 1));
    for (std::size_t s = 0; s < src_blocks_.size(); ++s)
      for (int d = 0; d < src_blocks_[s].dim; ++d)
        state_names_.push_back("srcstate_" + std::to_string(scenario_.sources[s].edge + 1) +
                               (src_blocks_[s].dim > 1 ? "_" + std::to_string(d + 1) : ""));

    dlayout_.n_bus = electric_.n_bus;
    dlayout_.n_lines = electric_.n_lines();
    dlayout_.n_gen = static_cast<int>(gen_blocks_.size());
    dlayout_.n_src = static_cast<int>(src_blocks_.size());
    dlayout_.n_pumps = coupling_.n_pumps();
    int doff = 0;
    dlayout_.omega_offset = doff;
    doff += dlayout_.n_bus;
    dlayout_.flow_offset = doff;
    doff += dlayout_.n_lines;
    dlayout_.gen_offset = doff;
    doff += dlayout_.n_gen;
    dlayout_.src_offset = doff;
    doff += dlayout_.n_src;
    dlayout_.pump_p_offset = doff;
    doff += dlayout_.n_pumps;
    dlayout_.pump_h_offset = doff;
    doff += dlayout_.n_pumps;
    dlayout_.damping_offset = doff;
    doff += dlayout_.n_bus;
    dlayout_.tbar_offset = doff;
    doff += 1;
    dlayout_.dim = doff;

    for (int b = 0; b < dlayout_.n_bus; ++b)
      derived_names_.push_back("omega_" + std::to_string(b + 1));
    for (const auto& l : electric_.lines)
      derived_names_.push_back("flow_" + std::to_string(l.from + 1) + "_" +
                               std::to_string(l.to + 1));
    for (const auto& g : scenario_.generators)
      derived_names_.push_back("pG_" + std::to_string(g.bus + 1));
    for (const auto& s : scenario_.sources)
      derived_names_.push_back("hG_" + std::to_string(s.edge + 1));
    for (int k = 0; k < dlayout_.n_pumps; ++k)
      derived_names_.push_back("pP_" + std::to_string(k + 1));
    for (int k = 0; k < dlayout_.n_pumps; ++k)
      derived_names_.push_back("hP_" + std::to_string(k + 1));
    for (int b = 0; b < dlayout_.n_bus; ++b)
      derived_names_.push_back("pU_" + std::to_string(b + 1));
    derived_names_.push_back("Tbar");
  }

  void snap_disturbances() {
    const double dt = scenario_.sim.dt;
    for (auto& d : scenario_.disturbances) d.time = std::round(d.time / dt) * dt;
  }

  Scenario scenario_;
  PumpMode mode_;
  ElectricNetwork electric_;
  HeatNetwork heat_;
  PumpCoupling coupling_;
  Eigen::MatrixXd transport_;
  Eigen::VectorXd volume_;
  double total_volume_ = 0.0;
  std::vector<int> source_edges_;
  std::vector<PassiveBlock> gen_blocks_;
  std::vector<PassiveBlock> src_blocks_;
  StateLayout layout_;
  DerivedLayout dlayout_;
  std::vector<std::string> state_names_;
  std::vector<std::string> derived_names_;

  mutable Eigen::VectorXd ws_temp_, ws_inj_, ws_omega_, ws_flow_, ws_pump_;
};

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

/// Classical four-stage Runge-Kutta update. `f(t, x, dxdt)` evaluates the
/// field; stage times pass `t` unchanged for piecewise-constant inputs.
template <typename Rhs>
void rk4_step(Rhs&& f, double t, double dt, Eigen::VectorXd& x, Eigen::VectorXd& k1,
              Eigen::VectorXd& k2, Eigen::VectorXd& k3, Eigen::VectorXd& k4,
              Eigen::VectorXd& tmp) {
  f(t, x, k1);
  tmp = x + 0.5 * dt * k1;
  f(t, tmp, k2);
  tmp = x + 0.5 * dt * k2;
  f(t, tmp, k3);
  tmp = x + dt * k3;
  f(t, tmp, k4);
  x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

template <typename Rhs>
void rk4_step(Rhs&& f, double t, double dt, Eigen::VectorXd& x) {
  Eigen::VectorXd k1, k2, k3, k4, tmp;
  rk4_step(std::forward<Rhs>(f), t, dt, x, k1, k2, k3, k4, tmp);
}

namespace detail {

/// Line angles evolve as frequency differences, so on meshed graphs they
/// stay inside the image of the incidence map. Initial conditions must
/// start there; trees are consistent by construction.
inline void check_angle_consistency(const ElectricNetwork& net, const Eigen::VectorXd& angles,
                                    double tol = 1e-9) {
  const int nb = net.n_bus;
  const int nl = net.n_lines();
  if (nl < nb) return; // connected with fewer lines than buses: a tree

  DenseMatrix laplacian(static_cast<std::size_t>(nb - 1), static_cast<std::size_t>(nb - 1));
  std::vector<double> rhs(static_cast<std::size_t>(nb - 1), 0.0);
  for (int e = 0; e < nl; ++e) {
    const auto& l = net.lines[static_cast<std::size_t>(e)];
    const int i = l.from - 1, j = l.to - 1;
    if (i >= 0) {
      laplacian(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) += 1.0;
      rhs[static_cast<std::size_t>(i)] += angles(e);
    }
    if (j >= 0) {
      laplacian(static_cast<std::size_t>(j), static_cast<std::size_t>(j)) += 1.0;
      rhs[static_cast<std::size_t>(j)] -= angles(e);
    }
    if (i >= 0 && j >= 0) {
      laplacian(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) -= 1.0;
      laplacian(static_cast<std::size_t>(j), static_cast<std::size_t>(i)) -= 1.0;
    }
  }
  const auto theta = solve_linear(std::move(laplacian), std::move(rhs));
  for (int e = 0; e < nl; ++e) {
    const auto& l = net.lines[static_cast<std::size_t>(e)];
    const double ti = l.from == 0 ? 0.0 : theta[static_cast<std::size_t>(l.from - 1)];
    const double tj = l.to == 0 ? 0.0 : theta[static_cast<std::size_t>(l.to - 1)];
    if (std::abs(ti - tj - angles(e)) > tol)
      throw ValidationError(
          "simulate: initial line angles are not cycle consistent on the meshed graph");
  }
}

} // namespace detail

/// Integrates the system on [0, t_end] and records every grid point.
/// Aborts with NumericalError on blow-up or non-finite states, naming the
/// offending component.
inline Trajectory simulate(const CombinedSystem& sys, const SimOptions& opt = {}) {
  const double dt = opt.dt.value_or(sys.scenario().sim.dt);
  const double t_end = opt.t_end.value_or(sys.scenario().sim.t_end);
  if (dt <= 0.0) throw ValidationError("simulate: dt must be positive");
  if (t_end < 0.0) throw ValidationError("simulate: t_end must be nonnegative");

  const auto& layout = sys.layout();
  const long n_steps = std::lround(t_end / dt);

  Eigen::VectorXd x;
  if (opt.initial_state) {
    if (opt.initial_state->size() != layout.dim)
      throw ValidationError("simulate: initial state has wrong dimension");
    x = *opt.initial_state;
    detail::check_angle_consistency(sys.electric(),
                                    x.segment(layout.eta_offset, layout.n_lines));
  } else {
    x = Eigen::VectorXd::Zero(layout.dim);
  }

  Trajectory traj;
  traj.dt = dt;
  traj.layout = layout;
  traj.dlayout = sys.derived_layout();
  traj.state_names = sys.state_names();
  traj.derived_names = sys.derived_names();
  traj.time.resize(static_cast<std::size_t>(n_steps) + 1);
  traj.states.resize(n_steps + 1, layout.dim);
  traj.derived.resize(n_steps + 1, traj.dlayout.dim);

  Eigen::VectorXd k1, k2, k3, k4, tmp, derived;
  const auto field = [&sys](double t, const Eigen::VectorXd& state, Eigen::VectorXd& dxdt) {
    sys.rhs(t, state, dxdt);
  };

  for (long i = 0; i <= n_steps; ++i) {
    const double t = static_cast<double>(i) * dt;
    traj.time[static_cast<std::size_t>(i)] = t;
    traj.states.row(i) = x;
    sys.derived_at(t, x, derived);
    traj.derived.row(i) = derived;
    if (i == n_steps) break;

    rk4_step(field, t, dt, x, k1, k2, k3, k4, tmp);

    for (int c = 0; c < layout.dim; ++c) {
      if (!std::isfinite(x(c)))
        throw NumericalError("simulate: non-finite state in component " + sys.state_name(c) +
                             " at t=" + std::to_string(t + dt));
      if (std::abs(x(c)) > opt.blowup_limit)
        throw NumericalError("simulate: instability blow-up in component " + sys.state_name(c) +
                             " at t=" + std::to_string(t + dt) + " (|value| > " +
                             std::to_string(opt.blowup_limit) + ")");
    }
  }
  return traj;
}

inline Trajectory simulate(const Scenario& sc, const SimOptions& opt = {}) {
  return simulate(CombinedSystem(sc), opt);
}

} // namespace chpsim

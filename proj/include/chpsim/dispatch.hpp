#pragma once

// Optimal power sharing oracle and equilibrium analysis. The dispatch
// problems are solved by assembling their KKT systems and factoring them
// with the standalone partial-pivot solver, deliberately independent of the
// simulation numerics they certify. Equilibria are expanded to full states
// so simulated steady states can be checked component by component.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "chpsim/dense_solver.hpp"
#include "chpsim/dynamics.hpp"
#include "chpsim/errors.hpp"
#include "chpsim/scenario.hpp"

namespace chpsim {

// ---------------------------------------------------------------------------
// Problem data
// ---------------------------------------------------------------------------

/// Aggregated dispatch data extracted from a scenario at one instant
/// (loads include every step scheduled at or before `t`).
struct DispatchInputs {
  std::vector<double> gen_cost;       // per generator, order of scenario.generators
  std::vector<double> src_cost;       // per heat source, order of scenario.sources
  std::vector<double> bus_damping;    // per non-converter bus
  std::vector<double> pump_droop;     // per pump
  std::vector<double> pump_cop;       // per pump
  std::vector<double> pump_temp_gain; // per pump
  double total_load = 0.0;            // electric load deviation
  double total_heat_demand = 0.0;     // heat demand deviation

  int n_gen() const { return static_cast<int>(gen_cost.size()); }
  int n_src() const { return static_cast<int>(src_cost.size()); }
  int n_bus() const { return static_cast<int>(bus_damping.size()); }
  int n_pumps() const { return static_cast<int>(pump_droop.size()); }

  /// Common CoP / temperature gain across pumps; throws when heterogeneous,
  /// since the joint dispatch weight is ambiguous in that case.
  double common_cop() const { return common(pump_cop, "CoP"); }
  double common_temp_gain() const { return common(pump_temp_gain, "temperature gain"); }

private:
  static double common(const std::vector<double>& v, const std::string& what) {
    if (v.empty()) throw ValidationError("dispatch: no pumps, no common " + what);
    for (double x : v)
      if (std::abs(x - v.front()) > 1e-12 * std::max(1.0, std::abs(v.front())))
        throw ValidationError("dispatch: pumps have heterogeneous " + what +
                              "; the joint problem weight is ambiguous");
    return v.front();
  }
};

inline DispatchInputs dispatch_inputs(const Scenario& sc, double t) {
  DispatchInputs in;
  for (const auto& g : sc.generators) in.gen_cost.push_back(g.cost);
  for (const auto& s : sc.sources) in.src_cost.push_back(s.cost);
  in.bus_damping = sc.electric.damping;
  for (const auto& p : sc.coupling.pumps) {
    in.pump_droop.push_back(p.freq_droop);
    in.pump_cop.push_back(p.cop);
    in.pump_temp_gain.push_back(p.temp_gain);
  }
  in.total_load = sc.total_bus_load(t);
  in.total_heat_demand = sc.total_heat_demand(t);
  return in;
}

/// Optimizer output. Multipliers follow the marginal-cost convention:
/// at the optimum each active cost gradient equals its balance multiplier
/// (electric_price = Q_e p^G componentwise, and analogously for heat).
struct DispatchSolution {
  Eigen::VectorXd gen_power;      // per generator
  Eigen::VectorXd pump_power;     // per pump
  Eigen::VectorXd damping_load;   // per bus
  Eigen::VectorXd source_heat;    // per source
  Eigen::VectorXd pump_heat;      // per pump
  double electric_price = 0.0;
  double heat_price = 0.0;
  Eigen::VectorXd coupling_price; // per pump
  double objective = 0.0;
};

struct Mode1Dispatch {
  DispatchSolution electric; // generation / pump / damping split
  DispatchSolution heat;     // heat source split given the pump draw

  /// Single table with every component, for steady-state comparison.
  DispatchSolution combined() const {
    DispatchSolution out = electric;
    out.source_heat = heat.source_heat;
    out.heat_price = heat.heat_price;
    out.objective = electric.objective + heat.objective;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Equality-constrained QP by direct KKT factorization
// ---------------------------------------------------------------------------

namespace detail {

struct QpSolution {
  std::vector<double> x;
  std::vector<double> multipliers;
};

/// min 1/2 x' diag(h) x  s.t.  A x = b, solved from the full KKT system.
inline QpSolution solve_equality_qp(const std::vector<double>& hdiag, const DenseMatrix& a,
                                    const std::vector<double>& b) {
  const std::size_t n = hdiag.size();
  const std::size_t k = a.rows();
  DenseMatrix kkt(n + k, n + k);
  std::vector<double> rhs(n + k, 0.0);
  for (std::size_t i = 0; i < n; ++i) kkt(i, i) = hdiag[i];
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      kkt(n + r, j) = a(r, j);
      kkt(j, n + r) = a(r, j);
    }
    rhs[n + r] = b[r];
  }
  std::vector<double> sol;
  try {
    sol = solve_linear(std::move(kkt), std::move(rhs));
  } catch (const NumericalError&) {
    throw NumericalError("dispatch: singular KKT matrix (degenerate coupling data)");
  }
  QpSolution out;
  out.x.assign(sol.begin(), sol.begin() + static_cast<std::ptrdiff_t>(n));
  out.multipliers.assign(sol.begin() + static_cast<std::ptrdiff_t>(n), sol.end());
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Quadratic dispatch solvers
// ---------------------------------------------------------------------------

/// Mode 1: the electric problem splits the load step across generation,
/// pump droop, and damping in inverse proportion to their cost weights;
/// the heat problem then splits the resulting pump heat deficit across the
/// conventional sources.
namespace detail {

inline void check_positive_weights(const DispatchInputs& in) {
  for (double q : in.gen_cost)
    if (q <= 0.0) throw ValidationError("dispatch: generator costs must be positive");
  for (double q : in.src_cost)
    if (q <= 0.0) throw ValidationError("dispatch: source costs must be positive");
  for (double d : in.bus_damping)
    if (d <= 0.0) throw ValidationError("dispatch: bus damping must be positive");
  for (double a : in.pump_droop)
    if (a <= 0.0) throw ValidationError("dispatch: pump droop must be positive");
}

} // namespace detail

inline Mode1Dispatch solve_dispatch_mode1(const DispatchInputs& in) {
  const int ng = in.n_gen(), np = in.n_pumps(), nb = in.n_bus();
  detail::check_positive_weights(in);

  // electric: variables [p^G, p^P, p^U]
  std::vector<double> hdiag;
  for (double q : in.gen_cost) hdiag.push_back(q);
  for (double a1 : in.pump_droop) hdiag.push_back(1.0 / a1);
  for (double d : in.bus_damping) hdiag.push_back(1.0 / d);
  DenseMatrix a(1, hdiag.size());
  for (int j = 0; j < ng; ++j) a(0, static_cast<std::size_t>(j)) = 1.0;
  for (int j = 0; j < np + nb; ++j) a(0, static_cast<std::size_t>(ng + j)) = -1.0;
  const auto esol = detail::solve_equality_qp(hdiag, a, {in.total_load});

  Mode1Dispatch out;
  auto& e = out.electric;
  e.gen_power = Eigen::Map<const Eigen::VectorXd>(esol.x.data(), ng);
  e.pump_power = Eigen::Map<const Eigen::VectorXd>(esol.x.data() + ng, np);
  e.damping_load = Eigen::Map<const Eigen::VectorXd>(esol.x.data() + ng + np, nb);
  e.electric_price = -esol.multipliers[0];
  e.objective = 0.0;
  for (std::size_t i = 0; i < hdiag.size(); ++i) e.objective += 0.5 * hdiag[i] * esol.x[i] * esol.x[i];

  e.pump_heat.resize(np);
  for (int k = 0; k < np; ++k)
    e.pump_heat(k) = in.pump_cop[static_cast<std::size_t>(k)] * e.pump_power(k);

  // heat: variables h^G, balancing demand minus the pump contribution
  const double heat_rhs = in.total_heat_demand - e.pump_heat.sum();
  if (in.n_src() == 0) {
    if (std::abs(heat_rhs) > 1e-12)
      throw NumericalError("dispatch: no heat sources to absorb a nonzero heat imbalance");
    out.heat.source_heat.resize(0);
    return out;
  }
  DenseMatrix ah(1, in.src_cost.size());
  for (int j = 0; j < in.n_src(); ++j) ah(0, static_cast<std::size_t>(j)) = 1.0;
  const auto hsol = detail::solve_equality_qp(in.src_cost, ah, {heat_rhs});
  auto& h = out.heat;
  h.source_heat = Eigen::Map<const Eigen::VectorXd>(hsol.x.data(), in.n_src());
  h.heat_price = -hsol.multipliers[0];
  h.objective = 0.0;
  for (int j = 0; j < in.n_src(); ++j)
    h.objective += 0.5 * in.src_cost[static_cast<std::size_t>(j)] * hsol.x[static_cast<std::size_t>(j)] *
                   hsol.x[static_cast<std::size_t>(j)];
  return out;
}

/// Mode 2: one joint problem over generation, heat sources, damping, and
/// the pump electric/heat pair, with the heat cost weighted by the
/// temperature gain over the CoP and one coupling row per pump. Two or more
/// pumps make the per-pump split indeterminate, which surfaces as a
/// singular KKT matrix.
inline DispatchSolution solve_dispatch_mode2(const DispatchInputs& in) {
  const int ng = in.n_gen(), ns = in.n_src(), nb = in.n_bus(), np = in.n_pumps();
  detail::check_positive_weights(in);

  if (ns == 0 && np == 0) {
    // nothing on the heat side: reduce to the electric problem
    if (std::abs(in.total_heat_demand) > 1e-12)
      throw NumericalError("dispatch: no heat sources to absorb a nonzero heat imbalance");
    DispatchInputs electric_only = in;
    Mode1Dispatch sep = solve_dispatch_mode1(electric_only);
    DispatchSolution out = sep.combined();
    out.coupling_price.resize(0);
    return out;
  }

  double heat_weight = 1.0;
  double cop = 1.0;
  if (np > 0) {
    cop = in.common_cop();
    heat_weight = in.common_temp_gain() / cop;
  }

  // variables [p^G, h^G, p^U, p^P, h^P]
  std::vector<double> hdiag;
  for (double q : in.gen_cost) hdiag.push_back(q);
  for (double q : in.src_cost) hdiag.push_back(heat_weight * q);
  for (double d : in.bus_damping) hdiag.push_back(1.0 / d);
  for (int k = 0; k < 2 * np; ++k) hdiag.push_back(0.0);

  const std::size_t n = hdiag.size();
  DenseMatrix a(2 + static_cast<std::size_t>(np), n);
  std::vector<double> b(2 + static_cast<std::size_t>(np), 0.0);
  for (int j = 0; j < ng; ++j) a(0, static_cast<std::size_t>(j)) = 1.0;
  for (int j = 0; j < nb; ++j) a(0, static_cast<std::size_t>(ng + ns + j)) = -1.0;
  for (int k = 0; k < np; ++k) a(0, static_cast<std::size_t>(ng + ns + nb + k)) = -1.0;
  b[0] = in.total_load;
  for (int j = 0; j < ns; ++j) a(1, static_cast<std::size_t>(ng + j)) = 1.0;
  for (int k = 0; k < np; ++k) a(1, static_cast<std::size_t>(ng + ns + nb + np + k)) = 1.0;
  b[1] = in.total_heat_demand;
  for (int k = 0; k < np; ++k) {
    a(2 + static_cast<std::size_t>(k), static_cast<std::size_t>(ng + ns + nb + np + k)) = 1.0;
    a(2 + static_cast<std::size_t>(k), static_cast<std::size_t>(ng + ns + nb + k)) = -cop;
  }

  const auto sol = detail::solve_equality_qp(hdiag, a, b);
  DispatchSolution out;
  out.gen_power = Eigen::Map<const Eigen::VectorXd>(sol.x.data(), ng);
  out.source_heat = Eigen::Map<const Eigen::VectorXd>(sol.x.data() + ng, ns);
  out.damping_load = Eigen::Map<const Eigen::VectorXd>(sol.x.data() + ng + ns, nb);
  out.pump_power = Eigen::Map<const Eigen::VectorXd>(sol.x.data() + ng + ns + nb, np);
  out.pump_heat = Eigen::Map<const Eigen::VectorXd>(sol.x.data() + ng + ns + nb + np, np);
  out.electric_price = -sol.multipliers[0];
  out.heat_price = -sol.multipliers[1];
  out.coupling_price.resize(np);
  for (int k = 0; k < np; ++k) out.coupling_price(k) = -sol.multipliers[static_cast<std::size_t>(2 + k)];
  out.objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) out.objective += 0.5 * hdiag[i] * sol.x[i] * sol.x[i];
  return out;
}

// ---------------------------------------------------------------------------
// Generalized convex-cost dispatch
// ---------------------------------------------------------------------------

/// Strictly increasing marginal cost of one unit; its inverse is the unit's
/// static characteristic.
using MarginalCost = std::function<double(double)>;

namespace detail {

/// Root of a strictly increasing function by bracket expansion + bisection.
inline double increasing_root(const std::function<double(double)>& f, const std::string& what) {
  double lo = -1.0, hi = 1.0;
  double flo = f(lo), fhi = f(hi);
  for (int i = 0; i < 80 && flo > 0.0; ++i) {
    lo *= 2.0;
    flo = f(lo);
  }
  for (int i = 0; i < 80 && fhi < 0.0; ++i) {
    hi *= 2.0;
    fhi = f(hi);
  }
  if (flo > 0.0 || fhi < 0.0)
    throw NumericalError("generalized dispatch: bracketing failure, " + what +
                         " is outside the range of the aggregate characteristic");
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

inline double invert_marginal(const MarginalCost& c, double price) {
  return increasing_root([&](double y) { return c(y) - price; }, "marginal price");
}

} // namespace detail

/// Dispatch with strictly convex unit costs given by their derivatives.
/// Finds the common marginal price by bisection on the aggregate balance and
/// maps it through each unit's characteristic; with linear marginals this
/// reproduces the quadratic KKT solutions. The pump and damping terms keep
/// their structural quadratic weights.
inline DispatchSolution generalized_dispatch(const std::vector<MarginalCost>& gen_marginal,
                                             const std::vector<MarginalCost>& src_marginal,
                                             const DispatchInputs& in, PumpMode mode) {
  if (static_cast<int>(gen_marginal.size()) != in.n_gen() ||
      static_cast<int>(src_marginal.size()) != in.n_src())
    throw ValidationError("generalized dispatch: one marginal cost per unit required");

  const double droop_sum =
      std::accumulate(in.pump_droop.begin(), in.pump_droop.end(), 0.0) +
      std::accumulate(in.bus_damping.begin(), in.bus_damping.end(), 0.0);

  DispatchSolution out;
  out.gen_power.resize(in.n_gen());
  out.source_heat.resize(in.n_src());
  out.damping_load.resize(in.n_bus());
  out.pump_power.resize(in.n_pumps());
  out.pump_heat.resize(in.n_pumps());
  out.coupling_price = Eigen::VectorXd::Zero(in.n_pumps());

  const auto sum_gen = [&](double price) {
    double s = 0.0;
    for (const auto& c : gen_marginal) s += detail::invert_marginal(c, price);
    return s;
  };
  const auto sum_src = [&](double price) {
    double s = 0.0;
    for (const auto& c : src_marginal) s += detail::invert_marginal(c, price);
    return s;
  };

  if (mode == PumpMode::FrequencyLoad) {
    const double pe = detail::increasing_root(
        [&](double price) { return sum_gen(price) + price * droop_sum - in.total_load; },
        "electric load");
    out.electric_price = pe;
    for (int j = 0; j < in.n_gen(); ++j)
      out.gen_power(j) = detail::invert_marginal(gen_marginal[static_cast<std::size_t>(j)], pe);
    for (int k = 0; k < in.n_pumps(); ++k) {
      out.pump_power(k) = -pe * in.pump_droop[static_cast<std::size_t>(k)];
      out.pump_heat(k) = in.pump_cop[static_cast<std::size_t>(k)] * out.pump_power(k);
    }
    for (int b = 0; b < in.n_bus(); ++b)
      out.damping_load(b) = -pe * in.bus_damping[static_cast<std::size_t>(b)];

    const double heat_rhs = in.total_heat_demand - out.pump_heat.sum();
    const double ph = detail::increasing_root(
        [&](double price) { return sum_src(price) - heat_rhs; }, "heat demand");
    out.heat_price = ph;
    for (int j = 0; j < in.n_src(); ++j)
      out.source_heat(j) = detail::invert_marginal(src_marginal[static_cast<std::size_t>(j)], ph);
    return out;
  }

  // joint problem: heat price is tied to the electric price through the
  // pump coupling, leaving a single scalar unknown
  if (in.n_pumps() > 1)
    throw NumericalError("dispatch: singular KKT matrix (degenerate coupling data)");
  if (in.n_pumps() == 0) {
    const double damping_sum =
        std::accumulate(in.bus_damping.begin(), in.bus_damping.end(), 0.0);
    const double pe = detail::increasing_root(
        [&](double price) { return sum_gen(price) + price * damping_sum - in.total_load; },
        "electric load");
    const double ph = detail::increasing_root(
        [&](double price) { return sum_src(price) - in.total_heat_demand; }, "heat demand");
    out.electric_price = pe;
    out.heat_price = ph;
    for (int j = 0; j < in.n_gen(); ++j)
      out.gen_power(j) = detail::invert_marginal(gen_marginal[static_cast<std::size_t>(j)], pe);
    for (int b = 0; b < in.n_bus(); ++b)
      out.damping_load(b) = -pe * in.bus_damping[static_cast<std::size_t>(b)];
    for (int j = 0; j < in.n_src(); ++j)
      out.source_heat(j) = detail::invert_marginal(src_marginal[static_cast<std::size_t>(j)], ph);
    return out;
  }

  const double cop = in.common_cop();
  const double gain = in.common_temp_gain();
  const double damping_sum = std::accumulate(in.bus_damping.begin(), in.bus_damping.end(), 0.0);
  // source stationarity: (gain/cop) C'_h(h^G) = heat price = electric price / cop,
  // so each source sees an effective price of electric price / gain
  const double pe = detail::increasing_root(
      [&](double price) {
        return sum_gen(price) + price * damping_sum +
               (sum_src(price / gain) - in.total_heat_demand) / cop - in.total_load;
      },
      "combined load");
  out.electric_price = pe;
  out.heat_price = pe / cop;
  out.coupling_price(0) = -pe / cop;
  for (int j = 0; j < in.n_gen(); ++j)
    out.gen_power(j) = detail::invert_marginal(gen_marginal[static_cast<std::size_t>(j)], pe);
  for (int b = 0; b < in.n_bus(); ++b)
    out.damping_load(b) = -pe * in.bus_damping[static_cast<std::size_t>(b)];
  for (int j = 0; j < in.n_src(); ++j)
    out.source_heat(j) =
        detail::invert_marginal(src_marginal[static_cast<std::size_t>(j)], pe / gain);
  out.pump_heat(0) = in.total_heat_demand - out.source_heat.sum();
  out.pump_power(0) = out.pump_heat(0) / cop;
  return out;
}

// ---------------------------------------------------------------------------
// Equilibrium scalars
// ---------------------------------------------------------------------------

struct EquilibriumScalars {
  double sync_freq = 0.0; // common frequency deviation
  double avg_temp = 0.0;  // settled average temperature deviation
};

/// Mode 1 steady state from the aggregate balances: the frequency absorbs
/// the load step against the total droop, pumps follow the frequency, and
/// the average temperature absorbs the resulting heat deficit.
inline EquilibriumScalars equilibrium_scalars_mode1(const DispatchInputs& in) {
  double den = 0.0;
  for (double q : in.gen_cost) den += 1.0 / q;
  for (double a1 : in.pump_droop) den += a1;
  for (double d : in.bus_damping) den += d;
  if (den <= 0.0) throw NumericalError("equilibrium: zero aggregate droop in the electric system");
  EquilibriumScalars eq;
  eq.sync_freq = -in.total_load / den;

  double pump_heat = 0.0;
  for (int k = 0; k < in.n_pumps(); ++k)
    pump_heat += in.pump_cop[static_cast<std::size_t>(k)] *
                 in.pump_droop[static_cast<std::size_t>(k)] * eq.sync_freq;
  double src_den = 0.0;
  for (double q : in.src_cost) src_den += 1.0 / q;
  const double net_demand = in.total_heat_demand - pump_heat;
  if (src_den <= 0.0) {
    if (std::abs(net_demand) > 1e-12)
      throw NumericalError("equilibrium: no heat sources to absorb a nonzero heat imbalance");
    eq.avg_temp = 0.0;
  } else {
    eq.avg_temp = -net_demand / src_den;
  }
  return eq;
}

/// Mode 2 steady state: the converter ties frequency and temperature,
/// which folds both balances into one scalar equation for the frequency.
inline EquilibriumScalars equilibrium_scalars_mode2(const DispatchInputs& in) {
  double gen_den = 0.0, src_den = 0.0, damp = 0.0;
  for (double q : in.gen_cost) gen_den += 1.0 / q;
  for (double q : in.src_cost) src_den += 1.0 / q;
  for (double d : in.bus_damping) damp += d;

  EquilibriumScalars eq;
  if (in.n_pumps() == 0) {
    // no coupling: the two systems settle independently
    if (gen_den + damp <= 0.0)
      throw NumericalError("equilibrium: zero aggregate droop in the electric system");
    eq.sync_freq = -in.total_load / (gen_den + damp);
    if (src_den <= 0.0) {
      if (std::abs(in.total_heat_demand) > 1e-12)
        throw NumericalError("equilibrium: no heat sources to absorb a nonzero heat imbalance");
      eq.avg_temp = 0.0;
    } else {
      eq.avg_temp = -in.total_heat_demand / src_den;
    }
    return eq;
  }

  const double cop = in.common_cop();
  const double gain = in.common_temp_gain();
  const double den = gen_den + damp + src_den / (gain * cop);
  if (den <= 0.0) throw NumericalError("equilibrium: zero aggregate droop in the combined system");
  eq.sync_freq = -(in.total_load + in.total_heat_demand / cop) / den;
  eq.avg_temp = eq.sync_freq / gain;
  return eq;
}

// ---------------------------------------------------------------------------
// Full equilibrium expansion
// ---------------------------------------------------------------------------

struct EquilibriumPoint {
  double sync_freq = 0.0;
  double avg_temp = 0.0;
  Eigen::VectorXd state; // full state in the CombinedSystem layout
  bool secure = false;
  double security_margin = 0.0; // pi/2 minus the largest line angle magnitude
  double rhs_residual = 0.0;    // max |rhs| at the expanded state
};

/// Line-angle security: every angle strictly inside (-pi/2, pi/2).
inline std::pair<bool, double> check_security(const Eigen::VectorXd& line_angles) {
  const double worst = line_angles.size() == 0 ? 0.0 : line_angles.cwiseAbs().maxCoeff();
  const double margin = std::numbers::pi / 2.0 - worst;
  return {margin > 0.0, margin};
}

inline std::pair<bool, double> check_security(const EquilibriumPoint& eq,
                                              const StateLayout& layout) {
  return check_security(
      Eigen::VectorXd(eq.state.segment(layout.eta_offset, layout.n_lines)));
}

namespace detail {

/// Bus angles realizing the given net injections: Newton iteration on the
/// lossless AC flow equations with bus 0 as angle reference.
inline Eigen::VectorXd solve_bus_angles(const ElectricNetwork& net,
                                        const Eigen::VectorXd& injection) {
  const int nb = net.n_bus;
  const int nl = net.n_lines();
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(nb);
  if (nb == 1) return theta;

  for (int iter = 0; iter < 60; ++iter) {
    Eigen::VectorXd mismatch = -injection;
    for (int e = 0; e < nl; ++e) {
      const auto& l = net.lines[static_cast<std::size_t>(e)];
      const double flow = line_flow(theta(l.from) - theta(l.to), l.susceptance, l.nominal_flow);
      mismatch(l.from) += flow;
      mismatch(l.to) -= flow;
    }
    double worst = 0.0;
    for (int b = 1; b < nb; ++b) worst = std::max(worst, std::abs(mismatch(b)));
    if (worst < 1e-13) return theta;

    DenseMatrix jac(static_cast<std::size_t>(nb - 1), static_cast<std::size_t>(nb - 1));
    for (int e = 0; e < nl; ++e) {
      const auto& l = net.lines[static_cast<std::size_t>(e)];
      const double stiff = l.susceptance * std::cos(theta(l.from) - theta(l.to));
      const int i = l.from - 1, j = l.to - 1; // reduced indices, reference dropped
      if (i >= 0) jac(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) += stiff;
      if (j >= 0) jac(static_cast<std::size_t>(j), static_cast<std::size_t>(j)) += stiff;
      if (i >= 0 && j >= 0) {
        jac(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) -= stiff;
        jac(static_cast<std::size_t>(j), static_cast<std::size_t>(i)) -= stiff;
      }
    }
    std::vector<double> rhs(static_cast<std::size_t>(nb - 1));
    for (int b = 1; b < nb; ++b) rhs[static_cast<std::size_t>(b - 1)] = -mismatch(b);
    const auto step = solve_linear(std::move(jac), std::move(rhs));
    for (int b = 1; b < nb; ++b) theta(b) += step[static_cast<std::size_t>(b - 1)];
  }
  throw NumericalError("equilibrium: bus angle iteration did not converge");
}

/// Temperature vector with the prescribed average: the transport system has
/// a one-dimensional kernel along the uniform vector, so it is bordered
/// with the volume-weighted mean as the anchor.
inline Eigen::VectorXd solve_temperatures(const Eigen::MatrixXd& transport,
                                          const Eigen::VectorXd& volume,
                                          const Eigen::VectorXd& injection, double avg_temp) {
  const auto n = static_cast<std::size_t>(transport.rows());
  const double total = volume.sum();
  DenseMatrix a(n, n);
  std::vector<double> b(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      a(i, j) = transport(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +
                volume(static_cast<Eigen::Index>(j)) / total;
    b[i] = injection(static_cast<Eigen::Index>(i)) + avg_temp;
  }
  const auto t = solve_linear(std::move(a), std::move(b));
  return Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(n));
}

} // namespace detail

/// Expands the scalar equilibrium to a full state: block outputs from their
/// characteristics, line angles from a network flow solve, temperatures from
/// the anchored transport system. The result should zero the right-hand
/// side; its residual is recorded for inspection.
inline EquilibriumPoint compute_equilibrium(const CombinedSystem& sys) {
  const Scenario& sc = sys.scenario();
  const double t_end = sc.sim.t_end;
  const DispatchInputs in = dispatch_inputs(sc, t_end);
  const bool mode2 = sys.mode() == PumpMode::ConverterLinked;
  const EquilibriumScalars scalars =
      mode2 ? equilibrium_scalars_mode2(in) : equilibrium_scalars_mode1(in);

  const auto& net = sys.electric();
  const auto& layout = sys.layout();
  const int np = sys.coupling().n_pumps();
  if (mode2 && np > 1)
    throw NumericalError(
        "equilibrium: per-pump power split is indeterminate with multiple converter pumps");

  // per-unit equilibrium values
  Eigen::VectorXd gen_power(sys.generator_blocks().size());
  for (std::size_t g = 0; g < sys.generator_blocks().size(); ++g)
    gen_power(static_cast<Eigen::Index>(g)) =
        sys.generator_blocks()[g].characteristic(scalars.sync_freq);
  Eigen::VectorXd src_heat(sys.source_blocks().size());
  for (std::size_t s = 0; s < sys.source_blocks().size(); ++s)
    src_heat(static_cast<Eigen::Index>(s)) =
        sys.source_blocks()[s].characteristic(scalars.avg_temp);

  Eigen::VectorXd pump_power(np);
  if (mode2) {
    if (np == 1) {
      const double heat_deficit = sc.total_heat_demand(t_end) - src_heat.sum();
      pump_power(0) = heat_deficit / sys.coupling().pumps[0].cop;
    }
  } else {
    for (int k = 0; k < np; ++k)
      pump_power(k) = sys.coupling().pumps[static_cast<std::size_t>(k)].freq_droop *
                      scalars.sync_freq;
  }

  // net injection per bus for the angle solve
  Eigen::VectorXd injection = Eigen::VectorXd::Zero(net.n_bus);
  for (int b = 0; b < net.n_bus; ++b) {
    if (net.converter(b)) continue;
    injection(b) -= sc.bus_load(b, t_end) +
                    net.damping[static_cast<std::size_t>(b)] * scalars.sync_freq;
    if (const int g = sys.generator_at_bus(b); g >= 0) injection(b) += gen_power(g);
    if (!mode2)
      if (const int k = sys.pump_at_bus(b); k >= 0) injection(b) -= pump_power(k);
  }
  if (mode2)
    for (int k = 0; k < np; ++k)
      injection(sys.coupling().pumps[static_cast<std::size_t>(k)].bus) -= pump_power(k);

  const Eigen::VectorXd theta = detail::solve_bus_angles(net, injection);

  EquilibriumPoint eq;
  eq.sync_freq = scalars.sync_freq;
  eq.avg_temp = scalars.avg_temp;
  eq.state = Eigen::VectorXd::Zero(layout.dim);
  for (int e = 0; e < net.n_lines(); ++e) {
    const auto& l = net.lines[static_cast<std::size_t>(e)];
    eq.state(layout.eta_offset + e) = theta(l.from) - theta(l.to);
  }
  for (int s = 0; s < layout.n_omega; ++s) eq.state(layout.omega_offset + s) = scalars.sync_freq;
  for (std::size_t g = 0; g < sys.generator_blocks().size(); ++g)
    eq.state.segment(layout.gen_offset[g], layout.gen_dim[g]) =
        sys.generator_blocks()[g].equilibrium_state(scalars.sync_freq);

  Eigen::VectorXd heat_injection = Eigen::VectorXd::Zero(layout.n_temp);
  for (int k = 0; k < np; ++k) {
    const auto& p = sys.coupling().pumps[static_cast<std::size_t>(k)];
    heat_injection(p.edge) += p.cop * pump_power(k);
  }
  for (std::size_t s = 0; s < sys.source_blocks().size(); ++s)
    heat_injection(sc.sources[s].edge) += src_heat(static_cast<Eigen::Index>(s));
  for (int j = 0; j < sys.heat().n_edges(); ++j)
    if (sys.heat().edges[static_cast<std::size_t>(j)].kind == HeatEdgeKind::Load)
      heat_injection(j) -= sc.edge_demand(j, t_end);
  eq.state.segment(layout.temp_offset, layout.n_temp) = detail::solve_temperatures(
      sys.transport_matrix(), sys.heat().volume_vector(), heat_injection, scalars.avg_temp);

  for (std::size_t s = 0; s < sys.source_blocks().size(); ++s)
    eq.state.segment(layout.src_offset[s], layout.src_dim[s]) =
        sys.source_blocks()[s].equilibrium_state(scalars.avg_temp);

  Eigen::VectorXd residual;
  sys.rhs(t_end, eq.state, residual);
  eq.rhs_residual = residual.cwiseAbs().maxCoeff();
  const auto [secure, margin] = check_security(eq, layout);
  eq.secure = secure;
  eq.security_margin = margin;
  return eq;
}

// ---------------------------------------------------------------------------
// Steady-state verification against the oracle
// ---------------------------------------------------------------------------

struct ComparisonRow {
  std::string name;
  double simulated = 0.0;
  double oracle = 0.0;
  double delta = 0.0;
};

struct OptimalityReport {
  bool settled = false;
  bool pass = false;
  double tolerance = 0.0;
  double tail_start = 0.0;          // first instant of the averaging window
  double settle_peak_to_peak = 0.0; // worst peak-to-peak across compared signals
  double max_delta = 0.0;
  double gen_marginal_spread = 0.0; // KKT stationarity residual, generators
  double src_marginal_spread = 0.0; // KKT stationarity residual, heat sources
  std::vector<ComparisonRow> rows;
  std::string diagnostic;
};

/// Compares time-averaged tail values of the recorded dispatch quantities
/// against an oracle solution. The last tenth of the horizon is the tail;
/// it must be quiescent (componentwise peak-to-peak below settle_tol) or
/// the report refuses to certify and says why.
inline OptimalityReport verify_power_sharing(const Trajectory& traj,
                                             const DispatchSolution& oracle,
                                             const DispatchInputs& in, double tolerance,
                                             double settle_tol = 1e-6) {
  OptimalityReport report;
  report.tolerance = tolerance;
  const auto& shape = traj.dlayout;
  if (oracle.gen_power.size() != shape.n_gen || oracle.source_heat.size() != shape.n_src ||
      oracle.pump_power.size() != shape.n_pumps || oracle.pump_heat.size() != shape.n_pumps ||
      oracle.damping_load.size() != in.n_bus() || in.n_gen() != shape.n_gen ||
      in.n_src() != shape.n_src || in.n_bus() > shape.n_bus)
    throw ValidationError("verify_power_sharing: oracle shape does not match the trajectory");
  const Eigen::Index n = traj.n_samples();
  if (n < 10) {
    report.diagnostic = "trajectory too short to identify a settled tail";
    return report;
  }
  const Eigen::Index tail_begin = n - std::max<Eigen::Index>(n / 10, 2);
  report.tail_start = traj.time[static_cast<std::size_t>(tail_begin)];

  const auto& dl = traj.dlayout;
  struct Signal {
    std::string name;
    int column;
    double oracle;
  };
  std::vector<Signal> signals;
  for (int g = 0; g < dl.n_gen; ++g)
    signals.push_back({traj.derived_names[static_cast<std::size_t>(dl.gen_offset + g)],
                       dl.gen_offset + g, oracle.gen_power(g)});
  for (int s = 0; s < dl.n_src; ++s)
    signals.push_back({traj.derived_names[static_cast<std::size_t>(dl.src_offset + s)],
                       dl.src_offset + s, oracle.source_heat(s)});
  for (int k = 0; k < dl.n_pumps; ++k)
    signals.push_back({traj.derived_names[static_cast<std::size_t>(dl.pump_p_offset + k)],
                       dl.pump_p_offset + k, oracle.pump_power(k)});
  for (int k = 0; k < dl.n_pumps; ++k)
    signals.push_back({traj.derived_names[static_cast<std::size_t>(dl.pump_h_offset + k)],
                       dl.pump_h_offset + k, oracle.pump_heat(k)});
  for (int b = 0; b < in.n_bus(); ++b)
    signals.push_back({traj.derived_names[static_cast<std::size_t>(dl.damping_offset + b)],
                       dl.damping_offset + b, oracle.damping_load(b)});

  std::vector<double> tail_means(signals.size(), 0.0);
  for (std::size_t i = 0; i < signals.size(); ++i) {
    const auto col = traj.derived.col(signals[i].column).segment(tail_begin, n - tail_begin);
    report.settle_peak_to_peak =
        std::max(report.settle_peak_to_peak, col.maxCoeff() - col.minCoeff());
    tail_means[i] = col.mean();
  }
  if (report.settle_peak_to_peak >= settle_tol) {
    report.diagnostic = "trajectory tail not settled: peak-to-peak " +
                        std::to_string(report.settle_peak_to_peak) + " exceeds " +
                        std::to_string(settle_tol);
    return report;
  }
  report.settled = true;

  for (std::size_t i = 0; i < signals.size(); ++i) {
    ComparisonRow row;
    row.name = signals[i].name;
    row.simulated = tail_means[i];
    row.oracle = signals[i].oracle;
    row.delta = std::abs(row.simulated - row.oracle);
    report.max_delta = std::max(report.max_delta, row.delta);
    report.rows.push_back(row);
  }

  std::vector<double> gen_marginals, src_marginals;
  for (int g = 0; g < dl.n_gen; ++g)
    gen_marginals.push_back(in.gen_cost[static_cast<std::size_t>(g)] *
                            tail_means[static_cast<std::size_t>(g)]);
  for (int s = 0; s < dl.n_src; ++s)
    src_marginals.push_back(in.src_cost[static_cast<std::size_t>(s)] *
                            tail_means[static_cast<std::size_t>(dl.n_gen + s)]);
  const double gen_med = detail::median(gen_marginals);
  for (double v : gen_marginals)
    report.gen_marginal_spread = std::max(report.gen_marginal_spread, std::abs(v - gen_med));
  const double src_med = detail::median(src_marginals);
  for (double v : src_marginals)
    report.src_marginal_spread = std::max(report.src_marginal_spread, std::abs(v - src_med));

  report.pass = report.max_delta < tolerance;
  if (!report.pass)
    report.diagnostic = "largest deviation from the oracle is " + std::to_string(report.max_delta);
  return report;
}

} // namespace chpsim

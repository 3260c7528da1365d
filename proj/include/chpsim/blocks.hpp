#pragma once

// Generation dynamics: the first-order droop controllers used by generators
// and conventional heat sources, a general passive-block interface for
// higher-order dynamics, and a numerical audit of the passivity inequality
// along recorded trajectories.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "chpsim/errors.hpp"

namespace chpsim {

// ---------------------------------------------------------------------------
// First-order droop block
// ---------------------------------------------------------------------------

/// One-state controller: output relaxes toward -input/cost with unit time
/// constant, so the settled output is inversely proportional to the cost
/// coefficient.
struct FirstOrderBlock {
  double cost = 1.0;   // > 0; gain is 1/cost
  double output = 0.0; // internal state, equals the block output
};

inline double first_order_rhs(const FirstOrderBlock& block, double input) {
  return -block.output - input / block.cost;
}

// ---------------------------------------------------------------------------
// General passive block
// ---------------------------------------------------------------------------

/// Scalar-input scalar-output dynamic block with an arbitrary state vector.
/// `drift` and `output` define the dynamics; `characteristic` is the declared
/// settled output for a constant input; `storage` and `dissipation` are the
/// optional certificates used by the passivity audit.
struct PassiveBlock {
  int dim = 0;
  std::function<void(std::span<const double> state, double input, std::span<double> rate)> drift;
  std::function<double(std::span<const double> state, double input)> output;
  std::function<double(double input)> characteristic;
  std::function<Eigen::VectorXd(double input)> equilibrium_state;
  // V(state, equilibrium state); empty means no storage certificate.
  std::function<double(std::span<const double> state, std::span<const double> eq_state)> storage;
  // phi(shifted input); empty means the audit checks plain passivity.
  std::function<double(double shifted_input)> dissipation;
};

/// Passive view of the first-order droop block: state x, rate -x - u/cost,
/// output x, settled output -u/cost, storage (cost/2)(x - x*)^2.
inline PassiveBlock wrap_first_order_as_passive(const FirstOrderBlock& block) {
  const double cost = block.cost;
  if (cost <= 0.0) throw ValidationError("first-order block: cost must be positive");
  PassiveBlock p;
  p.dim = 1;
  p.drift = [cost](std::span<const double> x, double u, std::span<double> dx) {
    dx[0] = -x[0] - u / cost;
  };
  p.output = [](std::span<const double> x, double) { return x[0]; };
  p.characteristic = [cost](double u) { return -u / cost; };
  p.equilibrium_state = [cost](double u) {
    Eigen::VectorXd x(1);
    x(0) = -u / cost;
    return x;
  };
  p.storage = [cost](std::span<const double> x, std::span<const double> xs) {
    const double d = x[0] - xs[0];
    return 0.5 * cost * d * d;
  };
  return p;
}

/// Two-state demo block: a pair of cascaded stable lags whose output taps
/// both states. Poles at -1 and -2; the input gain is chosen so the settled
/// output matches the first-order block with the same cost coefficient,
/// which keeps the dispatch characteristics identical.
///
/// Shifted coordinates satisfy V-dot = u~ * y~ - (x1~^2 + 6 x2~^2)/(2k)
/// with V = x~' P x~ / 2, P = [[1, 0.5], [0.5, 1.5]] / k, so the block is
/// passive from shifted input to shifted output.
inline PassiveBlock make_demo_second_order_block(double cost) {
  if (cost <= 0.0) throw ValidationError("demo block: cost must be positive");
  const double k = 0.8 / cost; // DC gain k * (1 + 0.5/2) = 1/cost
  PassiveBlock p;
  p.dim = 2;
  p.drift = [k](std::span<const double> x, double u, std::span<double> dx) {
    dx[0] = -x[0] - k * u;
    dx[1] = x[0] - 2.0 * x[1];
  };
  p.output = [](std::span<const double> x, double) { return x[0] + 0.5 * x[1]; };
  p.characteristic = [cost](double u) { return -u / cost; };
  p.equilibrium_state = [k](double u) {
    Eigen::VectorXd x(2);
    x(0) = -k * u;
    x(1) = -0.5 * k * u;
    return x;
  };
  p.storage = [k](std::span<const double> x, std::span<const double> xs) {
    const double d0 = x[0] - xs[0];
    const double d1 = x[1] - xs[1];
    return 0.5 * (d0 * d0 + d1 * (d0 + 1.5 * d1)) / k;
  };
  return p;
}

// ---------------------------------------------------------------------------
// Static characteristic by settling
// ---------------------------------------------------------------------------

struct SettleOptions {
  double dt = 1e-2;
  double rate_tol = 1e-10;     // settled when the rate norm drops below this
  double divergence_bound = 1e6;
  long max_steps = 1'000'000;  // exceeding the cap reports non-settling
  long window = 100'000;       // rate must keep decreasing window over window
};

/// Integrates the block under a frozen input until the state rate vanishes
/// and returns the settled output. Divergence, a non-decreasing rate norm
/// across successive windows, or hitting the step cap all raise
/// NumericalError instead of guessing a value.
inline double static_characteristic(const PassiveBlock& block, double input,
                                    const SettleOptions& opt = {}) {
  std::vector<double> x(static_cast<std::size_t>(block.dim), 0.0);
  std::vector<double> k1(x.size()), k2(x.size()), k3(x.size()), k4(x.size()), tmp(x.size());
  const auto rate_norm = [&](const std::vector<double>& state) {
    block.drift(state, input, k1);
    double n = 0.0;
    for (double v : k1) n = std::max(n, std::abs(v));
    return n;
  };

  double prev_window_min = std::numeric_limits<double>::infinity();
  double window_min = std::numeric_limits<double>::infinity();
  for (long step = 0; step < opt.max_steps; ++step) {
    const double rate = rate_norm(x);
    if (rate < opt.rate_tol) return block.output(x, input);
    window_min = std::min(window_min, rate);
    if ((step + 1) % opt.window == 0) {
      if (window_min >= prev_window_min)
        throw NumericalError("static_characteristic: block does not settle (rate stalled at " +
                             std::to_string(window_min) + ")");
      prev_window_min = window_min;
      window_min = std::numeric_limits<double>::infinity();
    }

    // classical RK4 with frozen input
    block.drift(x, input, k1);
    for (std::size_t i = 0; i < x.size(); ++i) tmp[i] = x[i] + 0.5 * opt.dt * k1[i];
    block.drift(tmp, input, k2);
    for (std::size_t i = 0; i < x.size(); ++i) tmp[i] = x[i] + 0.5 * opt.dt * k2[i];
    block.drift(tmp, input, k3);
    for (std::size_t i = 0; i < x.size(); ++i) tmp[i] = x[i] + opt.dt * k3[i];
    block.drift(tmp, input, k4);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] += opt.dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);

    for (double v : x)
      if (!std::isfinite(v) || std::abs(v) > opt.divergence_bound)
        throw NumericalError("static_characteristic: block diverges under constant input");
  }
  throw NumericalError("static_characteristic: step cap reached before settling");
}

// ---------------------------------------------------------------------------
// Passivity audit
// ---------------------------------------------------------------------------

struct BlockEquilibrium {
  double input = 0.0;
  double output = 0.0;
  Eigen::VectorXd state;
};

struct PassivityReport {
  bool pass = false;
  double worst_slack = 0.0;  // min over trace prefixes of supply - storage gap
  Eigen::Index worst_index = 0;
  bool plain_form = true;    // true when no dissipation rate was declared
  bool storage_available = true;
};

/// Checks the integrated dissipation inequality along a recorded trajectory:
/// storage growth must not exceed the integral of (u* - u)(y - y*) minus the
/// declared dissipation. Inputs are sampled on a uniform grid of spacing dt;
/// states are rows of `states`. Slack is evaluated on every prefix, so a
/// passing trace passes on all of its prefixes as well.
inline PassivityReport passivity_audit(const PassiveBlock& block,
                                       const Eigen::VectorXd& inputs,
                                       const Eigen::MatrixXd& states, double dt,
                                       const BlockEquilibrium& eq, double slack_tol = 1e-6) {
  if (states.rows() != inputs.size())
    throw ValidationError("passivity_audit: input and state traces have different lengths");
  if (states.cols() != block.dim)
    throw ValidationError("passivity_audit: state trace width does not match block dimension");
  if (dt <= 0.0) throw ValidationError("passivity_audit: grid spacing must be positive");
  if (inputs.size() < 2) throw ValidationError("passivity_audit: trace too short");

  PassivityReport report;
  report.plain_form = !block.dissipation;
  report.storage_available = static_cast<bool>(block.storage);

  const std::span<const double> eq_state(eq.state.data(), eq.state.size());
  const auto storage_at = [&](Eigen::Index i) {
    if (!block.storage) return 0.0;
    Eigen::VectorXd row = states.row(i);
    return block.storage(std::span<const double>(row.data(), row.size()), eq_state);
  };
  const auto supply_at = [&](Eigen::Index i) {
    Eigen::VectorXd row = states.row(i);
    const double y = block.output(std::span<const double>(row.data(), row.size()), inputs(i));
    const double u_shift = eq.input - inputs(i);
    double s = u_shift * (y - eq.output);
    if (block.dissipation) s -= block.dissipation(u_shift);
    return s;
  };

  const double v0 = storage_at(0);
  double integral = 0.0;
  double prev_supply = supply_at(0);
  report.worst_slack = 0.0; // prefix of length one: both sides zero
  report.worst_index = 0;
  for (Eigen::Index i = 1; i < inputs.size(); ++i) {
    const double supply = supply_at(i);
    integral += 0.5 * dt * (prev_supply + supply);
    prev_supply = supply;
    const double slack = integral - (storage_at(i) - v0);
    if (slack < report.worst_slack) {
      report.worst_slack = slack;
      report.worst_index = i;
    }
  }
  report.pass = report.worst_slack >= -slack_tol;
  return report;
}

} // namespace chpsim

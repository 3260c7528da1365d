#pragma once

// Electric and district-heating network models. Both graphs are validated
// once and treated as immutable afterwards; all constant matrices (incidence
// splits, the heat transport matrix, volume weights) derive from them.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "chpsim/errors.hpp"

namespace chpsim {

// ---------------------------------------------------------------------------
// Electric network
// ---------------------------------------------------------------------------

struct ElectricLine {
  int from = 0; // tail bus (0-based)
  int to = 0;   // head bus
  double susceptance = 0.0;  // p.u., > 0
  double nominal_flow = 0.0; // p.u., subtracted from the sine flow
};

/// Lossless transmission grid: buses with inertia/damping, oriented lines.
/// Converter buses (zero inertia, no damping, no load) exist only after a
/// Mode 2 attachment and host exactly one heat-pump converter.
struct ElectricNetwork {
  int n_bus = 0;
  std::vector<double> inertia;       // per bus, p.u.*s; 0 only on converter buses
  std::vector<double> damping;       // per bus, p.u./(rad/s); 0 only on converter buses
  std::vector<ElectricLine> lines;
  std::vector<int> generator_buses;  // buses hosting a controlled generator
  std::vector<bool> is_converter;    // true for attached converter buses

  int n_lines() const { return static_cast<int>(lines.size()); }
  int n_generators() const { return static_cast<int>(generator_buses.size()); }

  bool converter(int bus) const {
    return !is_converter.empty() && is_converter[static_cast<std::size_t>(bus)];
  }
};

// ---------------------------------------------------------------------------
// Heating network
// ---------------------------------------------------------------------------

enum class HeatEdgeKind { Pump, Source, Load };

struct HeatEdge {
  int tail = 0; // inlet node: mass flows tail -> edge -> head
  int head = 0;
  HeatEdgeKind kind = HeatEdgeKind::Load;
  double volume = 0.0; // p.u., > 0
  double flow = 0.0;   // mass flow, p.u., > 0
  double demand = 0.0; // constant heat demand deviation, load edges only
};

/// Heating graph: every edge is a single-inlet single-outlet device
/// (pump, boiler-type source, or load heat exchanger); nodes mix flows.
struct HeatNetwork {
  int n_node = 0;
  std::vector<double> node_volume; // p.u., > 0
  std::vector<HeatEdge> edges;

  int n_edges() const { return static_cast<int>(edges.size()); }
  int n_temperatures() const { return n_edges() + n_node; }

  std::vector<int> edges_of_kind(HeatEdgeKind k) const {
    std::vector<int> out;
    for (int j = 0; j < n_edges(); ++j)
      if (edges[static_cast<std::size_t>(j)].kind == k) out.push_back(j);
    return out;
  }

  /// Incidence matrix, edges x nodes: +1 at the head node, -1 at the tail.
  Eigen::MatrixXd incidence() const {
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n_edges(), n_node);
    for (int j = 0; j < n_edges(); ++j) {
      const auto& e = edges[static_cast<std::size_t>(j)];
      b(j, e.head) += 1.0;
      b(j, e.tail) -= 1.0;
    }
    return b;
  }

  /// Diagonal of the volume matrix, edge entries followed by node entries.
  Eigen::VectorXd volume_vector() const {
    Eigen::VectorXd v(n_temperatures());
    for (int j = 0; j < n_edges(); ++j) v(j) = edges[static_cast<std::size_t>(j)].volume;
    for (int k = 0; k < n_node; ++k) v(n_edges() + k) = node_volume[static_cast<std::size_t>(k)];
    return v;
  }

  double total_volume() const { return volume_vector().sum(); }
};

// ---------------------------------------------------------------------------
// Heat-pump coupling
// ---------------------------------------------------------------------------

struct Pump {
  int bus = 0;   // electric bus (Mode 1 location; Mode 2 host before attachment)
  int edge = 0;  // heat edge of kind Pump
  double cop = 0.0;        // heat out / electric in, > 1
  double freq_droop = 0.0; // Mode 1 gain: pump power per rad/s, > 0
  double temp_gain = 0.0;  // Mode 2 gain: converter frequency per K, > 0
  double link_susceptance = 0.0; // Mode 2 host-to-converter line, > 0
};

struct PumpCoupling {
  std::vector<Pump> pumps;
  int n_pumps() const { return static_cast<int>(pumps.size()); }
};

struct Networks {
  ElectricNetwork electric;
  HeatNetwork heat;
  PumpCoupling coupling;
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

namespace detail {

inline void check_connected(int n, const std::vector<std::pair<int, int>>& arcs,
                            const std::string& what) {
  if (n <= 0) throw ValidationError(what + ": empty graph");
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (const auto& [a, b] : arcs) {
    adj[static_cast<std::size_t>(a)].push_back(b);
    adj[static_cast<std::size_t>(b)].push_back(a);
  }
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  std::vector<int> stack{0};
  seen[0] = true;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int w : adj[static_cast<std::size_t>(v)])
      if (!seen[static_cast<std::size_t>(w)]) {
        seen[static_cast<std::size_t>(w)] = true;
        stack.push_back(w);
      }
  }
  if (!std::all_of(seen.begin(), seen.end(), [](bool s) { return s; }))
    throw ValidationError(what + ": graph is not connected");
}

} // namespace detail

/// Checks every structural and sign invariant of the three inputs and
/// returns them as a validated bundle. Tolerance for nodal mass-flow
/// conservation is 1e-9 in flow units.
inline Networks validate_networks(const ElectricNetwork& electric, const HeatNetwork& heat,
                                  const PumpCoupling& coupling,
                                  double flow_balance_tol = 1e-9) {
  // --- electric ---
  const int nb = electric.n_bus;
  if (nb <= 0) throw ValidationError("electric: bus count must be positive");
  if (static_cast<int>(electric.inertia.size()) != nb ||
      static_cast<int>(electric.damping.size()) != nb)
    throw ValidationError("electric: inertia/damping vectors must have one entry per bus");
  if (!electric.is_converter.empty() && static_cast<int>(electric.is_converter.size()) != nb)
    throw ValidationError("electric: converter flags must have one entry per bus");

  for (int j = 0; j < nb; ++j) {
    const bool conv = electric.converter(j);
    const double m = electric.inertia[static_cast<std::size_t>(j)];
    const double d = electric.damping[static_cast<std::size_t>(j)];
    if (conv) {
      if (m != 0.0 || d != 0.0)
        throw ValidationError("electric: converter bus " + std::to_string(j + 1) +
                              " must carry zero inertia and damping");
    } else {
      if (m <= 0.0)
        throw ValidationError("electric: nonpositive inertia at bus " + std::to_string(j + 1));
      if (d <= 0.0)
        throw ValidationError("electric: nonpositive damping at bus " + std::to_string(j + 1));
    }
  }

  std::set<std::pair<int, int>> oriented;
  std::vector<std::pair<int, int>> arcs;
  for (const auto& l : electric.lines) {
    if (l.from < 0 || l.from >= nb || l.to < 0 || l.to >= nb)
      throw ValidationError("electric: line references a nonexistent bus");
    if (l.from == l.to) throw ValidationError("electric: self-loop line");
    if (l.susceptance <= 0.0)
      throw ValidationError("electric: nonpositive susceptance on line " +
                            std::to_string(l.from + 1) + "-" + std::to_string(l.to + 1));
    if (!oriented.insert({l.from, l.to}).second)
      throw ValidationError("electric: duplicate line");
    if (oriented.count({l.to, l.from}))
      throw ValidationError("electric: both orientations of line " + std::to_string(l.from + 1) +
                            "-" + std::to_string(l.to + 1) + " present");
    arcs.emplace_back(l.from, l.to);
  }
  if (nb > 1) detail::check_connected(nb, arcs, "electric");

  std::set<int> gen_buses;
  for (int g : electric.generator_buses) {
    if (g < 0 || g >= nb) throw ValidationError("electric: generator on nonexistent bus");
    if (!gen_buses.insert(g).second)
      throw ValidationError("electric: duplicate generator at bus " + std::to_string(g + 1));
    if (electric.converter(g))
      throw ValidationError("electric: generator placed on converter bus " + std::to_string(g + 1));
  }

  // --- heating ---
  if (heat.n_node <= 0) throw ValidationError("heat: node count must be positive");
  if (static_cast<int>(heat.node_volume.size()) != heat.n_node)
    throw ValidationError("heat: node volume vector must have one entry per node");
  if (heat.n_edges() == 0) throw ValidationError("heat: at least one edge required");
  for (double v : heat.node_volume)
    if (v <= 0.0) throw ValidationError("heat: nonpositive node volume");

  std::vector<double> net_flow(static_cast<std::size_t>(heat.n_node), 0.0);
  std::vector<std::pair<int, int>> heat_arcs;
  for (int j = 0; j < heat.n_edges(); ++j) {
    const auto& e = heat.edges[static_cast<std::size_t>(j)];
    if (e.tail < 0 || e.tail >= heat.n_node || e.head < 0 || e.head >= heat.n_node)
      throw ValidationError("heat: edge " + std::to_string(j + 1) +
                            " references a nonexistent node");
    if (e.tail == e.head)
      throw ValidationError("heat: edge " + std::to_string(j + 1) +
                            " must connect two distinct nodes");
    if (e.volume <= 0.0)
      throw ValidationError("heat: nonpositive volume on edge " + std::to_string(j + 1));
    if (e.flow <= 0.0)
      throw ValidationError("heat: nonpositive mass flow on edge " + std::to_string(j + 1));
    net_flow[static_cast<std::size_t>(e.head)] += e.flow;
    net_flow[static_cast<std::size_t>(e.tail)] -= e.flow;
    heat_arcs.emplace_back(e.tail, e.head);
  }
  for (int k = 0; k < heat.n_node; ++k)
    if (std::abs(net_flow[static_cast<std::size_t>(k)]) > flow_balance_tol)
      throw ValidationError("heat: mass flow imbalance " +
                            std::to_string(net_flow[static_cast<std::size_t>(k)]) + " at node " +
                            std::to_string(k + 1));
  detail::check_connected(heat.n_node, heat_arcs, "heat");

  // --- coupling ---
  std::set<int> pump_buses, pump_edges;
  for (const auto& p : coupling.pumps) {
    if (p.bus < 0 || p.bus >= nb) throw ValidationError("coupling: pump on nonexistent bus");
    if (p.edge < 0 || p.edge >= heat.n_edges())
      throw ValidationError("coupling: pump on nonexistent heat edge");
    if (heat.edges[static_cast<std::size_t>(p.edge)].kind != HeatEdgeKind::Pump)
      throw ValidationError("coupling: heat edge " + std::to_string(p.edge + 1) +
                            " is not a pump edge");
    if (!pump_buses.insert(p.bus).second)
      throw ValidationError("coupling: two pumps share bus " + std::to_string(p.bus + 1));
    if (!pump_edges.insert(p.edge).second)
      throw ValidationError("coupling: two pumps share heat edge " + std::to_string(p.edge + 1));
    if (p.cop <= 1.0) throw ValidationError("coupling: pump CoP must exceed 1");
    if (p.freq_droop <= 0.0) throw ValidationError("coupling: pump frequency droop must be positive");
    if (p.temp_gain <= 0.0) throw ValidationError("coupling: pump temperature gain must be positive");
    if (gen_buses.count(p.bus) && electric.converter(p.bus))
      throw ValidationError("coupling: converter bus hosts a generator");
  }
  for (int j : heat.edges_of_kind(HeatEdgeKind::Pump))
    if (!pump_edges.count(j))
      throw ValidationError("coupling: pump edge " + std::to_string(j + 1) +
                            " has no pump assigned");

  return Networks{electric, heat, coupling};
}

// ---------------------------------------------------------------------------
// Constant-matrix construction
// ---------------------------------------------------------------------------

/// Splits an incidence matrix into its head selector (entries where B = +1)
/// and tail selector (entries where B = -1). head - tail reconstructs B.
/// Rows with entries outside {-1, 0, +1} or with repeated heads/tails are
/// rejected; all-zero rows pass through as zero rows.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> split_incidence(const Eigen::MatrixXd& b) {
  Eigen::MatrixXd head = Eigen::MatrixXd::Zero(b.rows(), b.cols());
  Eigen::MatrixXd tail = Eigen::MatrixXd::Zero(b.rows(), b.cols());
  for (Eigen::Index i = 0; i < b.rows(); ++i) {
    int heads = 0, tails = 0;
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      const double v = b(i, j);
      if (v == 1.0) {
        head(i, j) = 1.0;
        ++heads;
      } else if (v == -1.0) {
        tail(i, j) = 1.0;
        ++tails;
      } else if (v != 0.0) {
        throw ValidationError("split_incidence: entry outside {-1,0,1} in row " +
                              std::to_string(i + 1));
      }
    }
    if (heads > 1 || tails > 1)
      throw ValidationError("split_incidence: malformed incidence row " + std::to_string(i + 1));
  }
  return {head, tail};
}

/// Transport matrix of the heating system, size (edges + nodes) squared.
/// Block structure, with Q = diag(edge flows), Bh = head selector,
/// Bt = tail selector:
///
///   [ Q            -Q * Bt      ]
///   [ -Bh^T * Q    diag(Bh^T q) ]
///
/// Row sums vanish identically; column sums vanish when nodal mass flow is
/// conserved, which validate_networks enforces.
inline Eigen::MatrixXd assemble_transport_matrix(const HeatNetwork& heat) {
  const int ne = heat.n_edges();
  const int nn = heat.n_node;
  const auto [head, tail] = split_incidence(heat.incidence());

  Eigen::VectorXd q(ne);
  for (int j = 0; j < ne; ++j) q(j) = heat.edges[static_cast<std::size_t>(j)].flow;

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(ne + nn, ne + nn);
  a.topLeftCorner(ne, ne) = q.asDiagonal();
  a.topRightCorner(ne, nn) = -(q.asDiagonal() * tail);
  a.bottomLeftCorner(nn, ne) = -(head.transpose() * q.asDiagonal());
  a.bottomRightCorner(nn, nn) = Eigen::VectorXd(head.transpose() * q).asDiagonal();
  return a;
}

/// Volume-weighted mean of a full temperature vector (edges then nodes).
inline double average_temperature(const Eigen::VectorXd& temperatures, const HeatNetwork& heat) {
  if (temperatures.size() != heat.n_temperatures())
    throw ValidationError("average_temperature: vector length " +
                          std::to_string(temperatures.size()) + " does not match network size " +
                          std::to_string(heat.n_temperatures()));
  const Eigen::VectorXd v = heat.volume_vector();
  return v.dot(temperatures) / v.sum();
}

/// Appends one zero-inertia converter bus, linked to host_bus by a single
/// line of the given susceptance, and returns the augmented network together
/// with the new bus index. The converter carries no damping, load, or
/// generator; its power balance is purely algebraic.
inline std::pair<ElectricNetwork, int> attach_converter_bus(const ElectricNetwork& net,
                                                            int host_bus,
                                                            double link_susceptance) {
  if (host_bus < 0 || host_bus >= net.n_bus)
    throw ValidationError("attach_converter_bus: host bus does not exist");
  if (net.converter(host_bus))
    throw ValidationError("attach_converter_bus: host bus is itself a converter bus");
  if (link_susceptance <= 0.0)
    throw ValidationError("attach_converter_bus: link susceptance must be positive");

  ElectricNetwork out = net;
  const int conv = out.n_bus;
  out.n_bus += 1;
  out.inertia.push_back(0.0);
  out.damping.push_back(0.0);
  if (out.is_converter.empty()) out.is_converter.assign(static_cast<std::size_t>(conv), false);
  out.is_converter.push_back(true);
  out.lines.push_back(ElectricLine{host_bus, conv, link_susceptance, 0.0});
  return {out, conv};
}

} // namespace chpsim

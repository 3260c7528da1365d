#pragma once

// Scenario files: a sectioned key=value text format describing the networks,
// controller parameters, disturbance schedule, and integration settings of
// one experiment. The parser is strict: unknown sections, keys, or fields
// are errors, and every diagnostic carries a file:line location.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chpsim/errors.hpp"
#include "chpsim/network.hpp"

namespace chpsim {

enum class PumpMode { FrequencyLoad = 1, ConverterLinked = 2 };

enum class BlockKind { FirstOrder, DemoSecondOrder };

struct GeneratorConfig {
  int bus = 0;
  double cost = 1.0;          // electric generation cost coefficient
  BlockKind block = BlockKind::FirstOrder;
};

struct HeatSourceConfig {
  int edge = 0;
  double cost = 1.0;          // heat generation cost coefficient
  BlockKind block = BlockKind::FirstOrder;
};

struct StepDisturbance {
  double time = 0.0;
  bool electric = true; // true: bus load step, false: heat edge demand step
  int target = 0;       // bus or edge index (0-based)
  double magnitude = 0.0;
};

struct SimSettings {
  PumpMode mode = PumpMode::FrequencyLoad;
  double dt = 1e-3;
  double t_end = 20.0;
};

struct Scenario {
  std::string name;
  int schema_version = 1;
  ElectricNetwork electric;
  HeatNetwork heat;
  PumpCoupling coupling;
  std::vector<GeneratorConfig> generators;
  std::vector<HeatSourceConfig> sources;
  std::vector<StepDisturbance> disturbances;
  SimSettings sim;

  /// Total stepped load deviation on a bus at time t (steps are
  /// right-continuous: a step at t contributes from t on).
  double bus_load(int bus, double t) const {
    double load = 0.0;
    for (const auto& s : disturbances)
      if (s.electric && s.target == bus && t >= s.time) load += s.magnitude;
    return load;
  }

  /// Heat demand deviation on an edge at time t: constant base demand plus
  /// scheduled steps.
  double edge_demand(int edge, double t) const {
    double demand = heat.edges[static_cast<std::size_t>(edge)].demand;
    for (const auto& s : disturbances)
      if (!s.electric && s.target == edge && t >= s.time) demand += s.magnitude;
    return demand;
  }

  double total_bus_load(double t) const {
    double load = 0.0;
    for (const auto& s : disturbances)
      if (s.electric && t >= s.time) load += s.magnitude;
    return load;
  }

  double total_heat_demand(double t) const {
    double demand = 0.0;
    for (const auto& e : heat.edges)
      if (e.kind == HeatEdgeKind::Load) demand += e.demand;
    for (const auto& s : disturbances)
      if (!s.electric && t >= s.time) demand += s.magnitude;
    return demand;
  }
};

// ---------------------------------------------------------------------------
// Scenario validation (cross-section consistency)
// ---------------------------------------------------------------------------

inline void validate_scenario(const Scenario& sc) {
  validate_networks(sc.electric, sc.heat, sc.coupling);

  if (sc.schema_version != 1)
    throw ValidationError("scenario: unsupported schema_version " +
                          std::to_string(sc.schema_version));
  if (sc.sim.dt <= 0.0) throw ValidationError("scenario: dt must be positive");
  if (sc.sim.t_end < 0.0) throw ValidationError("scenario: t_end must be nonnegative");

  // Generator configs must match the generator set exactly.
  std::vector<int> cfg_buses;
  for (const auto& g : sc.generators) cfg_buses.push_back(g.bus);
  std::vector<int> net_buses = sc.electric.generator_buses;
  std::sort(cfg_buses.begin(), cfg_buses.end());
  std::sort(net_buses.begin(), net_buses.end());
  if (cfg_buses != net_buses)
    throw ValidationError("scenario: generator control entries do not match the generator set");
  for (const auto& g : sc.generators)
    if (g.cost <= 0.0)
      throw ValidationError("scenario: nonpositive generator cost at bus " +
                            std::to_string(g.bus + 1));

  // Source configs must cover exactly the source edges.
  std::vector<int> cfg_edges;
  for (const auto& s : sc.sources) cfg_edges.push_back(s.edge);
  std::vector<int> src_edges = sc.heat.edges_of_kind(HeatEdgeKind::Source);
  std::sort(cfg_edges.begin(), cfg_edges.end());
  if (cfg_edges != src_edges)
    throw ValidationError("scenario: heat source control entries do not match the source edges");
  for (const auto& s : sc.sources)
    if (s.cost <= 0.0)
      throw ValidationError("scenario: nonpositive heat source cost at edge " +
                            std::to_string(s.edge + 1));

  for (const auto& d : sc.disturbances) {
    if (d.time < 0.0 || d.time > sc.sim.t_end)
      throw ValidationError("scenario: disturbance at t=" + std::to_string(d.time) +
                            " outside [0, t_end]");
    if (d.electric) {
      if (d.target < 0 || d.target >= sc.electric.n_bus)
        throw ValidationError("scenario: load step on nonexistent bus");
      if (sc.electric.converter(d.target))
        throw ValidationError("scenario: load step on a converter bus");
    } else {
      if (d.target < 0 || d.target >= sc.heat.n_edges())
        throw ValidationError("scenario: demand step on nonexistent heat edge");
      if (sc.heat.edges[static_cast<std::size_t>(d.target)].kind != HeatEdgeKind::Load)
        throw ValidationError("scenario: demand step on a non-load heat edge");
    }
  }

  if (sc.sim.mode == PumpMode::ConverterLinked)
    for (const auto& p : sc.coupling.pumps)
      if (p.link_susceptance <= 0.0)
        throw ValidationError("scenario: converter link susceptance required for mode 2");
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

namespace detail {

struct ParseCursor {
  std::string path;
  int line = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ValidationError(path + ":" + std::to_string(line) + ": " + msg);
  }
};

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

inline double parse_number(const std::string& tok, const ParseCursor& at) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size())
    at.fail("expected a number, got '" + tok + "'");
  if (!std::isfinite(v)) at.fail("number '" + tok + "' is not finite");
  return v;
}

inline int parse_int(const std::string& tok, const ParseCursor& at) {
  int v = 0;
  const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || p != tok.data() + tok.size())
    at.fail("expected an integer, got '" + tok + "'");
  return v;
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream iss(s);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

/// field:value token list, order-insensitive, duplicates rejected.
class FieldList {
public:
  FieldList(const std::string& text, const ParseCursor& at) : at_(at) {
    for (const auto& tok : split_ws(text)) {
      const auto colon = tok.find(':');
      if (colon == std::string::npos || colon == 0 || colon + 1 == tok.size())
        at.fail("expected field:value, got '" + tok + "'");
      const std::string key = tok.substr(0, colon);
      if (!fields_.emplace(key, tok.substr(colon + 1)).second)
        at.fail("duplicate field '" + key + "'");
    }
  }

  double number(const std::string& key) { return parse_number(take(key), at_); }
  int integer(const std::string& key) { return parse_int(take(key), at_); }
  std::string word(const std::string& key) { return take(key); }

  std::optional<double> opt_number(const std::string& key) {
    if (!fields_.count(key)) return std::nullopt;
    return number(key);
  }
  std::optional<std::string> opt_word(const std::string& key) {
    if (!fields_.count(key)) return std::nullopt;
    return take(key);
  }
  std::optional<int> opt_integer(const std::string& key) {
    if (!fields_.count(key)) return std::nullopt;
    return integer(key);
  }

  void finish() const {
    if (!fields_.empty()) at_.fail("unknown field '" + fields_.begin()->first + "'");
  }

private:
  std::string take(const std::string& key) {
    const auto it = fields_.find(key);
    if (it == fields_.end()) at_.fail("missing field '" + key + "'");
    std::string v = it->second;
    fields_.erase(it);
    return v;
  }

  std::map<std::string, std::string> fields_;
  ParseCursor at_;
};

inline BlockKind parse_block_kind(const std::string& word, const ParseCursor& at) {
  if (word == "first_order") return BlockKind::FirstOrder;
  if (word == "demo_second_order") return BlockKind::DemoSecondOrder;
  at.fail("unknown block kind '" + word + "' (expected first_order or demo_second_order)");
}

} // namespace detail

/// Parses and validates a scenario file. See scenarios/paper_mode1.scn for
/// the annotated reference of the schema.
inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scenario file '" + path + "'");

  Scenario sc;
  sc.name = path;
  const auto slash = path.find_last_of('/');
  std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
  const auto dot = base.find_last_of('.');
  sc.name = dot == std::string::npos ? base : base.substr(0, dot);

  // Heat edges arrive keyed by 1-based id; reassemble in id order.
  std::map<int, HeatEdge> heat_edges;
  bool saw_schema_version = false;
  int declared_buses = 0, declared_nodes = 0;

  detail::ParseCursor at{path, 0};
  std::string section;
  std::string raw;
  while (std::getline(in, raw)) {
    ++at.line;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') at.fail("unterminated section header");
      section = line.substr(1, line.size() - 2);
      if (section != "electric" && section != "heat" && section != "coupling" &&
          section != "control" && section != "disturbances" && section != "sim")
        at.fail("unknown section [" + section + "]");
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string::npos) at.fail("expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) at.fail("empty key");
    if (value.empty()) at.fail("empty value for '" + key + "'");

    if (section.empty()) {
      if (key == "schema_version") {
        sc.schema_version = detail::parse_int(value, at);
        saw_schema_version = true;
      } else {
        at.fail("unknown top-level key '" + key + "'");
      }
      continue;
    }

    if (section == "electric") {
      if (key == "buses") {
        declared_buses = detail::parse_int(value, at);
        if (declared_buses <= 0) at.fail("bus count must be positive");
        sc.electric.n_bus = declared_buses;
      } else if (key == "inertia" || key == "damping") {
        auto& dst = key == "inertia" ? sc.electric.inertia : sc.electric.damping;
        for (const auto& tok : detail::split_ws(value))
          dst.push_back(detail::parse_number(tok, at));
      } else if (key == "line") {
        detail::FieldList f(value, at);
        ElectricLine l;
        l.from = f.integer("from") - 1;
        l.to = f.integer("to") - 1;
        l.susceptance = f.number("b");
        l.nominal_flow = f.opt_number("pnom").value_or(0.0);
        f.finish();
        sc.electric.lines.push_back(l);
      } else {
        at.fail("unknown key '" + key + "' in [electric]");
      }
    } else if (section == "heat") {
      if (key == "nodes") {
        declared_nodes = detail::parse_int(value, at);
        if (declared_nodes <= 0) at.fail("node count must be positive");
        sc.heat.n_node = declared_nodes;
      } else if (key == "node_volume") {
        for (const auto& tok : detail::split_ws(value))
          sc.heat.node_volume.push_back(detail::parse_number(tok, at));
      } else if (key == "edge") {
        detail::FieldList f(value, at);
        const int id = f.integer("id");
        HeatEdge e;
        e.tail = f.integer("from") - 1;
        e.head = f.integer("to") - 1;
        const std::string kind = f.word("type");
        if (kind == "pump")
          e.kind = HeatEdgeKind::Pump;
        else if (kind == "source")
          e.kind = HeatEdgeKind::Source;
        else if (kind == "load")
          e.kind = HeatEdgeKind::Load;
        else
          at.fail("unknown edge type '" + kind + "'");
        e.volume = f.number("volume");
        e.flow = f.number("flow");
        const auto demand = f.opt_number("demand");
        if (demand && e.kind != HeatEdgeKind::Load)
          at.fail("demand is only valid on load edges");
        e.demand = demand.value_or(0.0);
        f.finish();
        if (id < 1) at.fail("edge ids are 1-based");
        if (!heat_edges.emplace(id, e).second) at.fail("duplicate edge id " + std::to_string(id));
      } else {
        at.fail("unknown key '" + key + "' in [heat]");
      }
    } else if (section == "coupling") {
      if (key == "pump") {
        detail::FieldList f(value, at);
        Pump p;
        p.bus = f.integer("bus") - 1;
        p.edge = f.integer("edge") - 1;
        p.cop = f.number("cop");
        p.freq_droop = f.number("a1");
        p.temp_gain = f.number("m");
        p.link_susceptance = f.opt_number("link_b").value_or(0.0);
        f.finish();
        sc.coupling.pumps.push_back(p);
      } else {
        at.fail("unknown key '" + key + "' in [coupling]");
      }
    } else if (section == "control") {
      if (key == "generator") {
        detail::FieldList f(value, at);
        GeneratorConfig g;
        g.bus = f.integer("bus") - 1;
        g.cost = f.number("q");
        if (auto b = f.opt_word("block")) g.block = detail::parse_block_kind(*b, at);
        f.finish();
        sc.generators.push_back(g);
        sc.electric.generator_buses.push_back(g.bus);
      } else if (key == "source") {
        detail::FieldList f(value, at);
        HeatSourceConfig s;
        s.edge = f.integer("edge") - 1;
        s.cost = f.number("q");
        if (auto b = f.opt_word("block")) s.block = detail::parse_block_kind(*b, at);
        f.finish();
        sc.sources.push_back(s);
      } else {
        at.fail("unknown key '" + key + "' in [control]");
      }
    } else if (section == "disturbances") {
      if (key == "step") {
        detail::FieldList f(value, at);
        StepDisturbance d;
        d.time = f.number("t");
        const auto bus = f.opt_integer("bus");
        const auto edge = f.opt_integer("edge");
        if (bus && edge) at.fail("step targets either a bus or an edge, not both");
        if (bus) {
          d.electric = true;
          d.target = *bus - 1;
          d.magnitude = f.number("dp");
        } else if (edge) {
          d.electric = false;
          d.target = *edge - 1;
          d.magnitude = f.number("dh");
        } else {
          at.fail("step needs a bus or edge target");
        }
        f.finish();
        sc.disturbances.push_back(d);
      } else {
        at.fail("unknown key '" + key + "' in [disturbances]");
      }
    } else if (section == "sim") {
      if (key == "mode") {
        const int m = detail::parse_int(value, at);
        if (m != 1 && m != 2) at.fail("mode must be 1 or 2");
        sc.sim.mode = m == 1 ? PumpMode::FrequencyLoad : PumpMode::ConverterLinked;
      } else if (key == "dt") {
        sc.sim.dt = detail::parse_number(value, at);
      } else if (key == "t_end") {
        sc.sim.t_end = detail::parse_number(value, at);
      } else {
        at.fail("unknown key '" + key + "' in [sim]");
      }
    }
  }

  at.line = 0;
  if (!saw_schema_version) at.fail("missing schema_version");
  if (declared_buses == 0) at.fail("missing [electric] buses");
  if (declared_nodes == 0) at.fail("missing [heat] nodes");
  if (static_cast<int>(heat_edges.size()) != static_cast<int>(heat_edges.empty() ? 0 : heat_edges.rbegin()->first))
    at.fail("heat edge ids must form a contiguous 1..n range");
  for (auto& [id, e] : heat_edges) sc.heat.edges.push_back(e);

  try {
    validate_scenario(sc);
  } catch (const ValidationError& err) {
    throw ValidationError(path + ": " + err.what());
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Mode 2 network assembly
// ---------------------------------------------------------------------------

/// For each pump, appends a converter bus linked to the pump's host bus and
/// relocates the pump onto the new bus. Only meaningful under mode 2.
inline Networks mode2_networks(const Scenario& sc) {
  if (sc.sim.mode != PumpMode::ConverterLinked)
    throw ValidationError("mode2_networks: scenario does not select mode 2");
  ElectricNetwork net = sc.electric;
  PumpCoupling coupling = sc.coupling;
  for (auto& p : coupling.pumps) {
    const auto [augmented, conv] = attach_converter_bus(net, p.bus, p.link_susceptance);
    net = augmented;
    p.bus = conv;
  }
  return validate_networks(net, sc.heat, coupling);
}

} // namespace chpsim

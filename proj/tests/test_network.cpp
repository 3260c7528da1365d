#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>
#include <random>

#include "chpsim/network.hpp"
#include "test_support.hpp"

using namespace chpsim;
using Catch::Approx;

namespace {

/// 2-node / 2-edge circulation: e1 runs n1->n2, e2 runs n2->n1.
HeatNetwork two_node_cycle(double q1 = 1.0, double q2 = 1.0) {
  HeatNetwork net;
  net.n_node = 2;
  net.node_volume = {1.0, 1.0};
  net.edges.push_back(HeatEdge{0, 1, HeatEdgeKind::Load, 1.0, q1, 0.0});
  net.edges.push_back(HeatEdge{1, 0, HeatEdgeKind::Load, 1.0, q2, 0.0});
  return net;
}

ElectricNetwork three_bus_electric() {
  ElectricNetwork net;
  net.n_bus = 3;
  net.inertia = {0.4, 0.35, 0.3};
  net.damping = {0.8, 0.9, 0.7};
  net.lines = {ElectricLine{0, 1, 5.0, 0.0}, ElectricLine{1, 2, 4.0, 0.0}};
  net.generator_buses = {0, 1};
  return net;
}

} // namespace

TEST_CASE("split_incidence selects heads and tails", "[network]") {
  SECTION("single edge n1->n2") {
    Eigen::MatrixXd b(1, 2);
    b << -1.0, 1.0;
    const auto [head, tail] = split_incidence(b);
    REQUIRE(head(0, 0) == 0.0);
    REQUIRE(head(0, 1) == 1.0);
    REQUIRE(tail(0, 0) == 1.0);
    REQUIRE(tail(0, 1) == 0.0);
  }

  SECTION("zero matrix splits into zero matrices") {
    const Eigen::MatrixXd b = Eigen::MatrixXd::Zero(3, 4);
    const auto [head, tail] = split_incidence(b);
    REQUIRE(head.isZero(0.0));
    REQUIRE(tail.isZero(0.0));
  }

  SECTION("two-edge cycle") {
    const auto b = two_node_cycle().incidence();
    const auto [head, tail] = split_incidence(b);
    Eigen::MatrixXd expected_head(2, 2), expected_tail(2, 2);
    expected_head << 0, 1, 1, 0;
    expected_tail << 1, 0, 0, 1;
    REQUIRE(head == expected_head);
    REQUIRE(tail == expected_tail);
    REQUIRE((head - tail - b).isZero(0.0));
  }

  SECTION("malformed rows are rejected") {
    Eigen::MatrixXd two_heads(1, 3);
    two_heads << 1.0, 1.0, -1.0;
    REQUIRE_THROWS_AS(split_incidence(two_heads), ValidationError);
    Eigen::MatrixXd bad_entry(1, 2);
    bad_entry << 0.5, -1.0;
    REQUIRE_THROWS_AS(split_incidence(bad_entry), ValidationError);
  }

  SECTION("reconstruction holds on random networks") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 30; ++trial) {
      const auto net = testing::random_flow_conserving_network(rng);
      const auto b = net.incidence();
      const auto [head, tail] = split_incidence(b);
      REQUIRE((head - tail - b).isZero(0.0));
      REQUIRE((head + tail - b.cwiseAbs()).isZero(0.0));
      REQUIRE(head.minCoeff() >= 0.0);
      REQUIRE(tail.minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("transport matrix structure", "[network]") {
  SECTION("two-node cycle expands to the hand-computed matrix") {
    const auto a = assemble_transport_matrix(two_node_cycle());
    Eigen::MatrixXd expected(4, 4);
    // ordering: e1, e2, n1, n2
    expected << 1, 0, -1, 0, //
        0, 1, 0, -1,         //
        0, -1, 1, 0,         //
        -1, 0, 0, 1;
    REQUIRE((a - expected).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("row and column sums vanish on random flow-conserving networks") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const auto net = testing::random_flow_conserving_network(rng);
      const auto a = assemble_transport_matrix(net);
      REQUIRE(a.rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
      REQUIRE(a.colwise().sum().cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SECTION("symmetric part is PSD with a simple zero eigenvalue") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 20; ++trial) {
      const auto net = testing::random_flow_conserving_network(rng);
      const auto a = assemble_transport_matrix(net);
      const Eigen::MatrixXd sym = a + a.transpose();
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigs(sym);
      const auto& ev = eigs.eigenvalues();
      REQUIRE(std::abs(ev(0)) < 1e-10);
      REQUIRE(ev(1) > 1e-10);
    }
  }

  SECTION("the 10-edge reference ring has the same eigenstructure") {
    const auto sc = load_scenario(testing::scenario_path("paper_mode1.scn"));
    const auto a = assemble_transport_matrix(sc.heat);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigs(a + a.transpose());
    REQUIRE(std::abs(eigs.eigenvalues()(0)) < 1e-10);
    REQUIRE(eigs.eigenvalues()(1) > 1e-10);
    REQUIRE(a.rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE(a.colwise().sum().cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("average temperature", "[network]") {
  const auto net = two_node_cycle();

  SECTION("unweighted mean with unit volumes") {
    Eigen::VectorXd t(4);
    t << 1, 2, 3, 4;
    REQUIRE(average_temperature(t, net) == Approx(2.5));
  }

  SECTION("constant vector returns the constant") {
    REQUIRE(average_temperature(Eigen::VectorXd::Constant(4, -0.7), net) == Approx(-0.7));
  }

  SECTION("weighted mean") {
    HeatNetwork weighted = net;
    weighted.edges[0].volume = 1.0;
    weighted.edges[1].volume = 3.0;
    weighted.node_volume = {0.5, 0.5};
    Eigen::VectorXd t(4);
    t << 2, -2, 0, 0;
    // (1*2 + 3*(-2)) / 5
    REQUIRE(average_temperature(t, weighted) == Approx(-0.8));
  }

  SECTION("length mismatch is an error") {
    REQUIRE_THROWS_AS(average_temperature(Eigen::VectorXd::Zero(3), net), ValidationError);
  }

  SECTION("linearity") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> coeff(-2.0, 2.0);
    const auto random_net = testing::random_flow_conserving_network(rng);
    const int n = random_net.n_temperatures();
    for (int trial = 0; trial < 20; ++trial) {
      const Eigen::VectorXd t1 = Eigen::VectorXd::NullaryExpr(n, [&](Eigen::Index) { return coeff(rng); });
      const Eigen::VectorXd t2 = Eigen::VectorXd::NullaryExpr(n, [&](Eigen::Index) { return coeff(rng); });
      const double alpha = coeff(rng), beta = coeff(rng);
      const double lhs = average_temperature(alpha * t1 + beta * t2, random_net);
      const double rhs = alpha * average_temperature(t1, random_net) +
                         beta * average_temperature(t2, random_net);
      REQUIRE(lhs == Approx(rhs).margin(1e-12));
    }
  }
}

TEST_CASE("network validation", "[network]") {
  const auto heat = two_node_cycle();

  SECTION("paper-scale inputs validate") {
    HeatNetwork ring;
    ring.n_node = 10;
    ring.node_volume.assign(10, 0.1);
    for (int j = 0; j < 10; ++j)
      ring.edges.push_back(HeatEdge{j, (j + 1) % 10,
                                    j == 0 ? HeatEdgeKind::Pump
                                    : (j == 2 || j == 4 || j == 8) ? HeatEdgeKind::Source
                                                                   : HeatEdgeKind::Load,
                                    0.3, 1.0, 0.0});
    PumpCoupling coupling;
    coupling.pumps.push_back(Pump{2, 0, 3.0, 2.0, 0.25, 6.0});
    REQUIRE_NOTHROW(validate_networks(three_bus_electric(), ring, coupling));
  }

  SECTION("trivial single-bus electric network validates") {
    REQUIRE_NOTHROW(validate_networks(testing::single_bus_electric(), heat, {}));
  }

  SECTION("mass-flow imbalance is rejected") {
    HeatNetwork bad = heat;
    bad.edges[1].flow = 2.0; // node 0: in 2, out 1
    REQUIRE_THROWS_WITH(validate_networks(testing::single_bus_electric(), bad, {}),
                        Catch::Matchers::ContainsSubstring("mass flow imbalance"));
  }

  SECTION("disconnected electric graph is rejected") {
    ElectricNetwork net = three_bus_electric();
    net.lines.pop_back();
    REQUIRE_THROWS_WITH(validate_networks(net, heat, {}),
                        Catch::Matchers::ContainsSubstring("not connected"));
  }

  SECTION("both line orientations are rejected") {
    ElectricNetwork net = three_bus_electric();
    net.lines.push_back(ElectricLine{2, 1, 1.0, 0.0});
    REQUIRE_THROWS_WITH(validate_networks(net, heat, {}),
                        Catch::Matchers::ContainsSubstring("both orientations"));
  }

  SECTION("nonpositive physical constants are rejected") {
    ElectricNetwork net = three_bus_electric();
    net.lines[0].susceptance = 0.0;
    REQUIRE_THROWS_AS(validate_networks(net, heat, {}), ValidationError);

    HeatNetwork bad_volume = heat;
    bad_volume.edges[0].volume = -1.0;
    REQUIRE_THROWS_AS(validate_networks(testing::single_bus_electric(), bad_volume, {}),
                      ValidationError);

    ElectricNetwork bad_damping = testing::single_bus_electric();
    bad_damping.damping[0] = 0.0;
    REQUIRE_THROWS_AS(validate_networks(bad_damping, heat, {}), ValidationError);
  }

  SECTION("duplicate pump assignments are rejected") {
    HeatNetwork pumped = heat;
    pumped.edges[0].kind = HeatEdgeKind::Pump;
    pumped.edges[1].kind = HeatEdgeKind::Pump;
    PumpCoupling coupling;
    coupling.pumps.push_back(Pump{0, 0, 3.0, 1.0, 1.0, 1.0});
    coupling.pumps.push_back(Pump{0, 1, 3.0, 1.0, 1.0, 1.0});
    REQUIRE_THROWS_WITH(validate_networks(testing::single_bus_electric(), pumped, coupling),
                        Catch::Matchers::ContainsSubstring("share bus"));
  }

  SECTION("dangling indices are rejected") {
    HeatNetwork bad = heat;
    bad.edges[0].head = 5;
    REQUIRE_THROWS_AS(validate_networks(testing::single_bus_electric(), bad, {}),
                      ValidationError);
    PumpCoupling coupling;
    coupling.pumps.push_back(Pump{9, 0, 3.0, 1.0, 1.0, 1.0});
    REQUIRE_THROWS_AS(validate_networks(testing::single_bus_electric(), heat, coupling),
                      ValidationError);
  }

  SECTION("pump edge without a pump is rejected") {
    HeatNetwork pumped = heat;
    pumped.edges[0].kind = HeatEdgeKind::Pump;
    REQUIRE_THROWS_WITH(validate_networks(testing::single_bus_electric(), pumped, {}),
                        Catch::Matchers::ContainsSubstring("no pump assigned"));
  }
}

TEST_CASE("converter bus attachment", "[network]") {
  const auto net = three_bus_electric();

  SECTION("one pump appends one zero-inertia bus and one line") {
    const auto [augmented, conv] = attach_converter_bus(net, 2, 6.0);
    REQUIRE(conv == 3);
    REQUIRE(augmented.n_bus == 4);
    REQUIRE(augmented.n_lines() == 3);
    REQUIRE(augmented.lines.back().from == 2);
    REQUIRE(augmented.lines.back().to == 3);
    REQUIRE(augmented.lines.back().susceptance == 6.0);
    REQUIRE(augmented.inertia[3] == 0.0);
    REQUIRE(augmented.damping[3] == 0.0);
    REQUIRE(augmented.converter(3));
    REQUIRE_FALSE(augmented.converter(2));
  }

  SECTION("attachment to a converter bus is rejected") {
    const auto [augmented, conv] = attach_converter_bus(net, 2, 6.0);
    REQUIRE_THROWS_WITH(attach_converter_bus(augmented, conv, 1.0),
                        Catch::Matchers::ContainsSubstring("itself a converter"));
  }

  SECTION("nonpositive link susceptance is rejected") {
    REQUIRE_THROWS_AS(attach_converter_bus(net, 2, 0.0), ValidationError);
  }

  SECTION("nonexistent host bus is rejected") {
    REQUIRE_THROWS_AS(attach_converter_bus(net, 7, 1.0), ValidationError);
  }
}

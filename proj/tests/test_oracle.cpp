#include <gtest/gtest.h>

#include <cmath>

#include "graphyr/oracle.hpp"

using namespace graphyr;

namespace {

const std::string kData = GRAPHYR_DATA_DIR;

GridSpec t5() { return load_grid(kData + "/t5.grid"); }

/// Hand-derived T5 losses at nominal load with the node-2 PV at its 0.08 cap.
/// Close (3,4): lines carry (0.2-g, 0.1), (0.1-g, 0.05), (0.14, 0.05).
/// Close (2,4): lines carry (0.28-g, 0.13), (0.18-g, 0.08), (0.06, 0.02).
double t5_loss_close34(double g) {
  return 0.05 * ((0.2 - g) * (0.2 - g) + 0.01 + (0.1 - g) * (0.1 - g) + 0.0025 + 0.0196 + 0.0025);
}
double t5_loss_close24(double g) {
  return 0.05 * ((0.28 - g) * (0.28 - g) + 0.0169 + (0.18 - g) * (0.18 - g) + 0.0064 + 0.0036 + 0.0004);
}

} // namespace

TEST(Enumerate, T5HasExactlyTwoTopologies) {
  const auto c = enumerate_radial_topologies(t5());
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].y, (std::vector<double>{0, 0, 1})); // close (2,4)
  EXPECT_EQ(c[1].y, (std::vector<double>{0, 1, 0})); // close (3,4)
  EXPECT_EQ(c[0].tree_edges.size(), 4u);
}

TEST(Enumerate, Bw33WithinBinomialBound) {
  const auto g = load_grid(kData + "/bw33.grid");
  const auto c = enumerate_radial_topologies(g);
  EXPECT_GT(c.size(), 0u);
  EXPECT_LE(c.size(), 56u);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_TRUE(is_radial(g, c[i].y));
    if (i > 0) {
      EXPECT_TRUE(lexicographically_less(c[i - 1].y, c[i].y));
    }
  }
}

TEST(Enumerate, NoSwitchToCloseGivesAllOpen) {
  auto g = t5();
  g.lines.push_back({3, 4, 0.05, 0.05}); // now a spanning tree by lines alone
  ASSERT_EQ(required_closed_count(g), 0u);
  const auto c = enumerate_radial_topologies(g);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].y, (std::vector<double>{0, 0, 0}));
}

TEST(Enumerate, ForcedClampsFilter) {
  const auto g = t5();
  ForcedSwitches f = no_forcing(g);
  f[1] = SwitchClamp::open;
  const auto c = enumerate_radial_topologies(g, f);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].y, (std::vector<double>{0, 0, 1}));
}

TEST(SolveFixedTopology, T5MatchesHandDerivation) {
  const auto g = t5();
  const auto sc = nominal_scenario(g);
  const auto c = enumerate_radial_topologies(g);
  const auto s24 = solve_fixed_topology(g, sc, c[0]);
  const auto s34 = solve_fixed_topology(g, sc, c[1]);
  ASSERT_EQ(s24.status, SolveStatus::optimal);
  ASSERT_EQ(s34.status, SolveStatus::optimal);
  EXPECT_NEAR(s24.objective_star, t5_loss_close24(0.08), 1e-12);
  EXPECT_NEAR(s34.objective_star, t5_loss_close34(0.08), 1e-12);
  EXPECT_NEAR(s34.flow_state_star.p_gen[2], 0.08, 1e-9);
  EXPECT_LE(s24.kkt_residual, 1e-8);
  EXPECT_LE(s34.kkt_residual, 1e-8);
  for (const auto* s : {&s24, &s34}) {
    EXPECT_LT(max_equality_residual(g, sc, s->flow_state_star), 1e-12);
    EXPECT_EQ(s->flow_state_star.v[0], 1.0);
    for (double v : s->flow_state_star.v) {
      EXPECT_GE(v, g.v_min - 1e-9);
      EXPECT_LE(v, g.v_max + 1e-9);
    }
  }
}

TEST(SolveDyr, T5PicksLowerLossTopology) {
  const auto g = t5();
  const auto best = solve_dyr(g, nominal_scenario(g));
  ASSERT_EQ(best.status, SolveStatus::optimal);
  EXPECT_EQ(best.y_star, (std::vector<double>{0, 1, 0}));
  EXPECT_NEAR(best.objective_star, 0.00247, 1e-12);
  EXPECT_EQ(best.qp_solves, 2u);
}

TEST(SolveDyr, TieGoesToSmallestY) {
  // Mirror-symmetric feeder: closing either switch gives the same losses.
  GridSpec g;
  g.name = "mirror";
  g.nodes = {NodeSpec{0, 0, 0, -1, 1, -1, 1}, NodeSpec{1, 0.05, 0.02, 0, 0, 0, 0}, NodeSpec{2, 0.05, 0.02, 0, 0, 0, 0},
             NodeSpec{3, 0.04, 0.01, 0, 0, 0, 0}};
  g.lines = {{0, 1, 0.05, 0.05}, {0, 2, 0.05, 0.05}};
  g.switches = {{1, 3, 0.05, 0.05}, {2, 3, 0.05, 0.05}};
  g.v_min = 0.81;
  g.v_max = 1.21;
  g.big_m = 0.5;
  validate(g);
  const auto best = solve_dyr(g, nominal_scenario(g));
  ASSERT_EQ(best.status, SolveStatus::optimal);
  EXPECT_EQ(best.y_star, (std::vector<double>{0, 1}));
}

TEST(SolveDyr, ImpossibleLoadIsInfeasible) {
  const auto g = t5();
  auto sc = nominal_scenario(g);
  sc.p_load[4] = 5.0; // beyond both the slack bound and M
  const auto best = solve_dyr(g, sc);
  EXPECT_EQ(best.status, SolveStatus::infeasible);
}

TEST(SolveDyr, Bw33KktAndPhysics) {
  const auto g = load_grid(kData + "/bw33.grid");
  const auto ds = generate_scenarios(g, 4, 3, 0.1, 0.25);
  for (const auto& sc : ds.scenarios) {
    const auto best = solve_dyr(g, sc, {}, 1);
    ASSERT_EQ(best.status, SolveStatus::optimal);
    EXPECT_LE(best.kkt_residual, 1e-8);
    EXPECT_TRUE(is_radial(g, best.y_star));
    EXPECT_LT(max_equality_residual(g, sc, best.flow_state_star), 1e-10);
    const auto h = inequality_vector(g, sc, best.flow_state_star);
    for (double x : h.entries) EXPECT_LT(x, 1e-8);
  }
}

TEST(SolveDyr, DominatesEveryCandidate) {
  const auto g = load_grid(kData + "/bw33.grid");
  const auto sc = generate_scenarios(g, 1, 8, 0.1, 0.25).scenarios.front();
  const auto best = solve_dyr(g, sc);
  for (const auto& c : enumerate_radial_topologies(g)) {
    const auto s = solve_fixed_topology(g, sc, c);
    if (s.status == SolveStatus::optimal) {
      EXPECT_LE(best.objective_star, s.objective_star + 1e-15);
    }
  }
}

TEST(OracleCsv, RoundTripKeepsTargets) {
  const auto g = t5();
  auto ds = generate_scenarios(g, 5, 2, 0.1, 0.25);
  ds.scenarios[3].p_load[4] = 5.0;
  const auto table = solve_all(g, ds.scenarios, 2);
  const auto text = format_oracle_csv(g, table);
  const auto back = parse_oracle_csv(g, text);
  ASSERT_EQ(back.records.size(), 5u);
  EXPECT_EQ(back.find(3)->status, SolveStatus::infeasible);
  for (std::size_t i : {0u, 1u, 2u, 4u}) {
    const auto* a = table.find(i);
    const auto* b = back.find(i);
    ASSERT_EQ(b->status, SolveStatus::optimal);
    EXPECT_EQ(a->y_star, b->y_star);
    EXPECT_EQ(a->objective_star, b->objective_star);
    EXPECT_EQ(a->flow_state_star.v, b->flow_state_star.v);
    EXPECT_EQ(a->flow_state_star.p_gen, b->flow_state_star.p_gen);
  }
  EXPECT_EQ(format_oracle_csv(g, back), text);
  EXPECT_THROW(parse_oracle_csv(load_grid(kData + "/t5_variant.grid"), text), ParseError);
}

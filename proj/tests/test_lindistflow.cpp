#include <gtest/gtest.h>

#include <cmath>

#include "graphyr/lindistflow.hpp"
#include "graphyr/random.hpp"

using namespace graphyr;

namespace {

const std::string kData = GRAPHYR_DATA_DIR;

GridSpec t5() { return load_grid(kData + "/t5.grid"); }

GridSpec single_line(double r, double x) {
  GridSpec g;
  g.name = "pair";
  g.nodes = {NodeSpec{0, 0, 0, -1, 1, -1, 1}, NodeSpec{1, 0.1, 0.05, 0, 0, 0, 0}};
  g.lines = {EdgeSpec{0, 1, r, x}};
  g.v_min = 0.9;
  g.v_max = 1.1;
  g.big_m = 0.5;
  validate(g);
  return g;
}

} // namespace

TEST(Objective, SingleLineHandValue) {
  const auto g = single_line(0.05, 0.05);
  auto s = zero_flow_state(g);
  s.p_line = {0.1};
  s.q_line = {0.05};
  EXPECT_NEAR(objective(g, s), 6.25e-4, 1e-18);
}

TEST(Objective, ZeroCases) {
  auto g = t5();
  auto s = zero_flow_state(g);
  EXPECT_EQ(objective(g, s), 0.0);
  for (auto& e : g.lines) e.r = 0.0;
  s.p_line = {0.3, -0.2, 0.1};
  s.q_line = {0.1, 0.1, 0.1};
  EXPECT_EQ(objective(g, s), 0.0);
}

TEST(Objective, SwitchFlowsExcluded) {
  const auto g = t5();
  auto s = zero_flow_state(g);
  s.p_sw = {0.2, 0.3, 0.4};
  s.q_sw = {0.1, 0.1, 0.1};
  EXPECT_EQ(objective(g, s), 0.0);
}

TEST(Objective, OrientationInvariant) {
  auto g = t5();
  auto s = zero_flow_state(g);
  s.p_line = {0.3, -0.2, 0.1};
  s.q_line = {0.05, 0.02, -0.07};
  const double before = objective(g, s);
  std::swap(g.lines[1].from, g.lines[1].to);
  s.p_line[1] = -s.p_line[1];
  s.q_line[1] = -s.q_line[1];
  EXPECT_EQ(objective(g, s), before);
}

TEST(BalanceResiduals, IsolatedNodeWithLoad) {
  const auto g = t5();
  const auto sc = nominal_scenario(g);
  const auto s = zero_flow_state(g);
  const auto r = balance_residuals(g, sc, s);
  EXPECT_DOUBLE_EQ(r.p[4], -0.08);
  EXPECT_DOUBLE_EQ(r.q[4], -0.03);
}

TEST(BalanceResiduals, T5LeafServedBySwitch) {
  const auto g = t5();
  const auto sc = nominal_scenario(g);
  auto s = zero_flow_state(g);
  s.y = {0, 1, 0};
  s.p_sw = {0, 0.08, 0};
  EXPECT_EQ(balance_residuals(g, sc, s).p[4], 0.0);
}

TEST(RecoverReactiveFlows, Examples) {
  const auto g = single_line(0.1, 0.1);
  const std::vector<double> v{1.0, 0.96}, p{0.1}, none{};
  EXPECT_NEAR(recover_reactive_flows(g, v, p, none).q_line[0], 0.1, 1e-15);

  const std::vector<double> flat{1.0, 1.0}, zero{0.0};
  EXPECT_EQ(recover_reactive_flows(g, flat, zero, none).q_line[0], 0.0);

  const auto g0 = single_line(0.0, 0.2);
  const double c = 0.07;
  const std::vector<double> v2{1.0, 1.0 - 2 * 0.2 * c}, any{0.3};
  EXPECT_NEAR(recover_reactive_flows(g0, v2, any, none).q_line[0], c, 1e-15);
}

TEST(ApplySwitchGating, Examples) {
  const std::vector<double> mid{0.5}, top{1.0}, q{0.2}, on{1.0}, off{0.0};
  EXPECT_EQ(apply_switch_gating(mid, q, on, 0.5).p_sw[0], 0.0);
  EXPECT_DOUBLE_EQ(apply_switch_gating(top, q, on, 0.5).p_sw[0], 0.5);
  const auto gated = apply_switch_gating(top, q, off, 0.5);
  EXPECT_EQ(gated.p_sw[0], 0.0);
  EXPECT_EQ(gated.q_sw[0], 0.0);
}

TEST(RecoverGeneration, ZeroLoadsZeroFlows) {
  auto g = t5();
  auto sc = nominal_scenario(g);
  std::fill(sc.p_load.begin(), sc.p_load.end(), 0.0);
  std::fill(sc.q_load.begin(), sc.q_load.end(), 0.0);
  const auto s = zero_flow_state(g);
  const auto gen = recover_generation(g, sc, s.p_line, s.q_line, s.p_sw, s.q_sw);
  for (double x : gen.p_gen) EXPECT_EQ(x, 0.0);
  for (double x : gen.q_gen) EXPECT_EQ(x, 0.0);
}

TEST(RecoverGeneration, T5SlackSuppliesLoadMinusPv) {
  // Topology {close (3,4)}: tree 0-1-2, 0-3-4; PV at node 2 runs at its 0.08 cap.
  const auto g = t5();
  const auto sc = nominal_scenario(g);
  const std::vector<double> p_line{0.10 + 0.10 - 0.08, 0.10 - 0.08, 0.06 + 0.08};
  const std::vector<double> q_line{0.1, 0.05, 0.05};
  const std::vector<double> p_sw{0, 0.08, 0}, q_sw{0, 0.03, 0};
  const auto gen = recover_generation(g, sc, p_line, q_line, p_sw, q_sw);
  const double total = 0.10 + 0.10 + 0.06 + 0.08;
  EXPECT_NEAR(gen.p_gen[0], total - 0.08, 1e-15);
  EXPECT_NEAR(gen.p_gen[2], 0.08, 1e-15);
  EXPECT_NEAR(gen.p_gen[4], 0.0, 1e-15);
  EXPECT_NEAR(gen.p_gen[1], 0.0, 1e-15);
}

TEST(InequalityVector, LayoutAndExamples) {
  const auto g = t5();
  const auto sc = nominal_scenario(g);
  auto s = zero_flow_state(g);
  s.y = {0, 1, 0};
  auto h = inequality_vector(g, sc, s);
  ASSERT_EQ(h.size(), 25u);
  for (double x : h.entries) EXPECT_EQ(x, 0.0);

  s.p_gen[3] = 0.03; // non-generator node
  h = inequality_vector(g, sc, s);
  EXPECT_DOUBLE_EQ(h.entries[4 * 3 + 1], 0.03);

  s = zero_flow_state(g);
  s.y = {1, 0, 0};
  h = inequality_vector(g, sc, s);
  EXPECT_EQ(h.entries[20 + 4], 1.0);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(h.entries[20 + j], 0.0);
}

TEST(OhmResiduals, Examples) {
  const auto g = single_line(0.1, 0.1);
  auto s = zero_flow_state(g);
  s.v = {1.0, 0.96};
  s.p_line = {0.1};
  s.q_line = {0.1};
  EXPECT_NEAR(ohm_residuals(g, s).line[0], 0.0, 1e-15);

  const auto t = t5();
  auto open = zero_flow_state(t);
  open.v = {1.0, 0.95, 0.97, 0.99, 1.04};
  EXPECT_EQ(ohm_residuals(t, open).sw[0], 0.0);
}

TEST(CertifiedChain, RandomInputsSatisfyEqualities) {
  const auto g = t5();
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    auto sc = nominal_scenario(g);
    for (auto& p : sc.p_load) p *= uniform(rng, 0.5, 1.5);
    std::vector<double> v(g.num_nodes()), pl(g.num_lines()), ps(g.num_switches()), y(g.num_switches(), 0.0);
    for (auto& x : v) x = uniform(rng, g.v_min, g.v_max);
    v[g.slack_node] = 1.0;
    for (auto& x : pl) x = uniform01(rng);
    for (auto& x : ps) x = uniform01(rng);
    y[uniform_index(rng, y.size())] = 1.0;
    const auto s = recover_flow_state(g, sc, v, pl, ps, y);
    EXPECT_LT(max_equality_residual(g, sc, s), 1e-12);
    for (std::size_t k = 0; k < y.size(); ++k) {
      if (y[k] == 0.0) {
        EXPECT_EQ(s.p_sw[k], 0.0);
        EXPECT_EQ(s.q_sw[k], 0.0);
      }
    }
    const auto h = inequality_vector(g, sc, s);
    EXPECT_EQ(h.size(), 5 * g.num_nodes());
    for (double x : h.entries) EXPECT_GE(x, 0.0);
  }
}

TEST(FlowStateCsv, RoundTrip) {
  const auto g = t5();
  auto s = zero_flow_state(g);
  s.v = {1.0, 0.97, 0.95, 0.99, 0.98};
  s.p_line = {0.1, 1.0 / 3.0, -0.2};
  s.p_gen = {0.2, 0, 0.08, 0, 0};
  const auto back = parse_flow_state_csv(format_flow_state_csv(s));
  EXPECT_EQ(back.v, s.v);
  EXPECT_EQ(back.p_line, s.p_line);
  EXPECT_EQ(back.p_gen, s.p_gen);
  EXPECT_EQ(back.y, s.y);
  EXPECT_THROW(parse_flow_state_csv("nope\n"), ParseError);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "graphyr/model.hpp"
#include "graphyr/oracle.hpp"

using namespace graphyr;

namespace {

const std::string kData = GRAPHYR_DATA_DIR;

GridSpec t5() { return load_grid(kData + "/t5.grid"); }
GridSpec bw33() { return load_grid(kData + "/bw33.grid"); }

ModelParams small_model(std::uint64_t seed = 1, RoundingMode r = RoundingMode::phyr) {
  ModelConfig c;
  c.seed = seed;
  c.rounding = r;
  return init_params(c);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

} // namespace

TEST(Params, CountDependsOnlyOnWidths) {
  auto m = small_model();
  EXPECT_EQ(m.parameter_count(), 2999u);
  ModelConfig wide;
  wide.hidden = 16;
  EXPECT_GT(init_params(wide).parameter_count(), 2999u);
  // The same parameters drive T5 and BW33.
  const auto g1 = t5();
  const auto g2 = bw33();
  EXPECT_NO_THROW(forward(m, g1, nominal_scenario(g1)));
  EXPECT_NO_THROW(forward(m, g2, nominal_scenario(g2)));
  EXPECT_EQ(m.parameter_count(), 2999u);
}

TEST(Params, ConfigValidation) {
  ModelConfig c;
  c.hidden = 1;
  EXPECT_THROW(init_params(c), ValidationError);
  c = {};
  c.dropout = 1.0;
  EXPECT_THROW(init_params(c), ValidationError);
  EXPECT_THROW(parse_rounding_mode("topk"), ValidationError);
  EXPECT_EQ(parse_loss_mode("semi"), LossMode::semi);
}

TEST(Gate, Values) {
  const std::vector<double> z{0.3, -0.3};
  EXPECT_EQ(gate(z, false), 1.0);
  EXPECT_DOUBLE_EQ(gate(z, true), 0.5);
  const std::vector<double> big{40.0, 40.0};
  EXPECT_NEAR(gate(big, true), 1.0, 1e-15);
}

TEST(Phyr, SpecExamples) {
  const std::vector<double> y_hat{0.9, 0.2, 0.8, 0.4};
  EXPECT_EQ(phyr_select(y_hat, 2), (std::vector<double>{1, 0, 1, 0}));
  EXPECT_EQ(phyr_select(y_hat, 2, {}, PhyrMode::train), (std::vector<double>{1, 0, 0.8, 0}));
  ForcedSwitches f(4, SwitchClamp::free);
  f[0] = SwitchClamp::open;
  EXPECT_EQ(phyr_select(y_hat, 2, f), (std::vector<double>{0, 0, 1, 1}));
}

TEST(Phyr, TiesGoToLowestIndex) {
  const std::vector<double> y_hat{0.5, 0.5, 0.5};
  EXPECT_EQ(phyr_select(y_hat, 1), (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(phyr_select(y_hat, 2), (std::vector<double>{1, 1, 0}));
}

TEST(Phyr, ForcedClosedCountsTowardBudget) {
  const std::vector<double> y_hat{0.9, 0.2, 0.8, 0.4};
  ForcedSwitches f(4, SwitchClamp::free);
  f[1] = SwitchClamp::closed;
  EXPECT_EQ(phyr_select(y_hat, 2, f), (std::vector<double>{1, 1, 0, 0}));
  f[3] = SwitchClamp::closed;
  EXPECT_EQ(phyr_select(y_hat, 2, f), (std::vector<double>{0, 1, 0, 1}));
  f[2] = SwitchClamp::closed;
  EXPECT_THROW(phyr_select(y_hat, 2, f), ValidationError);
  ForcedSwitches all_open(4, SwitchClamp::open);
  EXPECT_THROW(phyr_select(y_hat, 1, all_open), ValidationError);
}

TEST(Phyr, ZeroBudgetOpensEverything) {
  const std::vector<double> y_hat{0.9, 0.7};
  EXPECT_EQ(phyr_select(y_hat, 0), (std::vector<double>{0, 0}));
  EXPECT_EQ(phyr_select(y_hat, 0, {}, PhyrMode::train), (std::vector<double>{0, 0}));
}

TEST(Insi, ActivationAtZero) {
  EXPECT_DOUBLE_EQ(insi_activation(0.0, 5.0, 0.1), 1.0);
  const auto g = t5();
  ModelConfig c;
  c.rounding = RoundingMode::insi;
  const std::vector<double> scores{0.49, 0.5, 0.51};
  EXPECT_EQ(select_topology(g, scores, c, {}), (std::vector<double>{0, 1, 1}));
}

TEST(Forward, T5ProducesCertifiedRadialState) {
  const auto g = t5();
  auto m = small_model(7);
  const auto ds = generate_scenarios(g, 16, 2, 0.1, 0.25);
  const auto states = forward_batch(m, g, ds.scenarios);
  ASSERT_EQ(states.size(), 16u);
  for (std::size_t s = 0; s < states.size(); ++s) {
    const auto& st = states[s];
    EXPECT_EQ(std::count(st.y.begin(), st.y.end(), 1.0), 1);
    EXPECT_LT(max_equality_residual(g, ds.scenarios[s], st), 1e-12);
    EXPECT_EQ(st.v[g.slack_node], 1.0);
    for (double v : st.v) {
      EXPECT_GE(v, g.v_min);
      EXPECT_LE(v, g.v_max);
    }
  }
}

TEST(Forward, BatchMatchesSingleScenario) {
  const auto g = bw33();
  auto m = small_model(3);
  const auto ds = generate_scenarios(g, 5, 4, 0.1, 0.25);
  const auto batch = forward_batch(m, g, ds.scenarios);
  for (std::size_t s = 0; s < 5; ++s) {
    const auto one = forward(m, g, ds.scenarios[s]);
    EXPECT_LT(max_abs_diff(one.v, batch[s].v), 1e-12);
    EXPECT_LT(max_abs_diff(one.p_gen, batch[s].p_gen), 1e-12);
    EXPECT_EQ(one.y, batch[s].y);
  }
}

TEST(Forward, ForcedClampsRespected) {
  const auto g = t5();
  auto m = small_model(5);
  const auto sc = nominal_scenario(g);
  for (std::size_t k = 0; k < g.num_switches(); ++k) {
    ForcedSwitches open = no_forcing(g);
    open[k] = SwitchClamp::open;
    EXPECT_EQ(forward(m, g, sc, open).y[k], 0.0);
    ForcedSwitches closed = no_forcing(g);
    closed[k] = SwitchClamp::closed;
    const auto st = forward(m, g, sc, closed);
    std::vector<double> expect(g.num_switches(), 0.0);
    expect[k] = 1.0;
    EXPECT_EQ(st.y, expect);
  }
}

TEST(Forward, TapeMatchesDoublePathInEval) {
  const auto g = t5();
  auto m = small_model(9);
  const auto ds = generate_scenarios(g, 6, 8, 0.1, 0.25);
  Tape tape;
  TapeFlow flow;
  Var loss = batch_loss(tape, m, g, ds.scenarios, {}, {}, {nn::Mode::eval, PhyrMode::eval}, nullptr, &flow);
  const auto states = forward_batch(m, g, ds.scenarios);
  double expect = 0.0;
  for (std::size_t s = 0; s < states.size(); ++s) {
    const auto st = extract_flow_state(flow, g, s);
    EXPECT_LT(max_abs_diff(st.p_gen, states[s].p_gen), 1e-12);
    EXPECT_LT(max_abs_diff(st.q_sw, states[s].q_sw), 1e-12);
    EXPECT_EQ(st.y, states[s].y);
    expect += loss_unsupervised(g, ds.scenarios[s], states[s], m.config.lambda);
  }
  EXPECT_NEAR(loss.value().data[0], expect / 6.0, 1e-10);
}

TEST(Forward, CommitteeOfClonesEqualsMember) {
  const auto g = t5();
  auto m = small_model(2);
  std::vector<ModelParams> committee{m, m, m};
  const auto ds = generate_scenarios(g, 4, 1, 0.1, 0.25);
  const auto a = forward_batch(m, g, ds.scenarios);
  const auto b = committee_forward(committee, g, ds.scenarios);
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_LT(max_abs_diff(a[s].v, b[s].v), 1e-12);
    EXPECT_EQ(a[s].y, b[s].y);
  }
}

TEST(Forward, EquivariantUnderRelabeling) {
  const auto g = bw33();
  auto m = small_model(4);
  const auto sc = generate_scenarios(g, 1, 5, 0.1, 0.25).scenarios.front();
  const auto base = forward(m, g, sc);
  std::vector<NodeId> perm(g.num_nodes());
  std::iota(perm.begin(), perm.end(), NodeId{0});
  Rng rng(12);
  shuffle(perm, rng);
  const auto g2 = relabel_nodes(g, perm);
  const auto moved = forward(m, g2, relabel_scenario(sc, perm));
  EXPECT_EQ(moved.y, base.y);
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    EXPECT_NEAR(moved.v[perm[i]], base.v[i], 1e-9);
    EXPECT_NEAR(moved.p_gen[perm[i]], base.p_gen[i], 1e-9);
  }
  EXPECT_LT(max_abs_diff(moved.p_line, base.p_line), 1e-9);
}

TEST(Losses, HandValues) {
  const auto g = t5();
  const auto sc = nominal_scenario(g);
  const auto sol = solve_dyr(g, sc);
  const auto& s = sol.flow_state_star;
  EXPECT_NEAR(loss_unsupervised(g, sc, s, 100.0), sol.objective_star, 1e-12);
  const std::vector<double> other{0, 0, 1};
  EXPECT_NEAR(loss_semi_supervised(g, sc, s, 100.0, other, 1.0), sol.objective_star + std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(loss_supervised(g, sc, s, targets_from(sol), 100.0), 0.0, 1e-12);
  auto bad = zero_flow_state(g); // nothing served: slack and connectivity violations
  EXPECT_GT(loss_unsupervised(g, sc, bad, 100.0), 1.0);
  EXPECT_THROW(loss_semi_supervised(g, sc, s, 100.0, std::vector<double>{1}, 1.0), ValidationError);
}

TEST(Losses, TapeLossModesAgreeWithDoubles) {
  const auto g = t5();
  const auto ds = generate_scenarios(g, 4, 6, 0.1, 0.25);
  std::vector<Targets> targets;
  for (const auto& sc : ds.scenarios) targets.push_back(targets_from(solve_dyr(g, sc)));
  for (LossMode mode : {LossMode::semi, LossMode::supervised}) {
    ModelConfig c;
    c.seed = 3;
    c.loss = mode;
    auto m = init_params(c);
    Tape tape;
    Var loss = batch_loss(tape, m, g, ds.scenarios, targets, {}, {nn::Mode::eval, PhyrMode::eval}, nullptr);
    const auto states = forward_batch(m, g, ds.scenarios);
    double expect = 0.0;
    for (std::size_t s = 0; s < 4; ++s) {
      expect += mode == LossMode::semi
                    ? loss_semi_supervised(g, ds.scenarios[s], states[s], c.lambda, targets[s].y, c.semi_weight)
                    : loss_supervised(g, ds.scenarios[s], states[s], targets[s], c.lambda);
    }
    EXPECT_NEAR(loss.value().data[0], expect / 4.0, 1e-9 * std::max(1.0, expect)) << to_string(mode);
    Tape t2;
    EXPECT_THROW(batch_loss(t2, m, g, ds.scenarios, {}, {}, {}, nullptr), ValidationError);
  }
}

TEST(Gradients, TrainLossMatchesFiniteDifferences) {
  const auto g = t5();
  const auto ds = generate_scenarios(g, 8, 13, 0.1, 0.25);
  auto m = small_model(21);
  const auto r = graphyr::testing::check_params(
      [&](Tape& t) {
        Rng drop(5);
        return batch_loss(t, m, g, ds.scenarios, {}, {}, {nn::Mode::train, PhyrMode::train}, &drop);
      },
      m.parameters(), 1e-4, 3);
  EXPECT_GT(r.checked, 500u);
  EXPECT_LT(r.rel_error, 1e-5);
}

TEST(Checkpoint, RoundTripReproducesPredictions) {
  const auto g = t5();
  ModelConfig c;
  c.seed = 77;
  c.rounding = RoundingMode::insi;
  c.lambda = 12.5;
  auto m = init_params(c);
  m.l_pred.bn.running_mean.data[3] = 0.125;
  const auto grids = std::vector<GridSpec>{g};
  const auto text = format_checkpoint(m, grids);
  auto back = parse_checkpoint(text);
  EXPECT_EQ(back.config.rounding, RoundingMode::insi);
  EXPECT_EQ(back.config.lambda, 12.5);
  EXPECT_EQ(format_checkpoint(back, grids), text);
  const auto ds = generate_scenarios(g, 3, 1, 0.1, 0.25);
  const auto a = forward_batch(m, g, ds.scenarios);
  const auto b = forward_batch(back, g, ds.scenarios);
  for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(a[s].p_gen, b[s].p_gen);
  EXPECT_NO_THROW(require_trained_on(back, g));
  try {
    require_trained_on(back, bw33());
    FAIL() << "expected a signature mismatch";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("signature mismatch"), std::string::npos);
  }
  EXPECT_THROW(parse_checkpoint("graphyr-checkpoint 9\n"), ParseError);
  EXPECT_THROW(parse_checkpoint(text.substr(0, text.size() / 2)), ParseError);
}

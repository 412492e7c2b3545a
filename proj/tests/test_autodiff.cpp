#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "graphyr/autodiff.hpp"

using namespace graphyr;
using namespace graphyr::ad;
using graphyr::testing::check_inputs;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(r, c);
  for (auto& x : t.data) x = uniform(rng, lo, hi);
  return t;
}

/// Weighted sum so that every output entry has a distinct sensitivity.
Var probe(Tape& tape, Var out) {
  Tensor w(out.rows(), out.cols());
  for (std::size_t i = 0; i < w.size(); ++i) w.data[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return sum(mul(out, tape.constant(w)));
}

constexpr double kTol = 1e-5;

} // namespace

TEST(Tape, ForwardValues) {
  Tape t;
  Var a = t.constant(Tensor::column({1, 2}));
  Var b = t.constant(Tensor::column({3, 4}));
  EXPECT_EQ((a + b).value().data, (std::vector<double>{4, 6}));
  EXPECT_EQ((a - b).value().data, (std::vector<double>{-2, -2}));
  EXPECT_EQ((a * b).value().data, (std::vector<double>{3, 8}));
  Tensor m(2, 2);
  m.data = {1, 2, 3, 4};
  Var mm = matmul(t.constant(m), t.constant(m));
  EXPECT_EQ(mm.value().data, (std::vector<double>{7, 10, 15, 22}));
  EXPECT_EQ(sum(a).value().data[0], 3.0);
}

TEST(Tape, ShapeMismatchThrows) {
  Tape t;
  Var a = t.constant(Tensor(2, 3));
  Var b = t.constant(Tensor(2, 2));
  EXPECT_THROW(matmul(a, b), std::invalid_argument);
  EXPECT_THROW(add(a, b), std::invalid_argument);
  EXPECT_THROW(t.backward(a), std::invalid_argument);
}

TEST(Tape, ParameterGradientsAccumulate) {
  Parameter p("p", Tensor::column({2.0, -1.0}));
  for (int pass = 0; pass < 2; ++pass) {
    Tape t;
    Var x = t.param(p);
    EXPECT_EQ(t.param(p).id(), x.id());
    t.backward(sum(square(x)));
  }
  EXPECT_EQ(p.grad.data, (std::vector<double>{8.0, -4.0}));
  p.zero_grad();
  EXPECT_EQ(p.grad.data, (std::vector<double>{0.0, 0.0}));
}

TEST(Tape, SharedSubexpressionSumsPaths) {
  Tape t;
  Var x = t.input(Tensor::column({3.0}));
  Var y = x * x + x; // dy/dx = 2x + 1
  t.backward(sum(y));
  EXPECT_EQ(x.grad().data[0], 7.0);
}

TEST(Tape, ConstantsCarryNoGradient) {
  Tape t;
  Var c = t.constant(Tensor::column({1.0}));
  Var x = t.input(Tensor::column({2.0}));
  t.backward(sum(c * x));
  EXPECT_FALSE(t.needs_grad(c.id()));
  EXPECT_EQ(x.grad().data[0], 1.0);
}

TEST(Nonlinear, SqrtZeroHasZeroGradient) {
  Tape t;
  Var x = t.input(Tensor::column({0.0, 4.0}));
  t.backward(sum(ad::sqrt(x)));
  EXPECT_EQ(x.grad().data[0], 0.0);
  EXPECT_EQ(x.grad().data[1], 0.25);
}

TEST(Nonlinear, ReluAndClampSubgradients) {
  Tape t;
  Var x = t.input(Tensor::column({-1.0, 0.0, 0.5, 2.0}));
  t.backward(sum(relu(x)) + sum(clamp(x, 0.0, 1.0)));
  EXPECT_EQ(x.grad().data, (std::vector<double>{0.0, 1.0, 2.0, 1.0}));
}

TEST(Nonlinear, InsiValues) {
  EXPECT_DOUBLE_EQ(insi_value(0.0, 5.0, 0.1), 1.0);
  EXPECT_EQ(insi_value(-10.0, 5.0, 0.1), 0.0);
  EXPECT_NEAR(insi_value(50.0, 5.0, 0.1), 2.0 * 1.1 / 0.1 - 1.0, 1e-9);
  EXPECT_NEAR(sigmoid_value(0.0), 0.5, 0.0);
  EXPECT_GT(sigmoid_value(-800.0), -1e-300);
  EXPECT_TRUE(std::isfinite(sigmoid_value(-800.0)));
}

TEST(Nonlinear, BranchSignatureTracksSides) {
  Tape a, b, c;
  relu(a.constant(Tensor::column({0.5, -0.5})));
  relu(b.constant(Tensor::column({0.6, -0.4})));
  relu(c.constant(Tensor::column({-0.1, -0.5})));
  EXPECT_EQ(a.branch_signature(), b.branch_signature());
  EXPECT_NE(a.branch_signature(), c.branch_signature());
}

TEST(GradCheck, ElementwiseAndAlgebraOps) {
  Rng rng(3);
  const auto a = random_tensor(3, 4, rng), b = random_tensor(3, 4, rng), m = random_tensor(4, 2, rng);
  const auto row = random_tensor(1, 4, rng), col = random_tensor(3, 1, rng);
  const auto pos = random_tensor(3, 4, rng, 0.2, 2.0);
  struct Case {
    const char* name;
    graphyr::testing::InputFn fn;
    std::vector<Tensor> inputs;
  };
  std::vector<Case> cases = {
      {"add", [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] + v[1]); }, {a, b}},
      {"sub", [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] - v[1]); }, {a, b}},
      {"mul", [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] * v[1]); }, {a, b}},
      {"matmul", [](Tape& t, const std::vector<Var>& v) { return probe(t, matmul(v[0], v[1])); }, {a, m}},
      {"add_row", [](Tape& t, const std::vector<Var>& v) { return probe(t, add_row(v[0], v[1])); }, {a, row}},
      {"mul_col", [](Tape& t, const std::vector<Var>& v) { return probe(t, mul_col(v[0], v[1])); }, {a, col}},
      {"affine",
       [&](Tape& t, const std::vector<Var>& v) { return probe(t, affine(v[0], b, pos)); },
       {a}},
      {"gather", [](Tape& t, const std::vector<Var>& v) { return probe(t, gather_rows(v[0], {2, 0, 2, 1})); }, {a}},
      {"scatter",
       [](Tape& t, const std::vector<Var>& v) { return probe(t, scatter_add_rows(v[0], {1, 1, 0}, 2)); },
       {a}},
      {"concat",
       [](Tape& t, const std::vector<Var>& v) { return probe(t, concat_cols({v[0], v[1], v[0]})); },
       {a, col}},
      {"slice", [](Tape& t, const std::vector<Var>& v) { return probe(t, slice_cols(v[0], 1, 2)); }, {a}},
      {"sum_cols", [](Tape& t, const std::vector<Var>& v) { return probe(t, sum_cols(v[0])); }, {a}},
      {"mean_cols", [](Tape& t, const std::vector<Var>& v) { return probe(t, mean_cols(v[0])); }, {a}},
      {"mean", [](Tape&, const std::vector<Var>& v) { return mean(square(v[0])); }, {a}},
      {"relu", [](Tape& t, const std::vector<Var>& v) { return probe(t, relu(v[0])); }, {a}},
      {"sigmoid", [](Tape& t, const std::vector<Var>& v) { return probe(t, sigmoid(v[0])); }, {a}},
      {"square", [](Tape& t, const std::vector<Var>& v) { return probe(t, square(v[0])); }, {a}},
      {"sqrt", [](Tape& t, const std::vector<Var>& v) { return probe(t, ad::sqrt(v[0])); }, {pos}},
      {"clamp", [](Tape& t, const std::vector<Var>& v) { return probe(t, clamp(v[0], -0.5, 0.5)); }, {a}},
      {"insi", [](Tape& t, const std::vector<Var>& v) { return probe(t, insi(v[0], 5.0, 0.1)); }, {a}},
  };
  for (auto& c : cases) {
    const auto r = check_inputs(c.fn, c.inputs);
    EXPECT_GT(r.checked, 0u) << c.name;
    EXPECT_LT(r.rel_error, kTol) << c.name;
  }
}

TEST(GradCheck, BatchNormTrainAndEval) {
  Rng rng(5);
  const auto x = random_tensor(6, 3, rng), gamma = random_tensor(1, 3, rng, 0.5, 1.5), beta = random_tensor(1, 3, rng);
  for (bool train : {true, false}) {
    BatchNormStats st;
    st.running_mean = Tensor(1, 3, 0.1);
    st.running_var = Tensor(1, 3, 0.8);
    const auto r = check_inputs(
        [&](Tape& t, const std::vector<Var>& v) {
          BatchNormStats local = st;
          return probe(t, square(batch_norm(v[0], v[1], v[2], local, train)));
        },
        {x, gamma, beta});
    EXPECT_LT(r.rel_error, kTol) << (train ? "train" : "eval");
  }
}

TEST(BatchNorm, TrainNormalizesAndUpdatesRunningStats) {
  Tape t;
  Tensor x(4, 1);
  x.data = {1, 2, 3, 4};
  BatchNormStats st;
  st.running_mean = Tensor(1, 1, 0.0);
  st.running_var = Tensor(1, 1, 1.0);
  Var y = batch_norm(t.constant(x), t.constant(Tensor(1, 1, 1.0)), t.constant(Tensor(1, 1, 0.0)), st, true);
  double mean = 0.0;
  for (double v : y.value().data) mean += v;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(st.running_mean.data[0], 0.25, 1e-15);
  EXPECT_NEAR(st.running_var.data[0], 0.9 + 0.1 * 1.25, 1e-15); // biased variance 1.25
  Var e = batch_norm(t.constant(x), t.constant(Tensor(1, 1, 1.0)), t.constant(Tensor(1, 1, 0.0)), st, false);
  EXPECT_NEAR(e.value().data[0], (1.0 - 0.25) / std::sqrt(st.running_var.data[0] + st.eps), 1e-12);
}

TEST(Dropout, InvertedScalingKeepsExpectation) {
  Rng rng(1);
  Tape t;
  Var x = t.constant(Tensor(20000, 1, 1.0));
  Var y = dropout(x, 0.1, rng);
  double total = 0.0;
  std::size_t zeros = 0;
  for (double v : y.value().data) {
    total += v;
    zeros += v == 0.0;
  }
  EXPECT_NEAR(total / 20000.0, 1.0, 0.02);
  EXPECT_NEAR(static_cast<double>(zeros) / 20000.0, 0.1, 0.01);
  EXPECT_EQ(dropout(x, 0.0, rng).id(), x.id());
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "graphyr/autodiff.hpp"
#include "graphyr/errors.hpp"
#include "graphyr/grid.hpp"
#include "graphyr/lindistflow.hpp"
#include "graphyr/nn.hpp"
#include "graphyr/oracle.hpp"
#include "graphyr/random.hpp"

namespace graphyr {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

enum class RoundingMode { phyr, insi };
enum class LossMode { unsupervised, semi, supervised };

inline std::string to_string(RoundingMode m) { return m == RoundingMode::phyr ? "phyr" : "insi"; }
inline std::string to_string(LossMode m) {
  switch (m) {
  case LossMode::unsupervised: return "unsupervised";
  case LossMode::semi: return "semi";
  case LossMode::supervised: return "supervised";
  }
  return "?";
}

inline RoundingMode parse_rounding_mode(const std::string& s) {
  if (s == "phyr") return RoundingMode::phyr;
  if (s == "insi") return RoundingMode::insi;
  throw ValidationError("unknown rounding mode '" + s + "' (expected phyr or insi)");
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "unsupervised") return LossMode::unsupervised;
  if (s == "semi") return LossMode::semi;
  if (s == "supervised") return LossMode::supervised;
  throw ValidationError("unknown loss mode '" + s + "' (expected unsupervised, semi or supervised)");
}

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t hidden = 8;
  std::size_t l_hidden = 24;
  std::size_t s_hidden = 32;
  double dropout = 0.1;
  double lambda = 100.0;
  double semi_weight = 1.0;
  double insi_tau = 5.0;
  double insi_mu = 0.1;
  RoundingMode rounding = RoundingMode::phyr;
  LossMode loss = LossMode::unsupervised;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers < 1) throw ValidationError("layers must be at least 1");
    if (hidden < 2) throw ValidationError("hidden width must be at least 2 (loads occupy two channels)");
    if (l_hidden < 1 || s_hidden < 1) throw ValidationError("predictor widths must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
    if (!(lambda >= 0.0)) throw ValidationError("lambda must be nonnegative");
    if (!(semi_weight >= 0.0)) throw ValidationError("semi_weight must be nonnegative");
    if (!(insi_tau > 0.0) || !(insi_mu > 0.0)) throw ValidationError("insi_tau and insi_mu must be positive");
  }
};

struct MessageLayer {
  Parameter w1; // node self
  Parameter w2; // neighbor message
  Parameter w3; // switch from endpoint sum
  Parameter w4; // switch self
};

struct ModelParams {
  ModelConfig config;
  std::vector<MessageLayer> layers;
  nn::MlpBlock l_pred; // [x_i, x_j, x_G] -> [p, v_i, v_j]
  nn::MlpBlock s_pred; // [x_i, x_j, z_ij, x_G] -> [p, v_i, v_j, y]
  std::vector<std::uint64_t> grid_signatures;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers) {
      for (auto* p : {&l.w1, &l.w2, &l.w3, &l.w4}) out.push_back(p);
    }
    for (auto* p : l_pred.parameters()) out.push_back(p);
    for (auto* p : s_pred.parameters()) out.push_back(p);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }
};

inline ModelParams init_params(const ModelConfig& config) {
  config.validate();
  ModelParams m;
  m.config = config;
  Rng rng(mix_seed(config.seed, 0x9a9e));
  const std::size_t h = config.hidden;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "mp" + std::to_string(l);
    MessageLayer layer;
    layer.w1 = Parameter(p + ".w1", nn::he_uniform(h, h, rng));
    layer.w2 = Parameter(p + ".w2", nn::he_uniform(h, h, rng));
    layer.w3 = Parameter(p + ".w3", nn::he_uniform(h, h, rng));
    layer.w4 = Parameter(p + ".w4", nn::he_uniform(h, h, rng));
    m.layers.push_back(std::move(layer));
  }
  m.l_pred = nn::MlpBlock("lpred", 3 * h, config.l_hidden, 3, config.dropout, rng);
  m.s_pred = nn::MlpBlock("spred", 4 * h, config.s_hidden, 4, config.dropout, rng);
  return m;
}

/// Random initial switch embeddings; row k depends only on (model seed, k).
inline Tensor switch_seed_embeddings(const ModelConfig& config, std::size_t num_switches) {
  Tensor z(num_switches, config.hidden);
  for (std::size_t k = 0; k < num_switches; ++k) {
    Rng rng(mix_seed(mix_seed(config.seed, 0x2e7c), k));
    for (std::size_t c = 0; c < config.hidden; ++c) z(k, c) = uniform(rng, -1.0, 1.0);
  }
  return z;
}

/// Gate applied to messages across an edge: 1 on lines, sigmoid(mean z) on switches.
inline double gate(std::span<const double> z, bool is_switch) {
  if (!is_switch) return 1.0;
  double m = 0.0;
  for (double x : z) m += x;
  return ad::sigmoid_value(z.empty() ? 0.0 : m / static_cast<double>(z.size()));
}

// ---------------------------------------------------------------------------
// Batch structure: B scenarios of one grid stacked row-wise.

namespace detail {

inline void check_forced(const GridSpec& grid, const ForcedSwitches& forced) {
  if (!forced.empty() && forced.size() != grid.num_switches()) {
    throw ValidationError("forced clamp vector has wrong length");
  }
}

inline SwitchClamp clamp_of(const ForcedSwitches& forced, std::size_t k) {
  return forced.empty() ? SwitchClamp::free : forced[k];
}

struct BatchGraph {
  std::size_t batch = 0;
  std::size_t n = 0, m = 0, msw = 0;
  std::vector<std::size_t> line_from, line_to, line_scn; // per line row
  std::vector<std::size_t> sw_from, sw_to, sw_scn;       // per switch row
  std::vector<std::size_t> node_scn;
  std::vector<std::size_t> line_msg_src, line_msg_dst;             // both directions
  std::vector<std::size_t> sw_msg_src, sw_msg_dst, sw_msg_edge;    // active switches, both directions
  std::vector<std::size_t> active_sw_rows;                         // switch rows not forced open
  std::vector<std::size_t> active_sw_from, active_sw_to;
  std::vector<double> instance_count; // voltage instances per node (N)

  BatchGraph(const GridSpec& grid, std::size_t b, const ForcedSwitches& forced)
      : batch(b), n(grid.num_nodes()), m(grid.num_lines()), msw(grid.num_switches()) {
    instance_count.assign(n, 0.0);
    for (const auto& e : grid.lines) {
      instance_count[e.from] += 1.0;
      instance_count[e.to] += 1.0;
    }
    for (std::size_t k = 0; k < msw; ++k) {
      if (clamp_of(forced, k) == SwitchClamp::open) continue;
      instance_count[grid.switches[k].from] += 1.0;
      instance_count[grid.switches[k].to] += 1.0;
    }
    for (std::size_t s = 0; s < b; ++s) {
      const std::size_t off = s * n;
      for (std::size_t i = 0; i < n; ++i) node_scn.push_back(s);
      for (const auto& e : grid.lines) {
        line_from.push_back(off + e.from);
        line_to.push_back(off + e.to);
        line_scn.push_back(s);
        line_msg_src.insert(line_msg_src.end(), {off + e.from, off + e.to});
        line_msg_dst.insert(line_msg_dst.end(), {off + e.to, off + e.from});
      }
      for (std::size_t k = 0; k < msw; ++k) {
        const auto& e = grid.switches[k];
        const std::size_t row = s * msw + k;
        sw_from.push_back(off + e.from);
        sw_to.push_back(off + e.to);
        sw_scn.push_back(s);
        if (clamp_of(forced, k) == SwitchClamp::open) continue;
        active_sw_rows.push_back(row);
        active_sw_from.push_back(off + e.from);
        active_sw_to.push_back(off + e.to);
        sw_msg_src.insert(sw_msg_src.end(), {off + e.from, off + e.to});
        sw_msg_dst.insert(sw_msg_dst.end(), {off + e.to, off + e.from});
        sw_msg_edge.insert(sw_msg_edge.end(), {row, row});
      }
    }
  }
};

/// Column tensor of f(arc) repeated over the batch.
template <typename F>
Tensor arc_column(const std::vector<EdgeSpec>& arcs, std::size_t batch, F f) {
  Tensor t(arcs.size() * batch, 1);
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t k = 0; k < arcs.size(); ++k) t(s * arcs.size() + k, 0) = f(arcs[k]);
  return t;
}

/// Column of per-node scenario data stacked over the batch.
template <typename F>
Tensor node_column(std::span<const LoadScenario> scenarios, std::size_t n, F f) {
  Tensor t(scenarios.size() * n, 1);
  for (std::size_t s = 0; s < scenarios.size(); ++s)
    for (std::size_t i = 0; i < n; ++i) t(s * n + i, 0) = f(scenarios[s], i);
  return t;
}

inline Var zeros(Tape& tape, std::size_t rows, std::size_t cols) { return tape.constant(Tensor(rows, cols)); }

inline Var ones_like(Tape& tape, Var a) { return tape.constant(Tensor(a.rows(), a.cols(), 1.0)); }

} // namespace detail

// ---------------------------------------------------------------------------
// Embeddings and message passing

struct EmbeddingState {
  Var x;      // (B*N) x h
  Var z;      // (B*Msw) x h
  Var global; // B x h, set after the last layer
};

/// x0 = (p_load, q_load) zero-padded to h; z0 from the per-switch seeds.
inline EmbeddingState init_embeddings(Tape& tape, const GridSpec& grid, std::span<const LoadScenario> scenarios,
                                      const ModelParams& params) {
  const std::size_t n = grid.num_nodes(), h = params.config.hidden;
  Tensor x(scenarios.size() * n, h);
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    check_scenario(grid, scenarios[s]);
    for (std::size_t i = 0; i < n; ++i) {
      x(s * n + i, 0) = scenarios[s].p_load[i];
      x(s * n + i, 1) = scenarios[s].q_load[i];
    }
  }
  const Tensor seeds = switch_seed_embeddings(params.config, grid.num_switches());
  Tensor z(scenarios.size() * grid.num_switches(), h);
  for (std::size_t s = 0; s < scenarios.size(); ++s)
    for (std::size_t k = 0; k < grid.num_switches(); ++k)
      for (std::size_t c = 0; c < h; ++c) z(s * grid.num_switches() + k, c) = seeds(k, c);
  EmbeddingState st;
  st.x = tape.constant(std::move(x));
  st.z = tape.constant(std::move(z));
  return st;
}

/// Per-row switch gates, (B*Msw) x 1.
inline Var switch_gates(Var z) { return ad::sigmoid(ad::mean_cols(z)); }

inline EmbeddingState message_pass(Tape& tape, const EmbeddingState& in, ModelParams& params,
                                   const detail::BatchGraph& g, std::size_t layer) {
  auto& L = params.layers.at(layer);
  const std::size_t rows = in.x.rows(), h = in.x.cols();
  Var agg = detail::zeros(tape, rows, h);
  if (!g.line_msg_src.empty()) {
    agg = agg + ad::scatter_add_rows(ad::gather_rows(in.x, g.line_msg_src), g.line_msg_dst, rows);
  }
  if (!g.sw_msg_src.empty()) {
    Var gates = ad::gather_rows(switch_gates(in.z), g.sw_msg_edge);
    Var msg = ad::mul_col(ad::gather_rows(in.x, g.sw_msg_src), gates);
    agg = agg + ad::scatter_add_rows(msg, g.sw_msg_dst, rows);
  }
  Var x_update = ad::relu(ad::matmul(in.x, tape.param(L.w1)) + ad::matmul(agg, tape.param(L.w2)));
  EmbeddingState out;
  out.x = layer == 0 ? x_update : in.x + x_update;
  out.z = in.z;
  if (in.z.rows() > 0) {
    Var ends = ad::gather_rows(in.x, g.sw_from) + ad::gather_rows(in.x, g.sw_to);
    Var z_update = ad::relu(ad::matmul(ends, tape.param(L.w3)) + ad::matmul(in.z, tape.param(L.w4)));
    out.z = layer == 0 ? z_update : in.z + z_update;
  }
  return out;
}

/// Runs all layers and forms the per-scenario global embedding sum_i x_i.
inline EmbeddingState embed(Tape& tape, const GridSpec& grid, std::span<const LoadScenario> scenarios,
                            ModelParams& params, const detail::BatchGraph& g) {
  EmbeddingState st = init_embeddings(tape, grid, scenarios, params);
  for (std::size_t l = 0; l < params.config.layers; ++l) st = message_pass(tape, st, params, g, l);
  st.global = ad::scatter_add_rows(st.x, g.node_scn, g.batch);
  return st;
}

// ---------------------------------------------------------------------------
// Prediction

/// Predictor outputs for a batch, all in [0,1] except where noted.
struct TapePrediction {
  Var line; // (B*M) x 3: p_hat, v_from, v_to
  Var sw;   // (B*Msw) x 3: p_hat, v_from, v_to
  Var y_hat; // (B*Msw) x 1: closure score (sigmoid, or capped InSi)
  bool has_lines = false;
  bool has_switches = false;
};

inline TapePrediction predict(Tape& tape, const EmbeddingState& st, ModelParams& params, const detail::BatchGraph& g,
                              nn::Mode mode, Rng* rng) {
  TapePrediction pred;
  if (g.m > 0) {
    Var in = ad::concat_cols({ad::gather_rows(st.x, g.line_from), ad::gather_rows(st.x, g.line_to),
                              ad::gather_rows(st.global, g.line_scn)});
    pred.line = ad::sigmoid(nn::mlp_forward(tape, params.l_pred, in, mode, rng));
    pred.has_lines = true;
  }
  if (g.msw > 0) {
    Var in = ad::concat_cols({ad::gather_rows(st.x, g.sw_from), ad::gather_rows(st.x, g.sw_to), st.z,
                              ad::gather_rows(st.global, g.sw_scn)});
    Var raw = nn::mlp_forward(tape, params.s_pred, in, mode, rng);
    pred.sw = ad::sigmoid(ad::slice_cols(raw, 0, 3));
    Var logit = ad::slice_cols(raw, 3, 1);
    if (params.config.rounding == RoundingMode::phyr) {
      pred.y_hat = ad::sigmoid(logit);
    } else {
      pred.y_hat = ad::clamp(ad::insi(logit, params.config.insi_tau, params.config.insi_mu), 0.0, 1.0);
    }
    pred.has_switches = true;
  }
  return pred;
}

/// One scenario's predictions as plain numbers (used for committee averaging).
struct Prediction {
  std::vector<double> p_hat_line, v_from_line, v_to_line;
  std::vector<double> p_hat_sw, v_from_sw, v_to_sw, y_hat;
};

inline std::vector<Prediction> unpack(const TapePrediction& tp, const detail::BatchGraph& g) {
  std::vector<Prediction> out(g.batch);
  for (std::size_t s = 0; s < g.batch; ++s) {
    auto& p = out[s];
    for (std::size_t k = 0; k < g.m; ++k) {
      const Tensor& t = tp.line.value();
      p.p_hat_line.push_back(t(s * g.m + k, 0));
      p.v_from_line.push_back(t(s * g.m + k, 1));
      p.v_to_line.push_back(t(s * g.m + k, 2));
    }
    for (std::size_t k = 0; k < g.msw; ++k) {
      const Tensor& t = tp.sw.value();
      p.p_hat_sw.push_back(t(s * g.msw + k, 0));
      p.v_from_sw.push_back(t(s * g.msw + k, 1));
      p.v_to_sw.push_back(t(s * g.msw + k, 2));
      p.y_hat.push_back(tp.y_hat.value()(s * g.msw + k, 0));
    }
  }
  return out;
}

/// Eval-mode predictions for a batch of scenarios.
inline std::vector<Prediction> predict_batch(ModelParams& params, const GridSpec& grid,
                                             std::span<const LoadScenario> scenarios,
                                             const ForcedSwitches& forced = {}) {
  detail::check_forced(grid, forced);
  if (scenarios.empty()) return {};
  detail::BatchGraph g(grid, scenarios.size(), forced);
  Tape tape;
  auto st = embed(tape, grid, scenarios, params, g);
  auto tp = predict(tape, st, params, g, nn::Mode::eval, nullptr);
  return unpack(tp, g);
}

/// Elementwise mean of the members' predictions for one scenario.
inline Prediction average_predictions(std::span<const Prediction> members) {
  if (members.empty()) throw ValidationError("committee is empty");
  Prediction avg = members.front();
  auto fields = [](Prediction& p) {
    return std::vector<std::vector<double>*>{&p.p_hat_line, &p.v_from_line, &p.v_to_line, &p.p_hat_sw,
                                             &p.v_from_sw,  &p.v_to_sw,     &p.y_hat};
  };
  auto dst = fields(avg);
  for (std::size_t m = 1; m < members.size(); ++m) {
    auto src = fields(const_cast<Prediction&>(members[m]));
    for (std::size_t f = 0; f < dst.size(); ++f)
      for (std::size_t i = 0; i < dst[f]->size(); ++i) (*dst[f])[i] += (*src[f])[i];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (auto* f : dst)
    for (auto& x : *f) x *= inv;
  return avg;
}

// ---------------------------------------------------------------------------
// Voltage aggregation

/// Mean of each node's voltage instances mapped onto [v_min, v_max]; the slack
/// is pinned to 1. Nodes without instances sit at the midpoint.
inline std::vector<double> aggregate_and_scale_voltages(const GridSpec& grid, const Prediction& pred,
                                                        const ForcedSwitches& forced = {}) {
  const std::size_t n = grid.num_nodes();
  std::vector<double> sum(n, 0.0), count(n, 0.0);
  for (std::size_t k = 0; k < grid.num_lines(); ++k) {
    sum[grid.lines[k].from] += pred.v_from_line[k];
    sum[grid.lines[k].to] += pred.v_to_line[k];
    count[grid.lines[k].from] += 1.0;
    count[grid.lines[k].to] += 1.0;
  }
  for (std::size_t k = 0; k < grid.num_switches(); ++k) {
    if (detail::clamp_of(forced, k) == SwitchClamp::open) continue;
    sum[grid.switches[k].from] += pred.v_from_sw[k];
    sum[grid.switches[k].to] += pred.v_to_sw[k];
    count[grid.switches[k].from] += 1.0;
    count[grid.switches[k].to] += 1.0;
  }
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = count[i] > 0.0 ? sum[i] / count[i] : 0.5;
    v[i] = std::clamp(grid.v_min * (1.0 - t) + grid.v_max * t, grid.v_min, grid.v_max);
  }
  v[grid.slack_node] = 1.0;
  return v;
}

inline Var aggregate_voltages_tape(Tape& tape, const GridSpec& grid, const TapePrediction& pred,
                                   const detail::BatchGraph& g) {
  const std::size_t rows = g.batch * g.n;
  Var sum = detail::zeros(tape, rows, 1);
  if (pred.has_lines) {
    sum = sum + ad::scatter_add_rows(ad::slice_cols(pred.line, 1, 1), g.line_from, rows);
    sum = sum + ad::scatter_add_rows(ad::slice_cols(pred.line, 2, 1), g.line_to, rows);
  }
  if (pred.has_switches && !g.active_sw_rows.empty()) {
    Var active = ad::gather_rows(pred.sw, g.active_sw_rows);
    sum = sum + ad::scatter_add_rows(ad::slice_cols(active, 1, 1), g.active_sw_from, rows);
    sum = sum + ad::scatter_add_rows(ad::slice_cols(active, 2, 1), g.active_sw_to, rows);
  }
  Tensor scale(rows, 1), shift(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t i = r % g.n;
    if (i == grid.slack_node) {
      shift(r, 0) = 1.0;
    } else if (g.instance_count[i] == 0.0) {
      shift(r, 0) = 0.5 * (grid.v_min + grid.v_max);
    } else {
      scale(r, 0) = (grid.v_max - grid.v_min) / g.instance_count[i];
      shift(r, 0) = grid.v_min;
    }
  }
  return ad::affine(sum, scale, shift);
}

// ---------------------------------------------------------------------------
// Topology selection

enum class PhyrMode { eval, train };

/// Free switches ranked by descending score; ties go to the lower index.
inline std::vector<std::size_t> phyr_ranking(std::span<const double> y_hat, const ForcedSwitches& forced) {
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < y_hat.size(); ++k) {
    if (detail::clamp_of(forced, k) == SwitchClamp::free) order.push_back(k);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y_hat[a] > y_hat[b]; });
  return order;
}

/// Number of free switches PhyR must close after honoring forced closures.
inline std::size_t phyr_free_closures(std::size_t s, std::size_t num_switches, const ForcedSwitches& forced) {
  std::size_t forced_closed = 0, free = 0;
  for (std::size_t k = 0; k < num_switches; ++k) {
    const auto c = detail::clamp_of(forced, k);
    forced_closed += c == SwitchClamp::closed;
    free += c == SwitchClamp::free;
  }
  if (forced_closed > s) {
    throw ValidationError("forced closures (" + std::to_string(forced_closed) + ") exceed the required " +
                          std::to_string(s) + " closed switches");
  }
  if (s - forced_closed > free) {
    throw ValidationError("forced openings leave too few free switches to close " + std::to_string(s));
  }
  return s - forced_closed;
}

/// Eval: the S largest scores close. Train: the S-1 largest close, the S-th
/// keeps its score and the rest open. Forced clamps override and count toward S.
inline std::vector<double> phyr_select(std::span<const double> y_hat, std::size_t s, const ForcedSwitches& forced = {},
                                       PhyrMode mode = PhyrMode::eval) {
  if (!forced.empty() && forced.size() != y_hat.size()) throw ValidationError("forced clamp vector has wrong length");
  if (s > y_hat.size()) throw ValidationError("cannot close more switches than exist");
  const std::size_t need = phyr_free_closures(s, y_hat.size(), forced);
  std::vector<double> y(y_hat.size(), 0.0);
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (detail::clamp_of(forced, k) == SwitchClamp::closed) y[k] = 1.0;
  }
  const auto order = phyr_ranking(y_hat, forced);
  for (std::size_t r = 0; r < need; ++r) {
    const bool pass = mode == PhyrMode::train && r + 1 == need;
    y[order[r]] = pass ? y_hat[order[r]] : 1.0;
  }
  return y;
}

/// [2(1+mu)/(mu + exp(-tau z)) - 1]_+
inline double insi_activation(double z, double tau, double mu) { return ad::insi_value(z, tau, mu); }

/// Binary statuses from scores: PhyR top-k, or rounding at 0.5 for the InSi baseline.
inline std::vector<double> select_topology(const GridSpec& grid, std::span<const double> y_hat,
                                           const ModelConfig& config, const ForcedSwitches& forced) {
  if (config.rounding == RoundingMode::phyr) return phyr_select(y_hat, required_closed_count(grid), forced);
  std::vector<double> y(y_hat.size());
  for (std::size_t k = 0; k < y.size(); ++k) {
    const auto c = detail::clamp_of(forced, k);
    y[k] = c == SwitchClamp::free ? (y_hat[k] >= 0.5 ? 1.0 : 0.0) : (c == SwitchClamp::closed ? 1.0 : 0.0);
  }
  return y;
}

/// Tape topology: relaxed PhyR (train) or hard PhyR constants (eval); InSi
/// scores pass through in train mode.
inline Var select_topology_tape(Tape& tape, const GridSpec& grid, Var y_hat, const detail::BatchGraph& g,
                                const ModelConfig& config, const ForcedSwitches& forced, PhyrMode mode) {
  const std::size_t msw = g.msw;
  Tensor pass(g.batch * msw, 1), hard(g.batch * msw, 1);
  for (std::size_t s = 0; s < g.batch; ++s) {
    std::span<const double> scores(&y_hat.value().data[s * msw], msw);
    if (config.rounding == RoundingMode::phyr) {
      const auto y = phyr_select(scores, required_closed_count(grid), forced, PhyrMode::eval);
      const auto order = phyr_ranking(scores, forced);
      const std::size_t need = phyr_free_closures(required_closed_count(grid), msw, forced);
      for (auto k : order) tape.note_branch(k);
      for (std::size_t k = 0; k < msw; ++k) hard(s * msw + k, 0) = y[k];
      if (mode == PhyrMode::train && need > 0) {
        const std::size_t last = order[need - 1];
        hard(s * msw + last, 0) = 0.0;
        pass(s * msw + last, 0) = 1.0;
      }
    } else if (mode == PhyrMode::train) {
      for (std::size_t k = 0; k < msw; ++k) {
        const auto c = detail::clamp_of(forced, k);
        if (c == SwitchClamp::free) pass(s * msw + k, 0) = 1.0;
        else hard(s * msw + k, 0) = c == SwitchClamp::closed ? 1.0 : 0.0;
      }
    } else {
      const auto y = select_topology(grid, scores, config, forced);
      for (std::size_t k = 0; k < msw; ++k) hard(s * msw + k, 0) = y[k];
    }
  }
  return ad::affine(y_hat, pass, hard);
}

// ---------------------------------------------------------------------------
// Recovery and forward pass

/// Eval-mode decoding of one scenario's predictions into a certified FlowState.
inline FlowState decode_prediction(const GridSpec& grid, const LoadScenario& scenario, const Prediction& pred,
                                   const ModelConfig& config, const ForcedSwitches& forced = {}) {
  detail::check_forced(grid, forced);
  const auto v = aggregate_and_scale_voltages(grid, pred, forced);
  const auto y = select_topology(grid, pred.y_hat, config, forced);
  return recover_flow_state(grid, scenario, v, pred.p_hat_line, pred.p_hat_sw, y);
}

/// Eval-mode forward pass for a batch of scenarios.
inline std::vector<FlowState> forward_batch(ModelParams& params, const GridSpec& grid,
                                            std::span<const LoadScenario> scenarios,
                                            const ForcedSwitches& forced = {}) {
  const auto preds = predict_batch(params, grid, scenarios, forced);
  std::vector<FlowState> out;
  out.reserve(preds.size());
  for (std::size_t s = 0; s < preds.size(); ++s) {
    out.push_back(decode_prediction(grid, scenarios[s], preds[s], params.config, forced));
  }
  return out;
}

inline FlowState forward(ModelParams& params, const GridSpec& grid, const LoadScenario& scenario,
                         const ForcedSwitches& forced = {}) {
  return forward_batch(params, grid, std::span<const LoadScenario>(&scenario, 1), forced).front();
}

/// Committee forward: member predictions are averaged before a single
/// topology selection and recovery.
inline std::vector<FlowState> committee_forward(std::vector<ModelParams>& committee, const GridSpec& grid,
                                                std::span<const LoadScenario> scenarios,
                                                const ForcedSwitches& forced = {}) {
  if (committee.empty()) throw ValidationError("committee is empty");
  std::vector<std::vector<Prediction>> per_member;
  for (auto& m : committee) per_member.push_back(predict_batch(m, grid, scenarios, forced));
  std::vector<FlowState> out;
  std::vector<Prediction> members(committee.size());
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    for (std::size_t m = 0; m < committee.size(); ++m) members[m] = per_member[m][s];
    out.push_back(decode_prediction(grid, scenarios[s], average_predictions(members), committee.front().config,
                                    forced));
  }
  return out;
}

/// Tape version of the full pipeline, batch-stacked.
struct TapeFlow {
  Var y_hat, y;             // (B*Msw) x 1
  Var v;                    // (B*N) x 1
  Var p_line, q_line;       // (B*M) x 1
  Var p_sw, q_sw;           // (B*Msw) x 1
  Var p_gen, q_gen;         // (B*N) x 1
  Var objective;            // B x 1
  Var violation_norm;       // B x 1
  bool has_lines = false;
  bool has_switches = false;
};

struct ForwardOptions {
  nn::Mode mode = nn::Mode::train;
  PhyrMode phyr = PhyrMode::train;
};

inline TapeFlow forward_tape(Tape& tape, ModelParams& params, const GridSpec& grid,
                             std::span<const LoadScenario> scenarios, const ForcedSwitches& forced,
                             ForwardOptions opt, Rng* rng) {
  detail::check_forced(grid, forced);
  if (scenarios.empty()) throw ValidationError("empty batch");
  const detail::BatchGraph g(grid, scenarios.size(), forced);
  const double big_m = grid.big_m;
  const auto st = embed(tape, grid, scenarios, params, g);
  const auto pred = predict(tape, st, params, g, opt.mode, rng);

  TapeFlow f;
  f.has_lines = pred.has_lines;
  f.has_switches = pred.has_switches;
  f.v = aggregate_voltages_tape(tape, grid, pred, g);
  const std::size_t node_rows = g.batch * g.n;
  Var out_p = detail::zeros(tape, node_rows, 1);
  Var out_q = detail::zeros(tape, node_rows, 1);
  Var line_cost = detail::zeros(tape, g.batch, 1);

  auto reactive = [&](Var p, Var dv, const std::vector<EdgeSpec>& arcs) {
    Tensor inv2x = detail::arc_column(arcs, g.batch, [](const EdgeSpec& e) { return 0.5 / e.x; });
    Tensor r_over_x = detail::arc_column(arcs, g.batch, [](const EdgeSpec& e) { return -e.r / e.x; });
    const Tensor zero(p.rows(), 1);
    return ad::affine(dv, inv2x, zero) + ad::affine(p, r_over_x, zero);
  };
  auto flows_into = [&](Var flow, const std::vector<std::size_t>& from, const std::vector<std::size_t>& to) {
    return ad::scatter_add_rows(flow, from, node_rows) - ad::scatter_add_rows(flow, to, node_rows);
  };

  if (pred.has_lines) {
    f.p_line = ad::scale(ad::slice_cols(pred.line, 0, 1), 2.0 * big_m, -big_m);
    Var dv = ad::gather_rows(f.v, g.line_from) - ad::gather_rows(f.v, g.line_to);
    f.q_line = reactive(f.p_line, dv, grid.lines);
    out_p = out_p + flows_into(f.p_line, g.line_from, g.line_to);
    out_q = out_q + flows_into(f.q_line, g.line_from, g.line_to);
    Tensor r = detail::arc_column(grid.lines, g.batch, [](const EdgeSpec& e) { return e.r; });
    Var cost = ad::affine(ad::square(f.p_line) + ad::square(f.q_line), r, Tensor(r.rows, 1));
    line_cost = ad::scatter_add_rows(cost, g.line_scn, g.batch);
  }
  Var degree = detail::zeros(tape, node_rows, 1);
  if (pred.has_switches) {
    f.y_hat = pred.y_hat;
    f.y = select_topology_tape(tape, grid, pred.y_hat, g, params.config, forced, opt.phyr);
    Var p_ungated = ad::scale(ad::slice_cols(pred.sw, 0, 1), 2.0 * big_m, -big_m);
    Var dv = ad::gather_rows(f.v, g.sw_from) - ad::gather_rows(f.v, g.sw_to);
    Var q_tilde = reactive(p_ungated, dv, grid.switches);
    f.p_sw = p_ungated * f.y;
    f.q_sw = q_tilde * f.y;
    out_p = out_p + flows_into(f.p_sw, g.sw_from, g.sw_to);
    out_q = out_q + flows_into(f.q_sw, g.sw_from, g.sw_to);
    degree = ad::scatter_add_rows(f.y, g.sw_from, node_rows) + ad::scatter_add_rows(f.y, g.sw_to, node_rows);
  }
  const std::size_t n = g.n;
  Tensor one(node_rows, 1, 1.0), neg(node_rows, 1, -1.0);
  f.p_gen = ad::affine(out_p, one, detail::node_column(scenarios, n, [](const LoadScenario& s, std::size_t i) {
                         return s.p_load[i];
                       }));
  f.q_gen = ad::affine(out_q, one, detail::node_column(scenarios, n, [](const LoadScenario& s, std::size_t i) {
                         return s.q_load[i];
                       }));
  f.objective = line_cost;

  auto col = [&](auto fn) { return detail::node_column(scenarios, n, fn); };
  Tensor pmin = col([](const LoadScenario& s, std::size_t i) { return s.p_gen_min[i]; });
  Tensor npmax = col([](const LoadScenario& s, std::size_t i) { return -s.p_gen_max[i]; });
  Tensor qmin = col([](const LoadScenario& s, std::size_t i) { return s.q_gen_min[i]; });
  Tensor nqmax = col([](const LoadScenario& s, std::size_t i) { return -s.q_gen_max[i]; });
  Tensor conn_shift = col([&grid](const LoadScenario&, std::size_t i) {
    return 1.0 - static_cast<double>(fixed_degree(grid, i));
  });
  Var sq = ad::square(ad::relu(ad::affine(f.p_gen, neg, pmin))) + ad::square(ad::relu(ad::affine(f.p_gen, one, npmax))) +
           ad::square(ad::relu(ad::affine(f.q_gen, neg, qmin))) + ad::square(ad::relu(ad::affine(f.q_gen, one, nqmax))) +
           ad::square(ad::relu(ad::affine(degree, neg, conn_shift)));
  f.violation_norm = ad::sqrt(ad::scatter_add_rows(sq, g.node_scn, g.batch));
  return f;
}

// ---------------------------------------------------------------------------
// Losses

/// Oracle targets for one scenario (semi-supervised and supervised losses).
struct Targets {
  std::vector<double> y, v, p_gen, q_gen;
};

inline Targets targets_from(const OracleSolution& sol) {
  if (sol.status != SolveStatus::optimal) throw ValidationError("oracle target is not optimal");
  return {sol.y_star, sol.flow_state_star.v, sol.flow_state_star.p_gen, sol.flow_state_star.q_gen};
}

inline double euclidean_norm(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x * x;
  return std::sqrt(s);
}

/// f + lambda * ||max{0, h}||_2
inline double loss_unsupervised(const GridSpec& grid, const LoadScenario& scenario, const FlowState& s, double lambda) {
  return objective(grid, s) + lambda * euclidean_norm(inequality_vector(grid, scenario, s).entries);
}

/// Unsupervised loss + mu * ||y - y*||_2
inline double loss_semi_supervised(const GridSpec& grid, const LoadScenario& scenario, const FlowState& s,
                                   double lambda, std::span<const double> y_star, double mu) {
  if (y_star.size() != s.y.size()) throw ValidationError("missing or mismatched switch targets");
  std::vector<double> d(s.y.size());
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = s.y[k] - y_star[k];
  return loss_unsupervised(grid, scenario, s, lambda) + mu * euclidean_norm(d);
}

/// ||(v-v*)^2 + (pg-pg*)^2 + (qg-qg*)^2||_2^2 + ||(y-y*)^2||_2^2 + lambda ||max{0,h}||_2
inline double loss_supervised(const GridSpec& grid, const LoadScenario& scenario, const FlowState& s,
                              const Targets& t, double lambda) {
  if (t.v.size() != s.v.size() || t.p_gen.size() != s.p_gen.size() || t.q_gen.size() != s.q_gen.size() ||
      t.y.size() != s.y.size()) {
    throw ValidationError("missing or mismatched supervised targets");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < s.v.size(); ++j) {
    const double dv = s.v[j] - t.v[j], dp = s.p_gen[j] - t.p_gen[j], dq = s.q_gen[j] - t.q_gen[j];
    const double e = dv * dv + dp * dp + dq * dq;
    total += e * e;
  }
  for (std::size_t k = 0; k < s.y.size(); ++k) {
    const double d = s.y[k] - t.y[k];
    total += d * d * d * d;
  }
  return total + lambda * euclidean_norm(inequality_vector(grid, scenario, s).entries);
}

/// Per-scenario loss column (B x 1) for the configured loss mode.
inline Var loss_column(Tape& /*tape*/, const TapeFlow& f, const GridSpec& grid, std::span<const LoadScenario> scenarios,
                       const ModelConfig& config, std::span<const Targets> targets) {
  const std::size_t b = scenarios.size(), n = grid.num_nodes(), msw = grid.num_switches();
  Var loss = f.objective + ad::scale(f.violation_norm, config.lambda);
  if (config.loss == LossMode::unsupervised) return loss;
  if (targets.size() != b) throw ValidationError("loss mode " + to_string(config.loss) + " requires oracle targets");
  std::vector<std::size_t> sw_scn, node_scn;
  Tensor y_star(b * msw, 1);
  for (std::size_t s = 0; s < b; ++s) {
    if (targets[s].y.size() != msw) throw ValidationError("switch target has wrong length");
    for (std::size_t k = 0; k < msw; ++k) {
      y_star(s * msw + k, 0) = targets[s].y[k];
      sw_scn.push_back(s);
    }
    for (std::size_t i = 0; i < n; ++i) node_scn.push_back(s);
  }
  const Tensor one_sw(b * msw, 1, 1.0);
  Tensor neg_y = y_star;
  for (auto& x : neg_y.data) x = -x;
  if (config.loss == LossMode::semi) {
    if (msw == 0) return loss;
    Var dy = ad::affine(f.y, one_sw, neg_y);
    Var norm = ad::sqrt(ad::scatter_add_rows(ad::square(dy), sw_scn, b));
    return loss + ad::scale(norm, config.semi_weight);
  }
  // supervised: no objective term
  Var sup = ad::scale(f.violation_norm, config.lambda);
  auto target_col = [&](auto field) {
    Tensor t(b * n, 1);
    for (std::size_t s = 0; s < b; ++s) {
      const auto& vec = targets[s].*field;
      if (vec.size() != n) throw ValidationError("node target has wrong length");
      for (std::size_t i = 0; i < n; ++i) t(s * n + i, 0) = -vec[i];
    }
    return t;
  };
  const Tensor one_n(b * n, 1, 1.0);
  Var e = ad::square(ad::affine(f.v, one_n, target_col(&Targets::v))) +
          ad::square(ad::affine(f.p_gen, one_n, target_col(&Targets::p_gen))) +
          ad::square(ad::affine(f.q_gen, one_n, target_col(&Targets::q_gen)));
  sup = sup + ad::scatter_add_rows(ad::square(e), node_scn, b);
  if (msw > 0) {
    Var dy2 = ad::square(ad::affine(f.y, one_sw, neg_y));
    sup = sup + ad::scatter_add_rows(ad::square(dy2), sw_scn, b);
  }
  return sup;
}

/// Batch-mean loss on a fresh tape.
inline Var batch_loss(Tape& tape, ModelParams& params, const GridSpec& grid, std::span<const LoadScenario> scenarios,
                      std::span<const Targets> targets, const ForcedSwitches& forced, ForwardOptions opt, Rng* rng,
                      TapeFlow* flow_out = nullptr) {
  if (params.config.loss != LossMode::unsupervised && targets.size() != scenarios.size()) {
    throw ValidationError("loss mode " + to_string(params.config.loss) + " requires oracle targets");
  }
  TapeFlow f = forward_tape(tape, params, grid, scenarios, forced, opt, rng);
  Var loss = ad::mean(loss_column(tape, f, grid, scenarios, params.config, targets));
  if (flow_out) *flow_out = f;
  return loss;
}

/// Reads scenario s of a batch-stacked tape flow back into a FlowState.
inline FlowState extract_flow_state(const TapeFlow& f, const GridSpec& grid, std::size_t s) {
  FlowState out = zero_flow_state(grid);
  auto take = [](const Var& v, bool present, std::size_t count, std::size_t s, std::vector<double>& dst) {
    if (!present) return;
    for (std::size_t k = 0; k < count; ++k) dst[k] = v.value()(s * count + k, 0);
  };
  const auto n = grid.num_nodes(), m = grid.num_lines(), msw = grid.num_switches();
  take(f.y, f.has_switches, msw, s, out.y);
  take(f.v, true, n, s, out.v);
  take(f.p_line, f.has_lines, m, s, out.p_line);
  take(f.q_line, f.has_lines, m, s, out.q_line);
  take(f.p_sw, f.has_switches, msw, s, out.p_sw);
  take(f.q_sw, f.has_switches, msw, s, out.q_sw);
  take(f.p_gen, true, n, s, out.p_gen);
  take(f.q_gen, true, n, s, out.q_gen);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   graphyr-checkpoint 1
//   config key=value ...
//   grids <count>
//   grid <signature> <N> <M> <Msw>      (one per grid)
//   array <name> <rows> <cols> ...      (named-array records)
//   end

inline constexpr int kCheckpointVersion = 1;

inline std::string format_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "layers=" << c.layers << " hidden=" << c.hidden << " l_hidden=" << c.l_hidden << " s_hidden=" << c.s_hidden
     << " dropout=" << graphyr::detail::format_double(c.dropout)
     << " lambda=" << graphyr::detail::format_double(c.lambda)
     << " semi_weight=" << graphyr::detail::format_double(c.semi_weight)
     << " insi_tau=" << graphyr::detail::format_double(c.insi_tau)
     << " insi_mu=" << graphyr::detail::format_double(c.insi_mu) << " rounding=" << to_string(c.rounding)
     << " loss=" << to_string(c.loss) << " seed=" << c.seed;
  return os.str();
}

inline ModelConfig parse_config_line(const std::string& line) {
  std::istringstream in(line);
  std::map<std::string, std::string> kv;
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ParseError("checkpoint config: bad token '" + token + "'");
    kv[token.substr(0, eq)] = token.substr(eq + 1);
  }
  auto get = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw ParseError(std::string("checkpoint config: missing ") + k);
    return it->second;
  };
  const std::string where = "checkpoint config";
  ModelConfig c;
  c.layers = graphyr::detail::parse_index(get("layers"), where);
  c.hidden = graphyr::detail::parse_index(get("hidden"), where);
  c.l_hidden = graphyr::detail::parse_index(get("l_hidden"), where);
  c.s_hidden = graphyr::detail::parse_index(get("s_hidden"), where);
  c.dropout = graphyr::detail::parse_double(get("dropout"), where);
  c.lambda = graphyr::detail::parse_double(get("lambda"), where);
  c.semi_weight = graphyr::detail::parse_double(get("semi_weight"), where);
  c.insi_tau = graphyr::detail::parse_double(get("insi_tau"), where);
  c.insi_mu = graphyr::detail::parse_double(get("insi_mu"), where);
  c.rounding = parse_rounding_mode(get("rounding"));
  c.loss = parse_loss_mode(get("loss"));
  c.seed = std::stoull(get("seed"));
  c.validate();
  return c;
}

inline std::string format_checkpoint(ModelParams& params, std::span<const GridSpec> grids) {
  std::ostringstream os;
  os << "graphyr-checkpoint " << kCheckpointVersion << "\n";
  os << "config " << format_config(params.config) << "\n";
  os << "grids " << grids.size() << "\n";
  for (const auto& g : grids) {
    os << "grid " << g.signature() << " " << g.num_nodes() << " " << g.num_lines() << " " << g.num_switches() << "\n";
  }
  for (auto& l : params.layers) {
    for (auto* p : {&l.w1, &l.w2, &l.w3, &l.w4}) nn::write_array(os, p->name, p->value);
  }
  nn::write_block(os, params.l_pred);
  nn::write_block(os, params.s_pred);
  os << "end\n";
  return os.str();
}

inline ModelParams parse_checkpoint(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::getline(in, line);
  if (graphyr::detail::trim(line) != "graphyr-checkpoint " + std::to_string(kCheckpointVersion)) {
    throw ParseError("checkpoint: unsupported header '" + line + "'");
  }
  std::getline(in, line);
  if (line.rfind("config ", 0) != 0) throw ParseError("checkpoint: missing config line");
  ModelParams params = init_params(parse_config_line(line.substr(7)));
  std::string tag;
  std::size_t count = 0;
  if (!(in >> tag >> count) || tag != "grids") throw ParseError("checkpoint: missing grid list");
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t sig = 0;
    std::size_t n = 0, m = 0, msw = 0;
    if (!(in >> tag >> sig >> n >> m >> msw) || tag != "grid") throw ParseError("checkpoint: bad grid record");
    params.grid_signatures.push_back(sig);
  }
  for (auto& l : params.layers) {
    for (auto* p : {&l.w1, &l.w2, &l.w3, &l.w4}) nn::assign_array(nn::read_array(in), p->name, p->value);
  }
  nn::read_block(in, params.l_pred);
  nn::read_block(in, params.s_pred);
  if (!(in >> tag) || tag != "end") throw ParseError("checkpoint: missing end marker");
  return params;
}

/// Signature check: the grid must be one of the grids the model was trained on.
inline void require_trained_on(const ModelParams& params, const GridSpec& grid) {
  const auto sig = grid.signature();
  if (std::find(params.grid_signatures.begin(), params.grid_signatures.end(), sig) == params.grid_signatures.end()) {
    throw ValidationError("checkpoint was not trained on grid '" + grid.name + "' (signature mismatch)");
  }
}

} // namespace graphyr

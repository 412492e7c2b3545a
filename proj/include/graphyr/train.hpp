#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "graphyr/errors.hpp"
#include "graphyr/grid.hpp"
#include "graphyr/lindistflow.hpp"
#include "graphyr/model.hpp"
#include "graphyr/oracle.hpp"
#include "graphyr/parallel.hpp"
#include "graphyr/random.hpp"

namespace graphyr {

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 1500;
  std::size_t batch_size = 200;
  double learning_rate = 5e-4;
  std::size_t committee = 10;
  std::uint64_t seed = 0;
  std::size_t validation_every = 10;
  std::size_t threads = 1;

  void validate() const {
    model.validate();
    if (committee < 1) throw ValidationError("committee size must be at least 1");
    if (batch_size < 1) throw ValidationError("batch size must be at least 1");
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
    if (validation_every < 1) throw ValidationError("validation interval must be at least 1");
  }

  /// Member seeds are derived from the base seed and are pairwise distinct.
  std::uint64_t member_seed(std::size_t member) const { return mix_seed(seed, 0xc0ff + member); }
};

/// One grid's training material; targets align with the scenario lists when
/// the loss mode needs them.
struct GridData {
  GridSpec grid;
  std::vector<LoadScenario> train;
  std::vector<LoadScenario> validation;
  std::vector<Targets> train_targets;
  std::vector<Targets> validation_targets;
};

/// Attaches oracle targets, failing fast on missing rows. Scenarios whose
/// oracle is infeasible carry no target and are dropped.
inline void attach_targets(GridData& data, const OracleTable& table) {
  if (table.grid_signature != data.grid.signature()) {
    throw ValidationError("oracle table does not belong to grid '" + data.grid.name + "'");
  }
  auto attach = [&](std::vector<LoadScenario>& scenarios, std::vector<Targets>& targets) {
    std::vector<LoadScenario> kept;
    targets.clear();
    for (auto& s : scenarios) {
      const auto* sol = table.find(s.id);
      if (!sol) throw ValidationError("oracle cache has no row for scenario " + std::to_string(s.id));
      if (sol->status != SolveStatus::optimal) continue;
      targets.push_back(targets_from(*sol));
      kept.push_back(std::move(s));
    }
    scenarios = std::move(kept);
  };
  attach(data.train, data.train_targets);
  attach(data.validation, data.validation_targets);
}

struct LossPoint {
  std::size_t epoch = 0;
  std::size_t member = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<ModelParams> committee;
  std::vector<LossPoint> curve; // ordered by member, then epoch
};

namespace detail {

struct BatchRef {
  std::size_t grid = 0;
  std::vector<std::size_t> rows;
};

/// Shuffled batches per grid, interleaved round-robin across grids.
inline std::vector<BatchRef> epoch_batches(const std::vector<GridData>& data, std::size_t batch_size, Rng& rng) {
  std::vector<std::vector<BatchRef>> per_grid(data.size());
  for (std::size_t g = 0; g < data.size(); ++g) {
    std::vector<std::size_t> idx(data[g].train.size());
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(idx, rng);
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
      BatchRef b;
      b.grid = g;
      b.rows.assign(idx.begin() + static_cast<std::ptrdiff_t>(start),
                    idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + batch_size)));
      per_grid[g].push_back(std::move(b));
    }
  }
  std::vector<BatchRef> out;
  for (std::size_t round = 0;; ++round) {
    bool any = false;
    for (auto& list : per_grid) {
      if (round < list.size()) {
        out.push_back(std::move(list[round]));
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& xs, const std::vector<std::size_t>& rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(xs[r]);
  return out;
}

inline bool needs_targets(const ModelConfig& c) { return c.loss != LossMode::unsupervised; }

/// Mean eval-mode loss over each grid's validation set, weighted by size.
inline double validation_loss(ModelParams& params, const std::vector<GridData>& data) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& d : data) {
    if (d.validation.empty()) continue;
    Tape tape;
    const std::span<const Targets> targets =
        needs_targets(params.config) ? std::span<const Targets>(d.validation_targets) : std::span<const Targets>();
    Var loss = batch_loss(tape, params, d.grid, d.validation, targets, {}, {nn::Mode::eval, PhyrMode::eval}, nullptr);
    total += loss.value().data[0] * static_cast<double>(d.validation.size());
    count += d.validation.size();
  }
  return count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

} // namespace detail

/// Trains one committee member. Deterministic given (config, member).
inline ModelParams train_member(const std::vector<GridData>& data, const TrainConfig& config, std::size_t member,
                                std::vector<LossPoint>& curve) {
  ModelConfig mc = config.model;
  mc.seed = config.member_seed(member);
  ModelParams params = init_params(mc);
  for (const auto& d : data) params.grid_signatures.push_back(d.grid.signature());
  nn::AdamState adam;
  adam.config.lr = config.learning_rate;
  Rng rng(mix_seed(mc.seed, 0xba7c));
  const auto param_list = params.parameters();
  const bool targets = detail::needs_targets(mc);
  for (const auto& d : data) {
    if (targets && (d.train_targets.size() != d.train.size() || d.validation_targets.size() != d.validation.size())) {
      throw ValidationError("loss mode " + to_string(mc.loss) + " requires oracle targets for grid '" + d.grid.name +
                            "'");
    }
  }

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double epoch_total = 0.0;
    std::size_t epoch_count = 0;
    for (const auto& batch : detail::epoch_batches(data, config.batch_size, rng)) {
      const auto& d = data[batch.grid];
      const auto scenarios = detail::pick(d.train, batch.rows);
      std::vector<Targets> batch_targets;
      if (targets) batch_targets = detail::pick(d.train_targets, batch.rows);
      Tape tape;
      Var loss = batch_loss(tape, params, d.grid, scenarios, batch_targets, {}, {nn::Mode::train, PhyrMode::train},
                            &rng);
      const double value = loss.value().data[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("member " + std::to_string(member) + " diverged at epoch " + std::to_string(epoch) +
                              " (non-finite loss)");
      }
      params.zero_grad();
      tape.backward(loss);
      nn::adam_step(adam, param_list);
      for (const auto* prm : param_list) {
        if (!std::all_of(prm->value.data.begin(), prm->value.data.end(), [](double x) { return std::isfinite(x); })) {
          throw DivergenceError("member " + std::to_string(member) + " diverged at epoch " + std::to_string(epoch) +
                                " (non-finite parameter " + prm->name + ")");
        }
      }
      epoch_total += value * static_cast<double>(scenarios.size());
      epoch_count += scenarios.size();
    }
    LossPoint pt;
    pt.epoch = epoch;
    pt.member = member;
    pt.train_loss = epoch_count ? epoch_total / static_cast<double>(epoch_count) : 0.0;
    if (epoch % config.validation_every == 0) pt.val_loss = detail::validation_loss(params, data);
    curve.push_back(pt);
  }
  return params;
}

/// Trains the committee; members run concurrently on `config.threads` workers.
/// Several grids share one parameter set with batches alternating between grids.
inline TrainResult train(const std::vector<GridData>& data, const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw ValidationError("no training grids");
  for (const auto& d : data) {
    if (d.train.empty()) throw ValidationError("grid '" + d.grid.name + "' has no training scenarios");
  }
  TrainResult result;
  result.committee.resize(config.committee);
  std::vector<std::vector<LossPoint>> curves(config.committee);
  parallel_for(config.committee, config.threads,
               [&](std::size_t m) { result.committee[m] = train_member(data, config, m, curves[m]); });
  for (auto& c : curves) result.curve.insert(result.curve.end(), c.begin(), c.end());
  return result;
}

inline std::string format_loss_curve_csv(std::span<const LossPoint> curve) {
  std::ostringstream os;
  os << "epoch,member,train_loss,val_loss\n";
  for (const auto& p : curve) {
    os << p.epoch << "," << p.member << "," << detail::format_double(p.train_loss) << ","
       << (std::isnan(p.val_loss) ? std::string("nan") : detail::format_double(p.val_loss)) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Metrics

/// (1/N) sum_j (pg_j - pg*_j)^2 + (qg_j - qg*_j)^2
inline double dispatch_error(const FlowState& s, const FlowState& star) {
  const std::size_t n = s.p_gen.size();
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double dp = s.p_gen[j] - star.p_gen[j], dq = s.q_gen[j] - star.q_gen[j];
    total += dp * dp + dq * dq;
  }
  return total / static_cast<double>(n);
}

/// (1/N) sum_j (v_j - v*_j)^2
inline double voltage_error(const FlowState& s, const FlowState& star) {
  const std::size_t n = s.v.size();
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) total += (s.v[j] - star.v[j]) * (s.v[j] - star.v[j]);
  return total / static_cast<double>(n);
}

/// Fraction of switches whose status differs (Hamming distance / M_sw).
inline double topology_error(std::span<const double> y, std::span<const double> y_star) {
  if (y.size() != y_star.size()) throw ValidationError("topology vectors differ in length");
  if (y.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    for (double b : {y[k], y_star[k]}) {
      if (b != 0.0 && b != 1.0) throw ValidationError("topology_error needs binary switch statuses");
    }
    total += (y[k] - y_star[k]) * (y[k] - y_star[k]);
  }
  return total / static_cast<double>(y.size());
}

struct ViolationStats {
  double mean = 0.0;
  double max = 0.0;
  std::size_t count_over_epsilon = 0;
};

inline ViolationStats violation_stats(std::span<const double> h, double epsilon) {
  ViolationStats st;
  if (h.empty()) return st;
  double total = 0.0;
  for (double x : h) {
    const double v = std::max(0.0, x);
    total += v;
    st.max = std::max(st.max, v);
    st.count_over_epsilon += v > epsilon;
  }
  st.mean = total / static_cast<double>(h.size());
  return st;
}

// ---------------------------------------------------------------------------
// Evaluation reports

inline constexpr double kDefaultEpsilon = 0.01;

struct ScenarioMetrics {
  std::size_t scenario = 0;
  bool oracle_optimal = false;
  double dispatch_error = std::numeric_limits<double>::quiet_NaN();
  double voltage_error = std::numeric_limits<double>::quiet_NaN();
  double topology_error = std::numeric_limits<double>::quiet_NaN();
  double ineq_mean = 0.0;
  double ineq_max = 0.0;
  double num_ineq_viol = 0.0;
  double objective = 0.0;
  double oracle_objective = std::numeric_limits<double>::quiet_NaN();
  double max_voltage_violation = 0.0;
};

struct EvalReport {
  std::string label;
  std::string grid_name;
  double epsilon = kDefaultEpsilon;
  std::vector<ScenarioMetrics> rows;
  ScenarioMetrics aggregate;
  std::vector<double> batch_seconds; // wall-clock per inference batch
  std::vector<FlowState> states;     // aligned with rows
};

/// Mean over scenarios; error metrics skip scenarios without an optimal oracle.
inline ScenarioMetrics aggregate_metrics(std::span<const ScenarioMetrics> rows) {
  ScenarioMetrics agg;
  std::size_t opt = 0;
  double d = 0, v = 0, t = 0, obj_star = 0;
  for (const auto& r : rows) {
    agg.ineq_mean += r.ineq_mean;
    agg.ineq_max += r.ineq_max;
    agg.num_ineq_viol += r.num_ineq_viol;
    agg.objective += r.objective;
    agg.max_voltage_violation = std::max(agg.max_voltage_violation, r.max_voltage_violation);
    if (r.oracle_optimal) {
      ++opt;
      d += r.dispatch_error;
      v += r.voltage_error;
      t += r.topology_error;
      obj_star += r.oracle_objective;
    }
  }
  if (!rows.empty()) {
    const double inv = 1.0 / static_cast<double>(rows.size());
    agg.ineq_mean *= inv;
    agg.ineq_max *= inv;
    agg.num_ineq_viol *= inv;
    agg.objective *= inv;
  }
  if (opt) {
    const double inv = 1.0 / static_cast<double>(opt);
    agg.dispatch_error = d * inv;
    agg.voltage_error = v * inv;
    agg.topology_error = t * inv;
    agg.oracle_objective = obj_star * inv;
  }
  agg.oracle_optimal = opt > 0;
  return agg;
}

inline double voltage_bound_violation(const GridSpec& grid, const FlowState& s) {
  double worst = std::abs(s.v[grid.slack_node] - 1.0);
  for (double v : s.v) worst = std::max({worst, grid.v_min - v, v - grid.v_max});
  return std::max(0.0, worst);
}

inline ScenarioMetrics scenario_metrics(const GridSpec& grid, const LoadScenario& scenario, const FlowState& s,
                                        const OracleSolution* star, double epsilon) {
  ScenarioMetrics m;
  m.scenario = scenario.id;
  const auto h = inequality_vector(grid, scenario, s);
  const auto vs = violation_stats(h.entries, epsilon);
  m.ineq_mean = vs.mean;
  m.ineq_max = vs.max;
  m.num_ineq_viol = static_cast<double>(vs.count_over_epsilon);
  m.objective = objective(grid, s);
  m.max_voltage_violation = voltage_bound_violation(grid, s);
  if (star && star->status == SolveStatus::optimal) {
    m.oracle_optimal = true;
    m.dispatch_error = dispatch_error(s, star->flow_state_star);
    m.voltage_error = voltage_error(s, star->flow_state_star);
    m.topology_error = topology_error(s.y, star->y_star);
    m.oracle_objective = star->objective_star;
  }
  return m;
}

/// Committee-averaged eval forward over `scenarios` in batches, scored against
/// the unconstrained oracle. Oracle rows missing from `oracle` are solved here.
inline EvalReport evaluate(std::vector<ModelParams>& committee, const GridSpec& grid,
                           std::span<const LoadScenario> scenarios, const OracleTable* oracle,
                           const ForcedSwitches& forced = {}, double epsilon = kDefaultEpsilon,
                           std::size_t batch_size = 200, std::size_t threads = 1) {
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (oracle && oracle->grid_signature != grid.signature()) {
    throw ValidationError("oracle table does not belong to grid '" + grid.name + "'");
  }
  EvalReport rep;
  rep.grid_name = grid.name;
  rep.epsilon = epsilon;
  for (std::size_t start = 0; start < scenarios.size(); start += batch_size) {
    const auto batch = scenarios.subspan(start, std::min(batch_size, scenarios.size() - start));
    const auto t0 = std::chrono::steady_clock::now();
    auto states = committee_forward(committee, grid, batch, forced);
    rep.batch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    for (auto& s : states) rep.states.push_back(std::move(s));
  }
  std::vector<std::optional<OracleSolution>> solved(scenarios.size());
  parallel_for(scenarios.size(), threads, [&](std::size_t i) {
    if (oracle && oracle->find(scenarios[i].id)) return;
    try {
      solved[i] = solve_dyr(grid, scenarios[i]);
    } catch (const InfeasibleError&) {
      solved[i] = OracleSolution{};
    }
  });
  rep.rows.resize(scenarios.size());
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    const OracleSolution* star = solved[i] ? &*solved[i] : oracle->find(scenarios[i].id);
    rep.rows[i] = scenario_metrics(grid, scenarios[i], rep.states[i], star, epsilon);
  }
  std::vector<std::size_t> order(rep.rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rep.rows[a].scenario < rep.rows[b].scenario; });
  std::vector<ScenarioMetrics> rows;
  std::vector<FlowState> states;
  for (auto i : order) {
    rows.push_back(rep.rows[i]);
    states.push_back(std::move(rep.states[i]));
  }
  rep.rows = std::move(rows);
  rep.states = std::move(states);
  rep.aggregate = aggregate_metrics(rep.rows);
  return rep;
}

inline const char* kReportHeader =
    "scenario,dispatch_error,voltage_error,topology_error,ineq_viol_mean,ineq_viol_max,num_ineq_viol_gt_eps,"
    "objective,oracle_objective";

namespace detail {

inline std::string cell(double x) { return std::isnan(x) ? std::string("nan") : format_double(x); }

inline std::string metrics_cells(const ScenarioMetrics& m) {
  std::ostringstream os;
  os << cell(m.dispatch_error) << "," << cell(m.voltage_error) << "," << cell(m.topology_error) << ","
     << cell(m.ineq_mean) << "," << cell(m.ineq_max) << "," << cell(m.num_ineq_viol) << "," << cell(m.objective)
     << "," << cell(m.oracle_objective);
  return os.str();
}

} // namespace detail

/// Aggregate row first, then one row per scenario.
inline std::string format_report_csv(const EvalReport& rep) {
  std::ostringstream os;
  os << kReportHeader << "\n";
  os << "aggregate," << detail::metrics_cells(rep.aggregate) << "\n";
  for (const auto& r : rep.rows) os << r.scenario << "," << detail::metrics_cells(r) << "\n";
  return os.str();
}

inline std::string format_timing_csv(const EvalReport& rep, std::size_t batch_size) {
  std::ostringstream os;
  os << "batch,scenarios,seconds\n";
  std::size_t remaining = rep.rows.size();
  for (std::size_t b = 0; b < rep.batch_seconds.size(); ++b) {
    const std::size_t n = std::min(batch_size, remaining);
    remaining -= n;
    os << b << "," << n << "," << detail::format_double(rep.batch_seconds[b]) << "\n";
  }
  return os.str();
}

/// Reads the aggregate row of a report CSV.
inline ScenarioMetrics parse_report_aggregate(std::string_view text, const std::string& source) {
  std::istringstream in{std::string(text)};
  std::string row;
  if (!std::getline(in, row) || detail::trim(row) != kReportHeader) throw ParseError(source + ": not an eval report");
  if (!std::getline(in, row)) throw ParseError(source + ": missing aggregate row");
  const auto cells = split_csv_row(detail::trim(row));
  if (cells.size() != 9 || cells[0] != "aggregate") throw ParseError(source + ": malformed aggregate row");
  auto num = [&](std::size_t i) {
    return cells[i] == "nan" ? std::numeric_limits<double>::quiet_NaN() : detail::parse_double(cells[i], source);
  };
  ScenarioMetrics m;
  m.dispatch_error = num(1);
  m.voltage_error = num(2);
  m.topology_error = num(3);
  m.ineq_mean = num(4);
  m.ineq_max = num(5);
  m.num_ineq_viol = num(6);
  m.objective = num(7);
  m.oracle_objective = num(8);
  m.oracle_optimal = !std::isnan(m.dispatch_error);
  return m;
}

/// Comparison table: one row per labelled report aggregate, in input order.
inline std::string format_comparison_csv(std::span<const std::pair<std::string, ScenarioMetrics>> entries) {
  std::ostringstream os;
  os << "label,dispatch_error,voltage_error,topology_error,ineq_viol_mean,ineq_viol_max,num_ineq_viol_gt_eps\n";
  for (const auto& [label, m] : entries) {
    os << label << "," << detail::cell(m.dispatch_error) << "," << detail::cell(m.voltage_error) << ","
       << detail::cell(m.topology_error) << "," << detail::cell(m.ineq_mean) << "," << detail::cell(m.ineq_max)
       << "," << detail::cell(m.num_ineq_viol) << "\n";
  }
  return os.str();
}

} // namespace graphyr

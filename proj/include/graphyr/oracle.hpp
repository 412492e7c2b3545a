#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "graphyr/grid.hpp"
#include "graphyr/lindistflow.hpp"
#include "graphyr/parallel.hpp"
#include "graphyr/qp.hpp"

namespace graphyr {

/// Per-switch operator clamp: free, forced open, or forced closed.
enum class SwitchClamp : signed char { free = -1, open = 0, closed = 1 };

using ForcedSwitches = std::vector<SwitchClamp>;

inline ForcedSwitches no_forcing(const GridSpec& grid) {
  return ForcedSwitches(grid.num_switches(), SwitchClamp::free);
}

struct TopologyCandidate {
  std::vector<double> y;
  std::vector<EdgeSpec> tree_edges; // lines followed by the closed switches
};

enum class SolveStatus { optimal, infeasible };

struct OracleSolution {
  std::vector<double> y_star;
  FlowState flow_state_star;
  double objective_star = std::numeric_limits<double>::infinity();
  double kkt_residual = std::numeric_limits<double>::infinity();
  SolveStatus status = SolveStatus::infeasible;
  std::size_t qp_solves = 0;
};

inline bool lexicographically_less(std::span<const double> a, std::span<const double> b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

/// All switch subsets of size S (required_closed_count) whose closure makes the
/// grid a spanning tree, honoring clamps, in ascending lexicographic order of y.
inline std::vector<TopologyCandidate> enumerate_radial_topologies(const GridSpec& grid,
                                                                  const ForcedSwitches& forced = {}) {
  const std::size_t s = required_closed_count(grid);
  const std::size_t m = grid.num_switches();
  if (!forced.empty() && forced.size() != m) throw ValidationError("forced clamp vector has wrong length");

  std::vector<TopologyCandidate> out;
  std::vector<std::size_t> pick(s);
  for (std::size_t i = 0; i < s; ++i) pick[i] = i;
  while (true) {
    std::vector<double> y(m, 0.0);
    for (auto k : pick) y[k] = 1.0;
    bool allowed = true;
    for (std::size_t k = 0; k < forced.size() && allowed; ++k) {
      if (forced[k] == SwitchClamp::open && y[k] != 0.0) allowed = false;
      if (forced[k] == SwitchClamp::closed && y[k] != 1.0) allowed = false;
    }
    if (allowed && is_radial(grid, y)) {
      TopologyCandidate c;
      c.tree_edges = grid.lines;
      for (auto k : pick) c.tree_edges.push_back(grid.switches[k]);
      c.y = std::move(y);
      out.push_back(std::move(c));
    }
    // next combination in lexicographic index order
    std::size_t i = s;
    while (i > 0 && pick[i - 1] == m - s + i - 1) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t j = i; j < s; ++j) pick[j] = pick[j - 1] + 1;
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return lexicographically_less(a.y, b.y); });
  return out;
}

namespace detail {

/// Spanning tree rooted at the slack. Given non-slack injections, flows follow
/// from subtree sums and voltages from the path to the slack, so the whole
/// FlowState is an affine function of the free injections.
class RadialTree {
public:
  RadialTree(const GridSpec& grid, std::span<const double> y) : grid_(grid), y_(y.begin(), y.end()) {
    const std::size_t n = grid.num_nodes();
    struct Adj {
      std::size_t other;
      bool is_switch;
      std::size_t index;
      bool outgoing;
    };
    std::vector<std::vector<Adj>> adj(n);
    for (std::size_t k = 0; k < grid.num_lines(); ++k) {
      adj[grid.lines[k].from].push_back({grid.lines[k].to, false, k, true});
      adj[grid.lines[k].to].push_back({grid.lines[k].from, false, k, false});
    }
    for (std::size_t k = 0; k < grid.num_switches(); ++k) {
      if (y[k] == 0.0) continue;
      adj[grid.switches[k].from].push_back({grid.switches[k].to, true, k, true});
      adj[grid.switches[k].to].push_back({grid.switches[k].from, true, k, false});
    }
    parent_.assign(n, Link{});
    std::vector<char> seen(n, 0);
    order_.push_back(grid.slack_node);
    seen[grid.slack_node] = 1;
    for (std::size_t head = 0; head < order_.size(); ++head) {
      const auto u = order_[head];
      for (const auto& a : adj[u]) {
        if (seen[a.other]) continue;
        seen[a.other] = 1;
        parent_[a.other] = Link{u, a.is_switch, a.index, a.outgoing};
        order_.push_back(a.other);
      }
    }
    if (order_.size() != n) throw ValidationError("topology does not reach every node");
  }

  /// Builds the FlowState for the given generation at non-slack nodes (slack entries ignored).
  FlowState expand(const LoadScenario& sc, std::span<const double> p_gen, std::span<const double> q_gen) const {
    const std::size_t n = grid_.num_nodes();
    FlowState s = zero_flow_state(grid_);
    s.y = y_;
    std::vector<double> dp(n), dq(n);
    for (std::size_t j = 0; j < n; ++j) {
      dp[j] = sc.p_load[j] - p_gen[j];
      dq[j] = sc.q_load[j] - q_gen[j];
    }
    // accumulate subtree demand bottom-up; assign the flow on each parent link
    for (std::size_t idx = order_.size(); idx-- > 1;) {
      const auto child = order_[idx];
      const auto& link = parent_[child];
      const double sign = link.outgoing ? 1.0 : -1.0; // arc parent->child carries +demand
      auto& p_arc = link.is_switch ? s.p_sw[link.index] : s.p_line[link.index];
      auto& q_arc = link.is_switch ? s.q_sw[link.index] : s.q_line[link.index];
      p_arc = sign * dp[child];
      q_arc = sign * dq[child];
      dp[link.parent] += dp[child];
      dq[link.parent] += dq[child];
    }
    s.v[grid_.slack_node] = 1.0;
    for (std::size_t idx = 1; idx < order_.size(); ++idx) {
      const auto child = order_[idx];
      const auto& link = parent_[child];
      const auto& e = link.is_switch ? grid_.switches[link.index] : grid_.lines[link.index];
      const double p_arc = link.is_switch ? s.p_sw[link.index] : s.p_line[link.index];
      const double q_arc = link.is_switch ? s.q_sw[link.index] : s.q_line[link.index];
      const double drop = 2.0 * (e.r * p_arc + e.x * q_arc);
      s.v[child] = link.outgoing ? s.v[link.parent] - drop : s.v[link.parent] + drop;
    }
    auto gen = recover_generation(grid_, sc, s.p_line, s.q_line, s.p_sw, s.q_sw);
    s.p_gen = std::move(gen.p_gen);
    s.q_gen = std::move(gen.q_gen);
    return s;
  }

private:
  struct Link {
    std::size_t parent = 0;
    bool is_switch = false;
    std::size_t index = 0;
    bool outgoing = true; // arc oriented parent -> child
  };
  const GridSpec& grid_;
  std::vector<double> y_;
  std::vector<Link> parent_;
  std::vector<std::size_t> order_; // BFS order from the slack
};

/// One free injection: which node and whether it is the active (p) or reactive (q) part.
struct FreeInjection {
  std::size_t node;
  bool reactive;
  double lower;
  double upper;
};

/// Affine map u -> FlowState flattened to the quantities the QP needs.
struct AffineModel {
  std::vector<FreeInjection> free;
  std::vector<double> fixed_p_gen;
  std::vector<double> fixed_q_gen;
  std::vector<FlowState> columns; // expand(e_k) - expand(0)
  FlowState base;                 // expand(0)
};

inline FlowState state_difference(const FlowState& a, const FlowState& b) {
  FlowState d = a;
  auto sub = [](std::vector<double>& x, const std::vector<double>& y) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= y[i];
  };
  sub(d.v, b.v);
  sub(d.p_line, b.p_line);
  sub(d.q_line, b.q_line);
  sub(d.p_sw, b.p_sw);
  sub(d.q_sw, b.q_sw);
  sub(d.p_gen, b.p_gen);
  sub(d.q_gen, b.q_gen);
  return d;
}

inline AffineModel build_affine_model(const GridSpec& grid, const LoadScenario& sc, const RadialTree& tree) {
  AffineModel model;
  const std::size_t n = grid.num_nodes();
  model.fixed_p_gen.assign(n, 0.0);
  model.fixed_q_gen.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    if (j == grid.slack_node) continue;
    if (sc.p_gen_min[j] < sc.p_gen_max[j]) {
      model.free.push_back({j, false, sc.p_gen_min[j], sc.p_gen_max[j]});
    } else {
      model.fixed_p_gen[j] = sc.p_gen_min[j];
    }
    if (sc.q_gen_min[j] < sc.q_gen_max[j]) {
      model.free.push_back({j, true, sc.q_gen_min[j], sc.q_gen_max[j]});
    } else {
      model.fixed_q_gen[j] = sc.q_gen_min[j];
    }
  }
  model.base = tree.expand(sc, model.fixed_p_gen, model.fixed_q_gen);
  for (const auto& f : model.free) {
    auto pg = model.fixed_p_gen;
    auto qg = model.fixed_q_gen;
    (f.reactive ? qg : pg)[f.node] += 1.0;
    model.columns.push_back(state_difference(tree.expand(sc, pg, qg), model.base));
  }
  return model;
}

} // namespace detail

/// Minimizes line losses for a fixed radial topology. Open-switch flows are
/// zero, closed-switch Ohm's law and |flow| <= M hold, voltages and generation
/// stay within bounds. Equalities are eliminated through the tree
/// parameterization; the remaining box-constrained QP is solved by the active-set method.
inline OracleSolution solve_fixed_topology(const GridSpec& grid, const LoadScenario& scenario,
                                           const TopologyCandidate& candidate) {
  check_scenario(grid, scenario);
  const detail::RadialTree tree(grid, candidate.y);
  const auto model = detail::build_affine_model(grid, scenario, tree);
  const auto nfree = static_cast<Eigen::Index>(model.free.size());
  constexpr double inf = std::numeric_limits<double>::infinity();

  struct Row {
    std::vector<double> coeff;
    double constant;
    double lower;
    double upper;
  };
  std::vector<Row> rows;
  auto add_row = [&](auto pick, double lower, double upper) {
    Row r{std::vector<double>(model.free.size()), pick(model.base), lower, upper};
    for (std::size_t k = 0; k < model.free.size(); ++k) r.coeff[k] = pick(model.columns[k]);
    rows.push_back(std::move(r));
  };
  for (std::size_t k = 0; k < model.free.size(); ++k) {
    Row r{std::vector<double>(model.free.size(), 0.0), 0.0, model.free[k].lower, model.free[k].upper};
    r.coeff[k] = 1.0;
    rows.push_back(std::move(r));
  }
  const auto slack = grid.slack_node;
  add_row([&](const FlowState& s) { return s.p_gen[slack]; }, scenario.p_gen_min[slack], scenario.p_gen_max[slack]);
  add_row([&](const FlowState& s) { return s.q_gen[slack]; }, scenario.q_gen_min[slack], scenario.q_gen_max[slack]);
  for (std::size_t j = 0; j < grid.num_nodes(); ++j) {
    if (j == slack) continue;
    add_row([&](const FlowState& s) { return s.v[j]; }, grid.v_min, grid.v_max);
  }
  for (std::size_t k = 0; k < grid.num_switches(); ++k) {
    if (candidate.y[k] == 0.0) continue;
    add_row([&](const FlowState& s) { return s.p_sw[k]; }, -grid.big_m, grid.big_m);
    add_row([&](const FlowState& s) { return s.q_sw[k]; }, -grid.big_m, grid.big_m);
  }

  OracleSolution sol;
  sol.y_star = candidate.y;
  sol.qp_solves = 1;

  qp::Problem prob;
  prob.hessian = Eigen::MatrixXd::Zero(nfree, nfree);
  prob.gradient = Eigen::VectorXd::Zero(nfree);
  std::vector<const Row*> kept;
  constexpr double feas_tol = 1e-9;
  for (const auto& r : rows) {
    const bool constant = std::all_of(r.coeff.begin(), r.coeff.end(), [](double c) { return std::abs(c) < 1e-15; });
    if (constant) {
      if (r.constant < r.lower - feas_tol || r.constant > r.upper + feas_tol) return sol; // infeasible
      continue;
    }
    kept.push_back(&r);
  }
  prob.constraints.resize(static_cast<Eigen::Index>(kept.size()), nfree);
  prob.lower.resize(static_cast<Eigen::Index>(kept.size()));
  prob.upper.resize(static_cast<Eigen::Index>(kept.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    for (Eigen::Index k = 0; k < nfree; ++k) prob.constraints(ii, k) = kept[i]->coeff[static_cast<std::size_t>(k)];
    prob.lower[ii] = kept[i]->lower == -inf ? -inf : kept[i]->lower - kept[i]->constant;
    prob.upper[ii] = kept[i]->upper == inf ? inf : kept[i]->upper - kept[i]->constant;
  }

  // Objective: sum_lines R (p^2 + q^2), each flow affine in u.
  for (std::size_t l = 0; l < grid.num_lines(); ++l) {
    const double r = grid.lines[l].r;
    if (r == 0.0) continue;
    for (bool reactive : {false, true}) {
      Eigen::VectorXd a(nfree);
      for (Eigen::Index k = 0; k < nfree; ++k) {
        const auto& col = model.columns[static_cast<std::size_t>(k)];
        a[k] = reactive ? col.q_line[l] : col.p_line[l];
      }
      const double c0 = reactive ? model.base.q_line[l] : model.base.p_line[l];
      prob.hessian += 2.0 * r * a * a.transpose();
      prob.gradient += 2.0 * r * c0 * a;
    }
  }

  Eigen::VectorXd start(nfree);
  for (Eigen::Index k = 0; k < nfree; ++k) {
    const auto& f = model.free[static_cast<std::size_t>(k)];
    start[k] = 0.5 * (f.lower + f.upper);
  }
  const auto result = qp::solve(prob, start);
  if (result.status != qp::Status::optimal) return sol;

  auto p_gen = model.fixed_p_gen;
  auto q_gen = model.fixed_q_gen;
  for (std::size_t k = 0; k < model.free.size(); ++k) {
    (model.free[k].reactive ? q_gen : p_gen)[model.free[k].node] = result.x[static_cast<Eigen::Index>(k)];
  }
  sol.flow_state_star = tree.expand(scenario, p_gen, q_gen);
  sol.objective_star = objective(grid, sol.flow_state_star);
  sol.kkt_residual = result.kkt_residual;
  sol.status = SolveStatus::optimal;
  return sol;
}

/// Two objectives closer than this are a tie, broken by the smaller y.
inline bool objective_improves(double candidate, double incumbent) {
  if (!std::isfinite(incumbent)) return std::isfinite(candidate);
  return candidate < incumbent - 1e-12 * std::max(1.0, std::abs(incumbent));
}

/// Exact DyR by enumeration: best fixed-topology solution over all radial
/// candidates, ties broken towards the lexicographically smallest y.
inline OracleSolution solve_dyr(const GridSpec& grid, const LoadScenario& scenario, const ForcedSwitches& forced = {},
                                std::size_t threads = 1) {
  const auto candidates = enumerate_radial_topologies(grid, forced);
  if (candidates.empty()) throw InfeasibleError("grid admits no radial topology");
  std::vector<OracleSolution> solutions(candidates.size());
  parallel_for(candidates.size(), threads,
               [&](std::size_t i) { solutions[i] = solve_fixed_topology(grid, scenario, candidates[i]); });
  OracleSolution best;
  best.y_star = candidates.front().y;
  for (auto& s : solutions) {
    if (s.status == SolveStatus::optimal && objective_improves(s.objective_star, best.objective_star)) best = s;
  }
  best.qp_solves = candidates.size();
  return best;
}

// ---------------------------------------------------------------------------
// Oracle CSV: scenario id, y*, objective*, kkt_residual, status, then v*, p_gen*, q_gen*
// (the last three groups make the file usable as a supervised-target cache).

struct OracleRecord {
  std::size_t scenario_id = 0;
  OracleSolution solution;
};

struct OracleTable {
  std::uint64_t grid_signature = 0;
  std::vector<OracleRecord> records;

  const OracleSolution* find(std::size_t scenario_id) const {
    for (const auto& r : records) {
      if (r.scenario_id == scenario_id) return &r.solution;
    }
    return nullptr;
  }
};

inline std::string format_oracle_csv(const GridSpec& grid, const OracleTable& table) {
  using detail::format_double;
  std::ostringstream os;
  os << "grid_signature,scenario";
  for (std::size_t k = 0; k < grid.num_switches(); ++k) os << ",y_" << k;
  os << ",objective,kkt_residual,status";
  for (const char* g : {"v", "pg", "qg"}) {
    for (std::size_t j = 0; j < grid.num_nodes(); ++j) os << "," << g << "_" << j;
  }
  os << "\n";
  for (const auto& rec : table.records) {
    const auto& s = rec.solution;
    const bool ok = s.status == SolveStatus::optimal;
    os << table.grid_signature << "," << rec.scenario_id;
    for (std::size_t k = 0; k < grid.num_switches(); ++k) os << "," << (ok ? format_double(s.y_star[k]) : "nan");
    os << "," << (ok ? format_double(s.objective_star) : "nan") << ","
       << (ok ? format_double(s.kkt_residual) : "nan") << "," << (ok ? "optimal" : "infeasible");
    for (const auto* xs : {&s.flow_state_star.v, &s.flow_state_star.p_gen, &s.flow_state_star.q_gen}) {
      for (std::size_t j = 0; j < grid.num_nodes(); ++j) os << "," << (ok ? format_double((*xs)[j]) : "nan");
    }
    os << "\n";
  }
  return os.str();
}

inline OracleTable parse_oracle_csv(const GridSpec& grid, std::string_view text, const std::string& source = "<oracle>") {
  OracleTable table;
  table.grid_signature = grid.signature();
  std::istringstream in{std::string(text)};
  std::string row;
  if (!std::getline(in, row)) throw ParseError(source + ": empty oracle file");
  const std::size_t n = grid.num_nodes();
  const std::size_t m = grid.num_switches();
  const std::size_t width = 2 + m + 3 + 3 * n;
  if (split_csv_row(detail::trim(row)).size() != width) throw ParseError(source + ": header does not match grid");
  std::size_t line_no = 1;
  while (std::getline(in, row)) {
    ++line_no;
    row = detail::trim(row);
    if (row.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto cells = split_csv_row(row);
    if (cells.size() != width) throw ParseError(where + ": wrong number of columns");
    if (std::stoull(cells[0]) != grid.signature()) throw ValidationError(where + ": oracle row belongs to another grid");
    OracleRecord rec;
    rec.scenario_id = detail::parse_index(cells[1], where);
    auto& s = rec.solution;
    const std::string& status = cells[2 + m + 2];
    if (status == "optimal") {
      s.status = SolveStatus::optimal;
      s.y_star.resize(m);
      for (std::size_t k = 0; k < m; ++k) s.y_star[k] = detail::parse_double(cells[2 + k], where);
      s.objective_star = detail::parse_double(cells[2 + m], where);
      s.kkt_residual = detail::parse_double(cells[2 + m + 1], where);
      s.flow_state_star = zero_flow_state(grid);
      s.flow_state_star.y = s.y_star;
      for (std::size_t j = 0; j < n; ++j) {
        s.flow_state_star.v[j] = detail::parse_double(cells[2 + m + 3 + j], where);
        s.flow_state_star.p_gen[j] = detail::parse_double(cells[2 + m + 3 + n + j], where);
        s.flow_state_star.q_gen[j] = detail::parse_double(cells[2 + m + 3 + 2 * n + j], where);
      }
    } else if (status == "infeasible") {
      s.status = SolveStatus::infeasible;
    } else {
      throw ParseError(where + ": unknown status '" + status + "'");
    }
    table.records.push_back(std::move(rec));
  }
  return table;
}

/// Solves every scenario; infeasible instances are recorded, not thrown.
inline OracleTable solve_all(const GridSpec& grid, std::span<const LoadScenario> scenarios, std::size_t threads = 1) {
  OracleTable table;
  table.grid_signature = grid.signature();
  table.records.resize(scenarios.size());
  parallel_for(scenarios.size(), threads, [&](std::size_t i) {
    table.records[i].scenario_id = scenarios[i].id;
    table.records[i].solution = solve_dyr(grid, scenarios[i]);
  });
  return table;
}

} // namespace graphyr

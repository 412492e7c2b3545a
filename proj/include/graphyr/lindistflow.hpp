#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "graphyr/grid.hpp"

namespace graphyr {

/// Full decision vector: switch statuses, squared voltages, arc flows, generation.
struct FlowState {
  std::vector<double> y;
  std::vector<double> v;
  std::vector<double> p_line;
  std::vector<double> q_line;
  std::vector<double> p_sw;
  std::vector<double> q_sw;
  std::vector<double> p_gen;
  std::vector<double> q_gen;
};

inline FlowState zero_flow_state(const GridSpec& grid) {
  FlowState s;
  s.y.assign(grid.num_switches(), 0.0);
  s.v.assign(grid.num_nodes(), 1.0);
  s.p_line.assign(grid.num_lines(), 0.0);
  s.q_line.assign(grid.num_lines(), 0.0);
  s.p_sw.assign(grid.num_switches(), 0.0);
  s.q_sw.assign(grid.num_switches(), 0.0);
  s.p_gen.assign(grid.num_nodes(), 0.0);
  s.q_gen.assign(grid.num_nodes(), 0.0);
  return s;
}

inline void check_flow_state(const GridSpec& grid, const FlowState& s) {
  const bool ok = s.y.size() == grid.num_switches() && s.v.size() == grid.num_nodes() &&
                  s.p_line.size() == grid.num_lines() && s.q_line.size() == grid.num_lines() &&
                  s.p_sw.size() == grid.num_switches() && s.q_sw.size() == grid.num_switches() &&
                  s.p_gen.size() == grid.num_nodes() && s.q_gen.size() == grid.num_nodes();
  if (!ok) throw ValidationError("flow state dimensions do not match the grid");
}

/// Line losses: sum over lines of (p^2 + q^2) R. Switch arcs do not contribute.
inline double objective(const GridSpec& grid, const FlowState& s) {
  double total = 0.0;
  for (std::size_t k = 0; k < grid.num_lines(); ++k) {
    total += (s.p_line[k] * s.p_line[k] + s.q_line[k] * s.q_line[k]) * grid.lines[k].r;
  }
  return total;
}

struct NodeResiduals {
  std::vector<double> p;
  std::vector<double> q;
};

/// Net outflow per node over lines and switches.
inline std::vector<double> net_outflow(const GridSpec& grid, std::span<const double> line_flow,
                                       std::span<const double> switch_flow) {
  std::vector<double> out(grid.num_nodes(), 0.0);
  for (std::size_t k = 0; k < grid.num_lines(); ++k) {
    out[grid.lines[k].from] += line_flow[k];
    out[grid.lines[k].to] -= line_flow[k];
  }
  for (std::size_t k = 0; k < grid.num_switches(); ++k) {
    out[grid.switches[k].from] += switch_flow[k];
    out[grid.switches[k].to] -= switch_flow[k];
  }
  return out;
}

/// rp_j = p_gen_j - p_load_j - (outflow_j - inflow_j); likewise for q.
inline NodeResiduals balance_residuals(const GridSpec& grid, const LoadScenario& scenario, const FlowState& s) {
  const auto out_p = net_outflow(grid, s.p_line, s.p_sw);
  const auto out_q = net_outflow(grid, s.q_line, s.q_sw);
  NodeResiduals r;
  r.p.resize(grid.num_nodes());
  r.q.resize(grid.num_nodes());
  for (std::size_t j = 0; j < grid.num_nodes(); ++j) {
    r.p[j] = s.p_gen[j] - scenario.p_load[j] - out_p[j];
    r.q[j] = s.q_gen[j] - scenario.q_load[j] - out_q[j];
  }
  return r;
}

inline double reactive_from_ohm(const EdgeSpec& e, double v_from, double v_to, double p) {
  return ((v_from - v_to) / 2.0 - e.r * p) / e.x;
}

struct ReactiveFlows {
  std::vector<double> q_line;
  std::vector<double> q_sw_tilde; // before switch gating
};

/// q_ij = ((v_i - v_j)/2 - R p_ij) / X on every line and switch.
inline ReactiveFlows recover_reactive_flows(const GridSpec& grid, std::span<const double> v,
                                            std::span<const double> p_line, std::span<const double> p_sw) {
  ReactiveFlows out;
  out.q_line.resize(grid.num_lines());
  out.q_sw_tilde.resize(grid.num_switches());
  for (std::size_t k = 0; k < grid.num_lines(); ++k) {
    const auto& e = grid.lines[k];
    out.q_line[k] = reactive_from_ohm(e, v[e.from], v[e.to], p_line[k]);
  }
  for (std::size_t k = 0; k < grid.num_switches(); ++k) {
    const auto& e = grid.switches[k];
    out.q_sw_tilde[k] = reactive_from_ohm(e, v[e.from], v[e.to], p_sw[k]);
  }
  return out;
}

/// Maps a [0,1] flow code onto [-M, M].
inline double decode_flow(double code, double big_m) { return (code - 0.5) * 2.0 * big_m; }

struct SwitchFlows {
  std::vector<double> p_sw;
  std::vector<double> q_sw;
};

/// p_sw = (p_hat - 0.5) 2M y and q_sw = q_tilde y. Open switches carry exactly zero.
inline SwitchFlows apply_switch_gating(std::span<const double> p_hat, std::span<const double> q_tilde,
                                       std::span<const double> y, double big_m) {
  SwitchFlows out;
  out.p_sw.resize(y.size());
  out.q_sw.resize(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) {
    out.p_sw[k] = y[k] == 0.0 ? 0.0 : decode_flow(p_hat[k], big_m) * y[k];
    out.q_sw[k] = y[k] == 0.0 ? 0.0 : q_tilde[k] * y[k];
  }
  return out;
}

struct Generation {
  std::vector<double> p_gen;
  std::vector<double> q_gen;
};

/// Nodal generation from the balance equations; the slack absorbs the imbalance.
inline Generation recover_generation(const GridSpec& grid, const LoadScenario& scenario,
                                     std::span<const double> p_line, std::span<const double> q_line,
                                     std::span<const double> p_sw, std::span<const double> q_sw) {
  const auto out_p = net_outflow(grid, p_line, p_sw);
  const auto out_q = net_outflow(grid, q_line, q_sw);
  Generation g;
  g.p_gen.resize(grid.num_nodes());
  g.q_gen.resize(grid.num_nodes());
  for (std::size_t j = 0; j < grid.num_nodes(); ++j) {
    g.p_gen[j] = scenario.p_load[j] + out_p[j];
    g.q_gen[j] = scenario.q_load[j] + out_q[j];
  }
  return g;
}

/// Runs recovery steps 1-3: reactive flows from Ohm's law, switch gating, then
/// generation from the balance equations. `p_hat_line`/`p_hat_sw` are [0,1] codes.
inline FlowState recover_flow_state(const GridSpec& grid, const LoadScenario& scenario, std::span<const double> v,
                                    std::span<const double> p_hat_line, std::span<const double> p_hat_sw,
                                    std::span<const double> y) {
  FlowState s;
  s.y.assign(y.begin(), y.end());
  s.v.assign(v.begin(), v.end());
  s.p_line.resize(grid.num_lines());
  for (std::size_t k = 0; k < grid.num_lines(); ++k) s.p_line[k] = decode_flow(p_hat_line[k], grid.big_m);
  std::vector<double> p_sw_ungated(grid.num_switches());
  for (std::size_t k = 0; k < grid.num_switches(); ++k) p_sw_ungated[k] = decode_flow(p_hat_sw[k], grid.big_m);

  auto reactive = recover_reactive_flows(grid, v, s.p_line, p_sw_ungated);
  s.q_line = std::move(reactive.q_line);
  auto gated = apply_switch_gating(p_hat_sw, reactive.q_sw_tilde, y, grid.big_m);
  s.p_sw = std::move(gated.p_sw);
  s.q_sw = std::move(gated.q_sw);
  auto gen = recover_generation(grid, scenario, s.p_line, s.q_line, s.p_sw, s.q_sw);
  s.p_gen = std::move(gen.p_gen);
  s.q_gen = std::move(gen.q_gen);
  return s;
}

/// max{0, h_k} entries: [pmin, pmax, qmin, qmax] per node, then one
/// connectivity entry per node. Length 5N.
struct ViolationVector {
  std::vector<double> entries;

  std::size_t size() const { return entries.size(); }
};

inline ViolationVector inequality_vector(const GridSpec& grid, const LoadScenario& scenario, const FlowState& s) {
  const std::size_t n = grid.num_nodes();
  ViolationVector h;
  h.entries.reserve(5 * n);
  for (std::size_t j = 0; j < n; ++j) {
    h.entries.push_back(std::max(0.0, scenario.p_gen_min[j] - s.p_gen[j]));
    h.entries.push_back(std::max(0.0, s.p_gen[j] - scenario.p_gen_max[j]));
    h.entries.push_back(std::max(0.0, scenario.q_gen_min[j] - s.q_gen[j]));
    h.entries.push_back(std::max(0.0, s.q_gen[j] - scenario.q_gen_max[j]));
  }
  std::vector<double> degree(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) degree[j] = static_cast<double>(fixed_degree(grid, j));
  for (std::size_t k = 0; k < grid.num_switches(); ++k) {
    degree[grid.switches[k].from] += s.y[k];
    degree[grid.switches[k].to] += s.y[k];
  }
  for (std::size_t j = 0; j < n; ++j) h.entries.push_back(std::max(0.0, 1.0 - degree[j]));
  return h;
}

struct ArcResiduals {
  std::vector<double> line;
  std::vector<double> sw;
};

/// v_i - v_j - 2(R p + X q) on lines and closed switches; 0 on open switches.
inline ArcResiduals ohm_residuals(const GridSpec& grid, const FlowState& s) {
  ArcResiduals r;
  r.line.resize(grid.num_lines());
  r.sw.resize(grid.num_switches());
  for (std::size_t k = 0; k < grid.num_lines(); ++k) {
    const auto& e = grid.lines[k];
    r.line[k] = s.v[e.from] - s.v[e.to] - 2.0 * (e.r * s.p_line[k] + e.x * s.q_line[k]);
  }
  for (std::size_t k = 0; k < grid.num_switches(); ++k) {
    const auto& e = grid.switches[k];
    r.sw[k] = s.y[k] > 0.5 ? s.v[e.from] - s.v[e.to] - 2.0 * (e.r * s.p_sw[k] + e.x * s.q_sw[k]) : 0.0;
  }
  return r;
}

inline double max_abs(std::span<const double> xs) {
  double m = 0.0;
  for (double x : xs) m = std::max(m, std::abs(x));
  return m;
}

/// Largest violation of any of the physics equalities (balance and Ohm).
inline double max_equality_residual(const GridSpec& grid, const LoadScenario& scenario, const FlowState& s) {
  const auto bal = balance_residuals(grid, scenario, s);
  const auto ohm = ohm_residuals(grid, s);
  return std::max({max_abs(bal.p), max_abs(bal.q), max_abs(ohm.line), max_abs(ohm.sw)});
}

/// FlowState dump: one row per variable group.
inline std::string format_flow_state_csv(const FlowState& s) {
  std::ostringstream os;
  os << "group,values\n";
  auto row = [&](const char* name, const std::vector<double>& xs) {
    os << name;
    for (double x : xs) os << "," << detail::format_double(x);
    os << "\n";
  };
  row("y", s.y);
  row("v", s.v);
  row("p_line", s.p_line);
  row("q_line", s.q_line);
  row("p_sw", s.p_sw);
  row("q_sw", s.q_sw);
  row("p_gen", s.p_gen);
  row("q_gen", s.q_gen);
  return os.str();
}

inline FlowState parse_flow_state_csv(std::string_view text) {
  FlowState s;
  std::istringstream in{std::string(text)};
  std::string row;
  if (!std::getline(in, row) || detail::trim(row) != "group,values") throw ParseError("flow state: bad header");
  while (std::getline(in, row)) {
    row = detail::trim(row);
    if (row.empty()) continue;
    auto cells = split_csv_row(row);
    std::vector<double> values;
    for (std::size_t i = 1; i < cells.size(); ++i) values.push_back(detail::parse_double(cells[i], "flow state"));
    const std::string& g = cells[0];
    if (g == "y") s.y = values;
    else if (g == "v") s.v = values;
    else if (g == "p_line") s.p_line = values;
    else if (g == "q_line") s.q_line = values;
    else if (g == "p_sw") s.p_sw = values;
    else if (g == "q_sw") s.q_sw = values;
    else if (g == "p_gen") s.p_gen = values;
    else if (g == "q_gen") s.q_gen = values;
    else throw ParseError("flow state: unknown group '" + g + "'");
  }
  return s;
}

} // namespace graphyr

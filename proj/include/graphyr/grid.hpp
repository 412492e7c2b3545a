#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "graphyr/errors.hpp"
#include "graphyr/random.hpp"

namespace graphyr {

using NodeId = std::size_t;

struct NodeSpec {
  NodeId id = 0;
  double p_load_nominal = 0.0;
  double q_load_nominal = 0.0;
  double p_gen_min = 0.0;
  double p_gen_max = 0.0;
  double q_gen_min = 0.0;
  double q_gen_max = 0.0;
};

/// Directed arc; orientation fixes the sign convention of its flow variables.
struct EdgeSpec {
  NodeId from = 0;
  NodeId to = 0;
  double r = 0.0;
  double x = 0.0;
};

struct GridSpec {
  std::string name;
  std::vector<NodeSpec> nodes;
  std::vector<EdgeSpec> lines;
  std::vector<EdgeSpec> switches;
  NodeId slack_node = 0;
  double v_min = 0.0; // squared-voltage bounds
  double v_max = 0.0;
  double big_m = 0.0;

  std::size_t num_nodes() const { return nodes.size(); }
  std::size_t num_lines() const { return lines.size(); }
  std::size_t num_switches() const { return switches.size(); }

  /// Stable hash of (N, M, M_sw, arc list); identifies the graph a model was trained on.
  std::uint64_t signature() const {
    Fnv1a h;
    const std::uint64_t dims[3] = {nodes.size(), lines.size(), switches.size()};
    h.add(dims);
    for (const auto* arcs : {&lines, &switches}) {
      for (const auto& e : *arcs) {
        const std::uint64_t ends[2] = {e.from, e.to};
        h.add(ends);
      }
    }
    return h.value();
  }

  /// Nodes other than the slack whose nominal active generation cap is positive.
  std::vector<NodeId> pv_nodes() const {
    std::vector<NodeId> out;
    for (const auto& n : nodes) {
      if (n.id != slack_node && n.p_gen_max > 0.0) out.push_back(n.id);
    }
    return out;
  }

  double peak_load() const {
    double total = 0.0;
    for (const auto& n : nodes) total += n.p_load_nominal;
    return total;
  }
};

/// Loads and generation bounds of one problem instance.
struct LoadScenario {
  std::size_t id = 0;
  std::vector<double> p_load;
  std::vector<double> q_load;
  std::vector<double> p_gen_min;
  std::vector<double> p_gen_max;
  std::vector<double> q_gen_min;
  std::vector<double> q_gen_max;
};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

struct Dataset {
  std::uint64_t grid_signature = 0;
  std::vector<LoadScenario> scenarios;
  DatasetSplit split;
  std::uint64_t seed = 0;

  std::vector<LoadScenario> select(std::span<const std::size_t> indices) const {
    std::vector<LoadScenario> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(scenarios.at(i));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Union-find used by the radiality and connectivity checks.

class DisjointSets {
public:
  explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0), components_(n) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }

  /// Returns false if a and b were already connected.
  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
    --components_;
    return true;
  }

  std::size_t components() const { return components_; }

private:
  std::vector<std::size_t> parent_;
  std::vector<unsigned> rank_;
  std::size_t components_;
};

// ---------------------------------------------------------------------------
// Validation

inline void validate(const GridSpec& grid) {
  const std::size_t n = grid.nodes.size();
  if (n == 0) throw ValidationError("grid has no nodes");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = grid.nodes[i];
    if (node.id != i) throw ValidationError("node ids must be 0..N-1 and unique");
    if (!(node.p_gen_min <= node.p_gen_max) || !(node.q_gen_min <= node.q_gen_max)) {
      throw ValidationError("generation bounds inverted at node " + std::to_string(i));
    }
    for (double v : {node.p_load_nominal, node.q_load_nominal, node.p_gen_min, node.p_gen_max,
                     node.q_gen_min, node.q_gen_max}) {
      if (!std::isfinite(v)) throw ValidationError("non-finite value at node " + std::to_string(i));
    }
  }
  if (grid.slack_node >= n) throw ValidationError("slack node does not exist");
  if (!(grid.v_min < grid.v_max)) throw ValidationError("v_min must be below v_max");
  if (!(grid.v_min <= 1.0 && 1.0 <= grid.v_max)) {
    throw ValidationError("slack voltage 1 lies outside [v_min, v_max]");
  }
  if (!(grid.big_m > 0.0)) throw ValidationError("big_m must be positive");

  DisjointSets sets(n);
  auto check_arcs = [&](const std::vector<EdgeSpec>& arcs, const char* kind) {
    for (const auto& e : arcs) {
      if (e.from >= n || e.to >= n) {
        throw ValidationError(std::string(kind) + " references a missing node");
      }
      if (e.from == e.to) throw ValidationError(std::string(kind) + " is a self-loop");
      if (!(e.x > 0.0)) throw ValidationError("nonpositive reactance");
      if (!(e.r >= 0.0)) throw ValidationError("negative resistance");
      sets.unite(e.from, e.to);
    }
  };
  check_arcs(grid.lines, "line");
  check_arcs(grid.switches, "switch");
  if (sets.components() != 1) throw ValidationError("disconnected grid");
}

// ---------------------------------------------------------------------------
// Grid file format
//
//   [grid] name=<text> slack=<id> vmin=<f> vmax=<f> bigm=<f>
//   [node] id=<int> pl=<f> ql=<f> pgmin=<f> pgmax=<f> qgmin=<f> qgmax=<f>
//   [line] from=<int> to=<int> r=<f> x=<f>
//   [switch] from=<int> to=<int> r=<f> x=<f>
//
// One record per line; '#' starts a comment.

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ParseError(where + ": expected a number, got '" + text + "'");
  }
  if (used != text.size()) throw ParseError(where + ": trailing characters in '" + text + "'");
  return value;
}

inline std::size_t parse_index(const std::string& text, const std::string& where) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
    throw ParseError(where + ": expected a non-negative integer, got '" + text + "'");
  }
  return static_cast<std::size_t>(std::stoull(text));
}

class Record {
public:
  Record(std::map<std::string, std::string> fields, std::string where)
      : fields_(std::move(fields)), where_(std::move(where)) {}

  const std::string& text(const std::string& key) const {
    auto it = fields_.find(key);
    if (it == fields_.end()) throw ParseError(where_ + ": missing field '" + key + "'");
    return it->second;
  }
  double number(const std::string& key) const { return parse_double(text(key), where_); }
  std::size_t index(const std::string& key) const { return parse_index(text(key), where_); }

private:
  std::map<std::string, std::string> fields_;
  std::string where_;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

} // namespace detail

inline GridSpec parse_grid(std::string_view text, const std::string& source = "<grid>") {
  GridSpec grid;
  bool have_header = false;
  std::vector<NodeSpec> nodes;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line.front() != '[') throw ParseError(where + ": expected a [record] tag");
    const auto close = line.find(']');
    if (close == std::string::npos) throw ParseError(where + ": unterminated record tag");
    const std::string tag = line.substr(1, close - 1);

    std::map<std::string, std::string> fields;
    std::istringstream tokens(line.substr(close + 1));
    std::string token;
    while (tokens >> token) {
      const auto eq = token.find('=');
      if (eq == std::string::npos || eq == 0) throw ParseError(where + ": malformed field '" + token + "'");
      if (!fields.emplace(token.substr(0, eq), token.substr(eq + 1)).second) {
        throw ParseError(where + ": duplicate field '" + token.substr(0, eq) + "'");
      }
    }
    const detail::Record rec(std::move(fields), where);

    if (tag == "grid") {
      if (have_header) throw ParseError(where + ": duplicate [grid] record");
      have_header = true;
      grid.name = rec.text("name");
      grid.slack_node = rec.index("slack");
      grid.v_min = rec.number("vmin");
      grid.v_max = rec.number("vmax");
      grid.big_m = rec.number("bigm");
    } else if (tag == "node") {
      NodeSpec node;
      node.id = rec.index("id");
      node.p_load_nominal = rec.number("pl");
      node.q_load_nominal = rec.number("ql");
      node.p_gen_min = rec.number("pgmin");
      node.p_gen_max = rec.number("pgmax");
      node.q_gen_min = rec.number("qgmin");
      node.q_gen_max = rec.number("qgmax");
      nodes.push_back(node);
    } else if (tag == "line" || tag == "switch") {
      EdgeSpec e{rec.index("from"), rec.index("to"), rec.number("r"), rec.number("x")};
      (tag == "line" ? grid.lines : grid.switches).push_back(e);
    } else {
      throw ParseError(where + ": unknown record [" + tag + "]");
    }
  }
  if (!have_header) throw ParseError(source + ": missing [grid] record");

  std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  grid.nodes = std::move(nodes);
  validate(grid);
  return grid;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline GridSpec load_grid(const std::string& path) { return parse_grid(read_text_file(path), path); }

inline std::string format_grid(const GridSpec& grid) {
  using detail::format_double;
  std::ostringstream os;
  os << "[grid] name=" << grid.name << " slack=" << grid.slack_node << " vmin=" << format_double(grid.v_min)
     << " vmax=" << format_double(grid.v_max) << " bigm=" << format_double(grid.big_m) << "\n";
  for (const auto& n : grid.nodes) {
    os << "[node] id=" << n.id << " pl=" << format_double(n.p_load_nominal)
       << " ql=" << format_double(n.q_load_nominal) << " pgmin=" << format_double(n.p_gen_min)
       << " pgmax=" << format_double(n.p_gen_max) << " qgmin=" << format_double(n.q_gen_min)
       << " qgmax=" << format_double(n.q_gen_max) << "\n";
  }
  for (const auto& e : grid.lines) {
    os << "[line] from=" << e.from << " to=" << e.to << " r=" << format_double(e.r) << " x=" << format_double(e.x)
       << "\n";
  }
  for (const auto& e : grid.switches) {
    os << "[switch] from=" << e.from << " to=" << e.to << " r=" << format_double(e.r)
       << " x=" << format_double(e.x) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Topology utilities

/// Number of switches that must be closed for a spanning tree: N - 1 - M.
inline std::size_t required_closed_count(const GridSpec& grid) {
  const auto n = static_cast<long long>(grid.num_nodes());
  const auto m = static_cast<long long>(grid.num_lines());
  const long long s = n - 1 - m;
  if (s < 0) throw ValidationError("grid has more lines than a spanning tree allows");
  if (s > static_cast<long long>(grid.num_switches())) {
    throw ValidationError("grid has too few switches to become radial");
  }
  return static_cast<std::size_t>(s);
}

/// True iff the lines plus the switches with y != 0 form a spanning tree.
inline bool is_radial(const GridSpec& grid, std::span<const double> y) {
  if (y.size() != grid.num_switches()) return false;
  const std::size_t n = grid.num_nodes();
  std::size_t edges = grid.num_lines();
  DisjointSets sets(n);
  for (const auto& e : grid.lines) {
    if (!sets.unite(e.from, e.to)) return false;
  }
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (y[k] == 0.0) continue;
    ++edges;
    if (!sets.unite(grid.switches[k].from, grid.switches[k].to)) return false;
  }
  return edges + 1 == n && sets.components() == 1;
}

/// |delta_A(j)|: number of lines (switches excluded) incident to the node.
inline std::size_t fixed_degree(const GridSpec& grid, NodeId node) {
  std::size_t deg = 0;
  for (const auto& e : grid.lines) deg += (e.from == node) + (e.to == node);
  return deg;
}

// ---------------------------------------------------------------------------
// Scenarios and datasets

inline LoadScenario nominal_scenario(const GridSpec& grid, std::size_t id = 0) {
  LoadScenario s;
  s.id = id;
  for (const auto& n : grid.nodes) {
    s.p_load.push_back(n.p_load_nominal);
    s.q_load.push_back(n.q_load_nominal);
    s.p_gen_min.push_back(n.p_gen_min);
    s.p_gen_max.push_back(n.p_gen_max);
    s.q_gen_min.push_back(n.q_gen_min);
    s.q_gen_max.push_back(n.q_gen_max);
  }
  return s;
}

inline void check_scenario(const GridSpec& grid, const LoadScenario& s) {
  const auto n = grid.num_nodes();
  for (const auto* v : {&s.p_load, &s.q_load, &s.p_gen_min, &s.p_gen_max, &s.q_gen_min, &s.q_gen_max}) {
    if (v->size() != n) throw ValidationError("scenario vector length differs from node count");
  }
}

/// Deterministic shuffled 80/10/10 split; rounding goes to the training set.
inline DatasetSplit split_indices(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0x5b1175u));
  shuffle(order, rng);
  const std::size_t n_val = count / 10;
  const std::size_t n_test = count / 10;
  const std::size_t n_train = count - n_val - n_test;
  DatasetSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                          order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return split;
}

inline DatasetSplit split_dataset(const Dataset& ds) {
  if (ds.scenarios.empty()) throw ValidationError("cannot split an empty dataset");
  return split_indices(ds.scenarios.size(), ds.seed);
}

/// Each nominal node load (p and q together) is scaled by an independent
/// uniform factor in [1 - load_band, 1 + load_band]. PV nodes get
/// p_gen_max = pv_penetration * peak_load * availability / (#PV nodes), with one
/// availability factor in [0, 1] per scenario, and p_gen_min = 0.
inline Dataset generate_scenarios(const GridSpec& grid, std::size_t count, std::uint64_t seed,
                                  double load_band, double pv_penetration) {
  if (count == 0) throw ValidationError("scenario count must be at least 1");
  if (!(load_band >= 0.0 && load_band < 1.0)) throw ValidationError("load_band must lie in [0, 1)");
  if (!(pv_penetration >= 0.0 && pv_penetration <= 1.0)) {
    throw ValidationError("pv_penetration must lie in [0, 1]");
  }
  Dataset ds;
  ds.grid_signature = grid.signature();
  ds.seed = seed;
  const auto pv = grid.pv_nodes();
  const double pv_capacity = pv.empty() ? 0.0 : pv_penetration * grid.peak_load() / static_cast<double>(pv.size());
  Rng rng(seed);
  ds.scenarios.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    LoadScenario s = nominal_scenario(grid, k);
    for (std::size_t i = 0; i < grid.num_nodes(); ++i) {
      const double factor = uniform(rng, 1.0 - load_band, 1.0 + load_band);
      s.p_load[i] *= factor;
      s.q_load[i] *= factor;
    }
    const double availability = uniform01(rng);
    for (auto node : pv) {
      s.p_gen_min[node] = 0.0;
      s.p_gen_max[node] = pv_capacity * availability;
    }
    ds.scenarios.push_back(std::move(s));
  }
  ds.split = split_dataset(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset CSV: header, then one row per scenario:
//   scenario, p_load[0..N), q_load[0..N), p_gen_max override for each PV node.

inline std::string format_dataset_csv(const GridSpec& grid, const Dataset& ds) {
  using detail::format_double;
  const auto pv = grid.pv_nodes();
  std::ostringstream os;
  os << "scenario";
  for (std::size_t i = 0; i < grid.num_nodes(); ++i) os << ",pl_" << i;
  for (std::size_t i = 0; i < grid.num_nodes(); ++i) os << ",ql_" << i;
  for (auto node : pv) os << ",pgmax_" << node;
  os << "\n";
  for (const auto& s : ds.scenarios) {
    os << s.id;
    for (double v : s.p_load) os << "," << format_double(v);
    for (double v : s.q_load) os << "," << format_double(v);
    for (auto node : pv) os << "," << format_double(s.p_gen_max[node]);
    os << "\n";
  }
  return os.str();
}

inline std::vector<std::string> split_csv_row(const std::string& row) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(row);
  while (std::getline(in, cell, ',')) cells.push_back(detail::trim(cell));
  if (!row.empty() && row.back() == ',') cells.emplace_back();
  return cells;
}

inline Dataset parse_dataset_csv(const GridSpec& grid, std::string_view text, std::uint64_t split_seed,
                                 const std::string& source = "<dataset>") {
  std::istringstream in{std::string(text)};
  std::string row;
  if (!std::getline(in, row)) throw ParseError(source + ": empty dataset file");
  const auto header = split_csv_row(detail::trim(row));
  const std::size_t n = grid.num_nodes();
  if (header.size() < 1 + 2 * n || header[0] != "scenario") {
    throw ParseError(source + ": header does not match a " + std::to_string(n) + "-node grid");
  }
  std::vector<NodeId> overrides;
  for (std::size_t c = 1 + 2 * n; c < header.size(); ++c) {
    if (header[c].rfind("pgmax_", 0) != 0) throw ParseError(source + ": unexpected column '" + header[c] + "'");
    const auto node = detail::parse_index(header[c].substr(6), source);
    if (node >= n) throw ParseError(source + ": override column for missing node");
    overrides.push_back(node);
  }
  Dataset ds;
  ds.grid_signature = grid.signature();
  ds.seed = split_seed;
  std::size_t line_no = 1;
  while (std::getline(in, row)) {
    ++line_no;
    row = detail::trim(row);
    if (row.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto cells = split_csv_row(row);
    if (cells.size() != header.size()) throw ParseError(where + ": wrong number of columns");
    LoadScenario s = nominal_scenario(grid, detail::parse_index(cells[0], where));
    for (std::size_t i = 0; i < n; ++i) {
      s.p_load[i] = detail::parse_double(cells[1 + i], where);
      s.q_load[i] = detail::parse_double(cells[1 + n + i], where);
    }
    for (std::size_t k = 0; k < overrides.size(); ++k) {
      s.p_gen_min[overrides[k]] = 0.0;
      s.p_gen_max[overrides[k]] = detail::parse_double(cells[1 + 2 * n + k], where);
    }
    ds.scenarios.push_back(std::move(s));
  }
  if (ds.scenarios.empty()) throw ParseError(source + ": dataset has no rows");
  ds.split = split_dataset(ds);
  return ds;
}

inline Dataset load_dataset(const GridSpec& grid, const std::string& path, std::uint64_t split_seed) {
  return parse_dataset_csv(grid, read_text_file(path), split_seed, path);
}

// ---------------------------------------------------------------------------
// Relabeling (node permutations), used by equivariance checks.

/// perm[old_id] = new_id. Arc order is preserved.
inline GridSpec relabel_nodes(const GridSpec& grid, std::span<const NodeId> perm) {
  GridSpec out = grid;
  for (const auto& n : grid.nodes) {
    NodeSpec moved = n;
    moved.id = perm[n.id];
    out.nodes[perm[n.id]] = moved;
  }
  for (auto* arcs : {&out.lines, &out.switches}) {
    for (auto& e : *arcs) {
      e.from = perm[e.from];
      e.to = perm[e.to];
    }
  }
  out.slack_node = perm[grid.slack_node];
  validate(out);
  return out;
}

inline LoadScenario relabel_scenario(const LoadScenario& s, std::span<const NodeId> perm) {
  LoadScenario out = s;
  auto move = [&](const std::vector<double>& src, std::vector<double>& dst) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[perm[i]] = src[i];
  };
  move(s.p_load, out.p_load);
  move(s.q_load, out.q_load);
  move(s.p_gen_min, out.p_gen_min);
  move(s.p_gen_max, out.p_gen_max);
  move(s.q_gen_min, out.q_gen_min);
  move(s.q_gen_max, out.q_gen_max);
  return out;
}

} // namespace graphyr

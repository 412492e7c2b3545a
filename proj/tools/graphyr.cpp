// graphyr: command-line driver for dataset generation, the enumeration
// oracle, committee training, evaluation and report merging.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "graphyr/grid.hpp"
#include "graphyr/io.hpp"
#include "graphyr/model.hpp"
#include "graphyr/oracle.hpp"
#include "graphyr/train.hpp"

namespace fs = std::filesystem;
using namespace graphyr;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kValidation = 2, kInfeasible = 3, kDivergence = 4 };

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<LoadScenario> select_split(const Dataset& ds, const std::string& split) {
  if (split == "all") return ds.scenarios;
  if (split == "train") return ds.select(ds.split.train);
  if (split == "validation") return ds.select(ds.split.validation);
  if (split == "test") return ds.select(ds.split.test);
  throw ValidationError("unknown split '" + split + "' (expected all, train, validation or test)");
}

OracleTable load_oracle(const GridSpec& grid, const std::string& path) {
  return parse_oracle_csv(grid, read_text_file(path), path);
}

// ---------------------------------------------------------------------------

struct GenDataOptions {
  std::string grid, out;
  std::size_t count = 100;
  std::uint64_t seed = 0;
  double band = 0.1;
  double pv = 0.25;
};

int run_gen_data(const GenDataOptions& o) {
  const auto t0 = Clock::now();
  const auto grid = load_grid(o.grid);
  const auto ds = generate_scenarios(grid, o.count, o.seed, o.band, o.pv);
  io::write_atomic(o.out, format_dataset_csv(grid, ds));
  io::RunManifest m;
  m.command = "gen-data";
  m.seed = o.seed;
  m.config = {{"count", o.count}, {"band", o.band}, {"pv", o.pv}};
  m.inputs = {o.grid};
  m.outputs = {o.out};
  m.wall_clock_seconds = seconds_since(t0);
  io::write_manifest(o.out, m);
  std::cout << "wrote " << ds.scenarios.size() << " scenarios to " << o.out << "\n";
  return kOk;
}

struct OracleOptions {
  std::string grid, dataset, split = "all", out;
  std::uint64_t split_seed = 0;
  std::size_t threads = 1;
};

int run_oracle(const OracleOptions& o) {
  const auto t0 = Clock::now();
  const auto grid = load_grid(o.grid);
  const auto ds = load_dataset(grid, o.dataset, o.split_seed);
  const auto scenarios = select_split(ds, o.split);
  const auto table = solve_all(grid, scenarios, o.threads);
  io::write_atomic(o.out, format_oracle_csv(grid, table));
  std::size_t infeasible = 0;
  for (const auto& r : table.records) infeasible += r.solution.status != SolveStatus::optimal;
  io::RunManifest m;
  m.command = "oracle";
  m.seed = o.split_seed;
  m.config = {{"split", o.split}, {"split_seed", o.split_seed}, {"threads", o.threads}};
  m.inputs = {o.grid, o.dataset};
  m.outputs = {o.out};
  m.wall_clock_seconds = seconds_since(t0);
  io::write_manifest(o.out, m);
  std::cout << "solved " << table.records.size() << " scenarios (" << infeasible << " infeasible) -> " << o.out
            << "\n";
  return kOk;
}

struct TrainOptions {
  std::vector<std::string> grids, datasets, oracles;
  std::string out_dir;
  std::uint64_t split_seed = 0;
  TrainConfig train;
  std::string rounding = "phyr";
  std::string loss = "unsupervised";
};

int run_train(TrainOptions o) {
  const auto t0 = Clock::now();
  if (o.grids.size() != o.datasets.size()) throw ValidationError("--grid and --dataset must be given in pairs");
  if (!o.oracles.empty() && o.oracles.size() != o.grids.size()) {
    throw ValidationError("--oracle must be given once per grid when used");
  }
  o.train.model.rounding = parse_rounding_mode(o.rounding);
  o.train.model.loss = parse_loss_mode(o.loss);
  o.train.validate();
  const bool needs_targets = o.train.model.loss != LossMode::unsupervised;
  if (needs_targets && o.oracles.empty()) {
    throw ValidationError("loss mode " + o.loss + " needs an oracle cache (--oracle) for every grid");
  }
  std::vector<GridData> data;
  std::vector<GridSpec> grids;
  for (std::size_t g = 0; g < o.grids.size(); ++g) {
    GridData d;
    d.grid = load_grid(o.grids[g]);
    const auto ds = load_dataset(d.grid, o.datasets[g], o.split_seed);
    d.train = ds.select(ds.split.train);
    d.validation = ds.select(ds.split.validation);
    if (needs_targets) attach_targets(d, load_oracle(d.grid, o.oracles[g]));
    grids.push_back(d.grid);
    data.push_back(std::move(d));
  }
  auto result = train(data, o.train);
  fs::create_directories(o.out_dir);
  nlohmann::ordered_json outputs = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < result.committee.size(); ++k) {
    const auto path = fs::path(o.out_dir) / ("member_" + std::to_string(k) + ".ckpt");
    io::write_atomic(path, format_checkpoint(result.committee[k], grids));
    outputs.push_back(path.string());
  }
  const auto curve_path = fs::path(o.out_dir) / "loss_curve.csv";
  io::write_atomic(curve_path, format_loss_curve_csv(result.curve));
  outputs.push_back(curve_path.string());

  io::RunManifest m;
  m.command = "train";
  m.seed = o.train.seed;
  const auto& t = o.train;
  m.config = {{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr", t.learning_rate},
              {"committee", t.committee},
              {"validation_every", t.validation_every},
              {"split_seed", o.split_seed},
              {"model", format_config(t.model)}};
  m.inputs = nlohmann::ordered_json::array();
  for (std::size_t g = 0; g < o.grids.size(); ++g) {
    m.inputs.push_back(o.grids[g]);
    m.inputs.push_back(o.datasets[g]);
    if (!o.oracles.empty()) m.inputs.push_back(o.oracles[g]);
  }
  m.outputs = outputs;
  m.wall_clock_seconds = seconds_since(t0);
  io::write_atomic(fs::path(o.out_dir) / "manifest.json", m.dump());

  for (std::size_t k = 0; k < result.committee.size(); ++k) {
    double first = 0, last = 0;
    for (const auto& p : result.curve) {
      if (p.member != k) continue;
      if (p.epoch == 1) first = p.train_loss;
      last = p.train_loss;
    }
    std::cout << "member " << k << ": train loss " << first << " -> " << last << "\n";
  }
  return kOk;
}

std::vector<ModelParams> load_committee(const std::string& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".ckpt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("no checkpoints (*.ckpt) in " + dir);
  std::vector<ModelParams> committee;
  for (const auto& f : files) committee.push_back(parse_checkpoint(read_text_file(f.string())));
  return committee;
}

struct EvalOptions {
  std::string checkpoints, grid, dataset, split = "test", oracle, out, label;
  std::uint64_t split_seed = 0;
  std::vector<std::size_t> force_open, force_closed;
  double epsilon = kDefaultEpsilon;
  std::size_t batch_size = 200;
  std::size_t threads = 1;
};

int run_eval(const EvalOptions& o) {
  const auto t0 = Clock::now();
  const auto grid = load_grid(o.grid);
  auto committee = load_committee(o.checkpoints);
  for (const auto& m : committee) require_trained_on(m, grid);
  const auto ds = load_dataset(grid, o.dataset, o.split_seed);
  const auto scenarios = select_split(ds, o.split);
  ForcedSwitches forced = no_forcing(grid);
  for (auto k : o.force_open) {
    if (k >= forced.size()) throw ValidationError("--force-open index " + std::to_string(k) + " out of range");
    forced[k] = SwitchClamp::open;
  }
  for (auto k : o.force_closed) {
    if (k >= forced.size()) throw ValidationError("--force-closed index " + std::to_string(k) + " out of range");
    if (forced[k] == SwitchClamp::open) throw ValidationError("switch " + std::to_string(k) + " forced both ways");
    forced[k] = SwitchClamp::closed;
  }
  std::optional<OracleTable> table;
  if (!o.oracle.empty()) table = load_oracle(grid, o.oracle);
  auto report = evaluate(committee, grid, scenarios, table ? &*table : nullptr, forced, o.epsilon, o.batch_size,
                         o.threads);
  report.label = o.label.empty() ? fs::path(o.out).stem().string() : o.label;
  io::write_atomic(o.out, format_report_csv(report));
  auto timing = fs::path(o.out);
  timing.replace_extension(".timing.csv");
  io::write_atomic(timing, format_timing_csv(report, o.batch_size));

  io::RunManifest m;
  m.command = "eval";
  m.seed = o.split_seed;
  m.config = {{"split", o.split},           {"split_seed", o.split_seed}, {"epsilon", o.epsilon},
              {"batch_size", o.batch_size}, {"force_open", o.force_open}, {"force_closed", o.force_closed},
              {"label", report.label}};
  m.inputs = {o.checkpoints, o.grid, o.dataset};
  if (!o.oracle.empty()) m.inputs.push_back(o.oracle);
  m.outputs = {o.out, timing.string()};
  m.wall_clock_seconds = seconds_since(t0);
  io::write_manifest(o.out, m);
  const auto& a = report.aggregate;
  std::cout << report.label << ": dispatch " << a.dispatch_error << ", voltage " << a.voltage_error << ", topology "
            << a.topology_error << ", ineq mean " << a.ineq_mean << ", max " << a.ineq_max << ", num>eps "
            << a.num_ineq_viol << "\n";
  return kOk;
}

struct ReportOptions {
  std::vector<std::string> inputs;
  std::string out;
};

int run_report(const ReportOptions& o) {
  const auto t0 = Clock::now();
  std::vector<std::pair<std::string, ScenarioMetrics>> entries;
  for (const auto& spec : o.inputs) {
    const auto eq = spec.find('=');
    const std::string label = eq == std::string::npos ? fs::path(spec).stem().string() : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    entries.emplace_back(label, parse_report_aggregate(read_text_file(path), path));
  }
  io::write_atomic(o.out, format_comparison_csv(entries));
  io::RunManifest m;
  m.command = "report";
  m.inputs = o.inputs;
  m.outputs = {o.out};
  m.wall_clock_seconds = seconds_since(t0);
  io::write_manifest(o.out, m);
  std::cout << "merged " << entries.size() << " reports into " << o.out << "\n";
  return kOk;
}


/// Subcommand configs are not read by the parser itself, so a `--config FILE`
/// after the subcommand is expanded in place into `--key value` arguments
/// placed directly after the subcommand name. Keys also given on the command
/// line are dropped so the command-line value wins.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  if (args.size() < 2) return args;
  std::vector<std::string> rest{args[0], args[1]};
  std::vector<std::string> files;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      files.push_back(args[++i]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      files.push_back(args[i].substr(9));
    } else {
      rest.push_back(args[i]);
    }
  }
  auto given = [&](const std::string& flag) {
    return std::any_of(rest.begin() + 2, rest.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> from_file;
  for (const auto& file : files) {
    std::ifstream in(file);
    if (!in) throw CLI::FileError::Missing(file);
    for (const auto& item : CLI::ConfigINI().from_config(in)) {
      if (item.name == "++" || item.name == "--" || given("--" + item.name)) continue;
      for (const auto& value : item.inputs) {
        from_file.push_back("--" + item.name);
        from_file.push_back(value);
      }
    }
  }
  rest.insert(rest.begin() + 2, from_file.begin(), from_file.end());
  return rest;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"GraPhyR distribution-grid reconfiguration toolkit"};
  app.require_subcommand(1);
  std::string config_file; // expanded before parsing

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a perturbed-load scenario dataset");
  gen_cmd->add_option("--config", config_file, "INI file of option defaults");
  gen_cmd->add_option("--grid", gen.grid, "Grid file")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--count", gen.count, "Number of scenarios")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--band", gen.band, "Multiplicative load band")->capture_default_str();
  gen_cmd->add_option("--pv", gen.pv, "PV penetration (fraction of peak load)")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output dataset CSV")->required();

  OracleOptions orc;
  auto* orc_cmd = app.add_subcommand("oracle", "Solve scenarios exactly by topology enumeration");
  orc_cmd->add_option("--config", config_file, "INI file of option defaults");
  orc_cmd->add_option("--grid", orc.grid, "Grid file")->required()->check(CLI::ExistingFile);
  orc_cmd->add_option("--dataset", orc.dataset, "Dataset CSV")->required()->check(CLI::ExistingFile);
  orc_cmd->add_option("--split", orc.split, "all, train, validation or test")->capture_default_str();
  orc_cmd->add_option("--split-seed", orc.split_seed, "Seed of the 80/10/10 split")->capture_default_str();
  orc_cmd->add_option("--threads", orc.threads, "Worker threads")->capture_default_str();
  orc_cmd->add_option("--out", orc.out, "Output oracle CSV")->required();

  TrainOptions tr;
  auto* tr_cmd = app.add_subcommand("train", "Train a committee of models");
  tr_cmd->add_option("--config", config_file, "INI file of option defaults");
  tr_cmd->add_option("--grid", tr.grids, "Grid file (repeat for multi-grid training)")->required();
  tr_cmd->add_option("--dataset", tr.datasets, "Dataset CSV, one per grid")->required();
  tr_cmd->add_option("--oracle", tr.oracles, "Oracle CSV, one per grid (semi/supervised)");
  tr_cmd->add_option("--out-dir", tr.out_dir, "Checkpoint directory")->required();
  tr_cmd->add_option("--split-seed", tr.split_seed, "Seed of the 80/10/10 split")->capture_default_str();
  tr_cmd->add_option("--epochs", tr.train.epochs)->capture_default_str();
  tr_cmd->add_option("--batch-size", tr.train.batch_size)->capture_default_str();
  tr_cmd->add_option("--lr", tr.train.learning_rate)->capture_default_str();
  tr_cmd->add_option("--committee", tr.train.committee)->capture_default_str();
  tr_cmd->add_option("--seed", tr.train.seed)->capture_default_str();
  tr_cmd->add_option("--validation-every", tr.train.validation_every)->capture_default_str();
  tr_cmd->add_option("--threads", tr.train.threads)->capture_default_str();
  tr_cmd->add_option("--layers", tr.train.model.layers)->capture_default_str();
  tr_cmd->add_option("--hidden", tr.train.model.hidden)->capture_default_str();
  tr_cmd->add_option("--l-hidden", tr.train.model.l_hidden)->capture_default_str();
  tr_cmd->add_option("--s-hidden", tr.train.model.s_hidden)->capture_default_str();
  tr_cmd->add_option("--dropout", tr.train.model.dropout)->capture_default_str();
  tr_cmd->add_option("--lambda", tr.train.model.lambda)->capture_default_str();
  tr_cmd->add_option("--semi-weight", tr.train.model.semi_weight)->capture_default_str();
  tr_cmd->add_option("--insi-tau", tr.train.model.insi_tau)->capture_default_str();
  tr_cmd->add_option("--insi-mu", tr.train.model.insi_mu)->capture_default_str();
  tr_cmd->add_option("--mode", tr.rounding, "phyr or insi")->capture_default_str();
  tr_cmd->add_option("--loss", tr.loss, "unsupervised, semi or supervised")->capture_default_str();

  EvalOptions ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a committee against the oracle");
  ev_cmd->add_option("--config", config_file, "INI file of option defaults");
  ev_cmd->add_option("--checkpoints", ev.checkpoints, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev_cmd->add_option("--grid", ev.grid, "Grid file")->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("--dataset", ev.dataset, "Dataset CSV")->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("--split", ev.split, "all, train, validation or test")->capture_default_str();
  ev_cmd->add_option("--split-seed", ev.split_seed, "Seed of the 80/10/10 split")->capture_default_str();
  ev_cmd->add_option("--oracle", ev.oracle, "Oracle CSV (rows solved on demand otherwise)");
  ev_cmd->add_option("--force-open", ev.force_open, "Switch index forced open (repeatable)");
  ev_cmd->add_option("--force-closed", ev.force_closed, "Switch index forced closed (repeatable)");
  ev_cmd->add_option("--epsilon", ev.epsilon, "Violation count threshold")->capture_default_str();
  ev_cmd->add_option("--batch-size", ev.batch_size)->capture_default_str();
  ev_cmd->add_option("--threads", ev.threads)->capture_default_str();
  ev_cmd->add_option("--label", ev.label, "Report label");
  ev_cmd->add_option("--out", ev.out, "Output report CSV")->required();

  ReportOptions rp;
  auto* rp_cmd = app.add_subcommand("report", "Merge eval reports into one comparison table");
  rp_cmd->add_option("--input", rp.inputs, "[label=]report.csv (repeatable)")->required();
  rp_cmd->add_option("--out", rp.out, "Output comparison CSV")->required();

  try {
    auto args = expand_config(argc, argv);
    args.erase(args.begin());
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*orc_cmd) return run_oracle(orc);
    if (*tr_cmd) return run_train(tr);
    if (*ev_cmd) return run_eval(ev);
    if (*rp_cmd) return run_report(rp);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kValidation;
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}

#pragma once

// Subcommands of the `vrec` tool. run_cli returns the process exit code:
// 0 success, 2 configuration or usage error, 3 runtime failure.

#include <csignal>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vrec/vrec.hpp"

namespace vrec::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = -1;
};

inline RunConfig load_run_config(const CommonOptions& o) {
  nlohmann::json doc = o.config_path.empty() ? nlohmann::json::object() : read_config_file(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.threads >= 0) doc["threads"] = o.threads;
  return run_config_from_json(doc);
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("short write to " + path.string());
}

inline std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("bad number '" + item + "' in list '" + text + "'");
    }
  }
  return out;
}

// -------------------------------------------------------------------------------------------

inline int cmd_train_versions(const RunConfig& cfg, int count, bool overwrite, std::ostream& out) {
  if (count < 1) throw ConfigError("train-versions: --count must be at least 1");
  const std::filesystem::path root = cfg.paths.store;
  if (std::filesystem::exists(root / "index.json")) {
    if (!overwrite) throw ConfigError("store '" + root.string() + "' already exists; pass --overwrite to replace it");
    std::filesystem::remove_all(root);
  }
  const auto task = make_task(cfg.task, cfg.task_seed());
  VersionStore store(root);
  Rng rng(cfg.store_seed());
  const auto& s = cfg.scenario;
  for (int i = 0; i < count; ++i) retire_and_replace(store, task, s.sigma0, cfg.resolved_train(), rng, s.hidden_per_label);
  write_json_file(root / "run_config.json", to_json(cfg));

  out << "version  status    benign_acc  final_loss\n";
  double sum = 0.0;
  double sq = 0.0;
  for (const auto& v : store.versions()) {
    out << std::setw(7) << v.id << "  " << std::left << std::setw(8) << to_string(v.status) << std::right << "  "
        << std::fixed << std::setprecision(4) << std::setw(10) << v.benign_accuracy << "  " << std::setw(10)
        << v.final_train_loss << '\n';
    sum += v.benign_accuracy;
    sq += v.benign_accuracy * v.benign_accuracy;
  }
  const double n = static_cast<double>(store.versions().size());
  const double mean = sum / n;
  out << "mean " << mean << "  stddev " << std::sqrt(std::max(0.0, sq / n - mean * mean)) << '\n';
  out.unsetf(std::ios::floatfield);
  return kExitOk;
}

inline int cmd_breach_game(const RunConfig& cfg, const std::string& fprs, std::ostream& out) {
  const auto task = make_task(cfg.task, cfg.task_seed());
  const auto scenario = cfg.resolved_scenario();
  const auto config_json = to_json(cfg);
  if (fprs.empty()) {
    const auto result = run_breach_game(task, scenario);
    emit_report(result, cfg.paths.report, config_json);
    for (const auto& t : result.trials) out << "trial " << t.trial << " nbr " << t.nbr << '\n';
    out << "mean nbr " << result.mean_nbr() << '\n';
    out << "report " << cfg.paths.report << ".csv, " << cfg.paths.report << ".json\n";
    return kExitOk;
  }
  const auto list = parse_list(fprs);
  for (std::size_t i = 0; i < list.size(); ++i) {
    if (!(list[i] >= 0.0 && list[i] < 0.5) || (i > 0 && !(list[i] > list[i - 1]))) {
      throw ConfigError("--fprs must be ascending values in [0, 0.5)");
    }
  }
  const auto sweep = fpr_sweep(task, scenario, list);
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < sweep.fprs.size(); ++i) {
    const auto nbrs = sweep.games[i].nbrs();
    out << "fpr " << sweep.fprs[i] << " nbr";
    for (int n : nbrs) out << ' ' << n;
    out << "  mean " << sweep.games[i].mean_nbr() << '\n';
    rows.push_back({{"fpr", sweep.fprs[i]}, {"nbr_per_trial", nbrs}, {"mean_nbr", sweep.games[i].mean_nbr()}});
  }
  const std::string path = cfg.paths.report + ".fpr.json";
  write_json_file(path, {{"sweep", rows}, {"config", config_json}});
  out << "report " << path << '\n';
  return kExitOk;
}

inline int cmd_attack(const RunConfig& cfg, int version_id, int count, std::ostream& out) {
  VersionStore store(cfg.paths.store);
  if (store.empty()) throw ConfigError("store '" + cfg.paths.store + "' is empty; run train-versions first");
  if (version_id > 0 && std::none_of(store.versions().begin(), store.versions().end(),
                                     [&](const ModelVersion& v) { return v.id == version_id; })) {
    throw ConfigError("no version " + std::to_string(version_id) + " in store");
  }
  const auto& victim = version_id > 0 ? store.get(version_id) : *store.deployed();
  const auto task = make_task(cfg.task, cfg.task_seed());
  const std::vector<MlpModel> attacked{victim.model};
  const auto budget = cfg.resolved_budget();
  const auto inputs = select_attack_inputs(task, victim.model, attacked, count, budget.seed);
  std::vector<AdvExample> examples(inputs.size());
  parallel_for(inputs.size(), cfg.thread_count(), [&](std::size_t k) {
    AttackBudget b = budget;
    b.seed = derive_seed(budget.seed, k);
    examples[k] = run_attack(cfg.scenario.attack, attacked, task.test[inputs[k].index].x, inputs[k].target, b);
    examples[k].model_ids = {victim.id};
  });
  std::size_t ok = 0;
  for (const auto& e : examples) ok += e.success ? 1 : 0;
  const std::filesystem::path path = cfg.paths.attacks;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  write_jsonl(os, examples);
  if (!os) throw IoError("short write to " + path.string());
  out << "attacked version " << victim.id << " with " << to_string(cfg.scenario.attack) << ": " << ok << "/"
      << examples.size() << " succeeded\n";
  out << "wrote " << path.string() << '\n';
  return kExitOk;
}

inline int cmd_filter_eval(const RunConfig& cfg, std::ostream& out) {
  VersionStore store(cfg.paths.store);
  if (store.deployed() == nullptr) throw ConfigError("store '" + cfg.paths.store + "' has no deployed version");
  if (store.retired().empty()) throw ConfigError("filter-eval needs at least one retired version");
  const auto task = make_task(cfg.task, cfg.task_seed());
  const auto snap = make_snapshot(store, task.validation, cfg.scenario.target_fpr);
  const auto& filter = *snap->filter;

  std::size_t benign_flagged = 0;
  for (const auto& s : task.test) benign_flagged += judge(s.x, filter).decision == Decision::flagged ? 1 : 0;
  const double fpr = static_cast<double>(benign_flagged) / static_cast<double>(task.test.size());

  std::vector<AdvExample> examples;
  if (std::filesystem::exists(cfg.paths.attacks)) {
    std::ifstream is(cfg.paths.attacks);
    examples = read_jsonl(is);
  }
  std::size_t transferred = 0;
  std::size_t caught = 0;
  std::size_t flagged = 0;
  for (const auto& e : examples) {
    const auto v = judge(e.perturbed, filter);
    const bool f = v.decision == Decision::flagged;
    flagged += f ? 1 : 0;
    if (v.label == e.target) {
      ++transferred;
      caught += f ? 1 : 0;
    }
  }
  nlohmann::json report = calibration_report(filter);
  report["deployed"] = snap->deployed->id;
  report["retired"] = snap->retired_ids;
  report["fpr_realized"] = fpr;
  report["attacks"] = {{"file", cfg.paths.attacks},
                       {"count", examples.size()},
                       {"flagged", flagged},
                       {"transferred", transferred},
                       {"transferred_flagged", caught}};
  report["config"] = to_json(cfg);
  const std::string path = cfg.paths.report + ".filter.json";
  write_json_file(path, report);

  out << "deployed " << snap->deployed->id << ", filter over " << snap->retired_ids.size() << " retired version(s)\n";
  out << "threshold " << *filter.threshold << " (target fpr " << cfg.scenario.target_fpr << ", realized " << fpr << ")\n";
  out << "attacks " << examples.size() << ", flagged " << flagged << ", transferred " << transferred
      << ", transferred and flagged " << caught << '\n';
  out << "report " << path << '\n';
  return kExitOk;
}

inline std::vector<theory::GridPoint> default_theory_grid() {
  std::vector<theory::GridPoint> grid;
  for (double g : {0.5, 1.0, 2.0}) grid.push_back({4.0 * std::sqrt(g), g, 25.0 * g, 0.95});
  for (double p : {0.6, 0.8, 0.99}) grid.push_back({2.0, 1.0, 25.0, p});
  for (double d : {4.5, 6.0, 10.0}) grid.push_back({d, 1.0, 25.0, 0.95});
  return grid;
}

inline int cmd_theory_check(const RunConfig& cfg, const std::string& grid_path, std::size_t samples,
                            const std::string& out_path, std::ostream& out) {
  std::vector<theory::GridPoint> grid = default_theory_grid();
  if (!grid_path.empty()) {
    grid.clear();
    const auto j = read_config_file(grid_path);
    if (!j.is_array()) throw ConfigError("theory grid must be a JSON array");
    for (const auto& row : j) {
      theory::GridPoint g;
      detail::for_each_key(row, "theory grid", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "gap") g.gap = v.get<double>();
        else if (k == "gamma") g.gamma = v.get<double>();
        else if (k == "gamma_prime") g.gamma_prime = v.get<double>();
        else if (k == "p") g.p = v.get<double>();
        else return false;
        return true;
      });
      grid.push_back(g);
    }
  }
  if (samples < 10000) throw ConfigError("--samples must be at least 10000");
  for (const auto& g : grid) {
    theory::LinearPair::with_gap(g.gap, g.gamma, g.gamma_prime).validate();
    if (!(g.p >= 0.0 && g.p <= 1.0) || !(g.gap >= 0.0)) throw ConfigError("theory grid: need gap >= 0 and p in [0, 1]");
  }
  auto report = theory::verification_report(grid, samples, cfg.master_seed);
  bool all_ok = true;
  for (auto& row : report["grid"]) {
    if (row["empirical_p"].is_null()) {
      out << "D=" << row["gap"] << " gamma=" << row["gamma"] << " gamma'=" << row["gamma_prime"] << ": no transfer\n";
      continue;
    }
    const double err = std::abs(row["empirical_p"].get<double>() - row["p"].get<double>());
    const bool ok = err <= 0.01;
    row["within_tolerance"] = ok;
    all_ok = all_ok && ok;
    out << "D=" << row["gap"] << " gamma=" << row["gamma"] << " p=" << row["p"] << " T=" << row["threshold"]
        << " empirical=" << row["empirical_p"] << (ok ? "  ok" : "  MISMATCH") << '\n';
  }
  report["config"] = to_json(cfg);
  if (!out_path.empty()) write_json_file(out_path, report);
  return all_ok ? kExitOk : kExitRuntime;
}

inline int cmd_serve(const RunConfig& cfg, const std::string& host, int port, std::ostream& out) {
  if (port < 0 || port > 65535) throw ConfigError("--port must be in [0, 65535]");
  VersionStore store(cfg.paths.store);
  if (store.deployed() == nullptr) throw ConfigError("store '" + cfg.paths.store + "' has no deployed version");
  GatewayOptions opt;
  opt.target_fpr = cfg.scenario.target_fpr;
  opt.sigma0 = cfg.scenario.sigma0;
  opt.hidden_per_label = cfg.scenario.hidden_per_label;
  opt.train = cfg.resolved_train();
  opt.seed = derive_seed(cfg.store_seed(), static_cast<std::uint64_t>(store.next_id()));
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  Gateway gateway(store, make_task(cfg.task, cfg.task_seed()), opt);
  GatewayServer server(gateway, host, static_cast<std::uint16_t>(port));
  out << "serving version " << gateway.snapshot()->deployed->id << " on " << host << ":" << server.port() << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  out << "stopped: " << gateway.status().dump() << std::endl;
  return kExitOk;
}

// -------------------------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Model-version recovery lab: versioned training, breach filtering and attack simulation"};
  app.require_subcommand(1);
  CommonOptions common;
  app.add_option("-c,--config", common.config_path, "JSON run configuration");
  app.add_option("--set", common.overrides, "Override a config key, e.g. --set scenario.horizon=4");
  app.add_option("--threads", common.threads, "Cap on worker threads (0 = all cores)");

  int count = 10;
  bool overwrite = false;
  auto* train = app.add_subcommand("train-versions", "Train a chain of model versions into the store");
  train->add_option("-n,--count", count, "Number of versions");
  train->add_flag("--overwrite", overwrite, "Replace an existing store");

  std::string fprs;
  auto* game = app.add_subcommand("breach-game", "Simulate successive breaches and report NBR");
  game->add_option("--fprs", fprs, "Comma-separated ascending FPR list for a sweep");

  int version = 0;
  int attack_count = 100;
  auto* attack = app.add_subcommand("attack", "Craft adversarial examples against a stored version");
  attack->add_option("--version", version, "Version id (default: deployed)");
  attack->add_option("-n,--count", attack_count, "Number of inputs to attack");

  auto* filter = app.add_subcommand("filter-eval", "Calibrate the filter and judge stored attacks");

  std::string grid_path;
  std::size_t samples = 1000000;
  std::string theory_out;
  auto* theory = app.add_subcommand("theory-check", "Monte-Carlo check of the loss-gap bound");
  theory->add_option("--grid", grid_path, "JSON array of {gap, gamma, gamma_prime, p}");
  theory->add_option("--samples", samples, "Monte-Carlo samples per grid point");
  theory->add_option("-o,--out", theory_out, "Write the verification report here");

  std::string host = "127.0.0.1";
  int port = 7878;
  auto* serve = app.add_subcommand("serve", "Run the filtered inference gateway");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "TCP port (0 = ephemeral)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    const auto cfg = load_run_config(common);
    if (*train) return cmd_train_versions(cfg, count, overwrite, out);
    if (*game) return cmd_breach_game(cfg, fprs, out);
    if (*attack) return cmd_attack(cfg, version, attack_count, out);
    if (*filter) return cmd_filter_eval(cfg, out);
    if (*theory) return cmd_theory_check(cfg, grid_path, samples, theory_out, out);
    if (*serve) return cmd_serve(cfg, host, port, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace vrec::cli

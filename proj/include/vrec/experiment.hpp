#pragma once

// Multi-breach simulation. In round i (1-based) versions 1..i are breached, the attacker
// optimises one perturbation per input against the ensemble of all breached versions (or
// their surrogates), and version i+1 is deployed behind a filter calibrated over {1..i}.
//
// Report CSV columns, in order:
//   trial, round, pre_transfer, post_success, filter_rate, fpr_realized, benign_acc,
//   d_benign_med, d_adv_med
// Adversarial medians cover examples that reach the deployed model with the attack target
// (0 when none do); the others are not what the filter has to catch.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrec/attacks.hpp"
#include "vrec/distributions.hpp"
#include "vrec/filter.hpp"
#include "vrec/parallel.hpp"
#include "vrec/versioning.hpp"

namespace vrec {

struct BreachScenario {
  int horizon = 12;
  AttackKind attack = AttackKind::pgd;
  AttackBudget budget;
  double target_fpr = 0.05;
  double nbr_cutoff = 0.20;
  int attack_inputs = 100;
  int trials = 3;
  std::uint64_t seed = 1;
  double sigma0 = kDefaultSigma0;
  int hidden_per_label = 100;
  TrainConfig train;
  // Prune + finetune surrogate attack: when set, each breached version is replaced by a
  // pruned and finetuned copy before crafting.
  std::optional<double> prune_ratio;
  double attacker_data_fraction = 0.10;
  int finetune_epochs = 10;
  std::size_t threads = default_threads();

  void validate() const {
    if (horizon < 1) throw std::invalid_argument("BreachScenario: horizon must be at least 1");
    if (!(nbr_cutoff > 0.0 && nbr_cutoff < 1.0)) throw std::invalid_argument("BreachScenario: cutoff must be in (0, 1)");
    if (!(target_fpr >= 0.0 && target_fpr <= 0.5)) throw std::invalid_argument("BreachScenario: target FPR must be in [0, 0.5]");
    if (attack_inputs < 0) throw std::invalid_argument("BreachScenario: attack_inputs must be nonnegative");
    if (trials < 1) throw std::invalid_argument("BreachScenario: need at least one trial");
    if (prune_ratio && !(*prune_ratio >= 0.0 && *prune_ratio <= 0.5)) {
      throw std::invalid_argument("BreachScenario: prune ratio must be in [0, 0.5]");
    }
    budget.validate();
    train.validate();
  }
};

struct RoundResult {
  int trial = 0;
  int round = 0;
  double pre_transfer = 0.0;
  double post_success = 0.0;
  double filter_rate = 1.0;  // flagged share of transferred examples; 1 when none transferred
  double fpr_realized = 0.0;
  double benign_acc = 0.0;
  double d_benign_med = 0.0;
  double d_adv_med = 0.0;
};

/// Raw per-round measurements, independent of the FPR target so thresholds can be swept.
struct RoundData {
  int round = 0;
  std::vector<double> validation_deltas;  // calibration set
  std::vector<double> holdout_deltas;     // benign test split, for realised FPR
  std::vector<double> adv_deltas;
  std::vector<char> transferred;  // deployed model outputs the attack target
  std::vector<char> source_success;
  double benign_acc = 0.0;
};

struct TrialData {
  int trial = 0;
  std::vector<RoundData> rounds;
};

struct TrialOutcome {
  int trial = 0;
  std::vector<RoundResult> rounds;
  int nbr = 0;
};

struct BreachGameResult {
  std::vector<TrialOutcome> trials;

  std::vector<int> nbrs() const {
    std::vector<int> out;
    for (const auto& t : trials) out.push_back(t.nbr);
    return out;
  }

  double mean_nbr() const {
    if (trials.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : trials) s += t.nbr;
    return s / static_cast<double>(trials.size());
  }
};

/// Largest i such that every round <= i keeps post-filter success at or below the cutoff.
[[nodiscard]] inline int compute_nbr(std::span<const RoundResult> rounds, double cutoff) {
  int nbr = 0;
  for (const auto& r : rounds) {
    if (r.post_success > cutoff) break;
    nbr = r.round;
  }
  return nbr;
}

[[nodiscard]] inline RoundResult evaluate_round(const RoundData& d, double target_fpr, int trial = 0) {
  RoundResult r;
  r.trial = trial;
  r.round = d.round;
  r.benign_acc = d.benign_acc;
  const double t = threshold_from_deltas(d.validation_deltas, target_fpr);
  std::size_t flagged_benign = 0;
  for (double v : d.holdout_deltas) flagged_benign += decide(v, t) == Decision::flagged ? 1 : 0;
  r.fpr_realized = d.holdout_deltas.empty() ? 0.0 : static_cast<double>(flagged_benign) / static_cast<double>(d.holdout_deltas.size());
  r.d_benign_med = d.holdout_deltas.empty() ? 0.0 : median(d.holdout_deltas);
  const std::size_t n = d.adv_deltas.size();
  std::size_t transfers = 0;
  std::size_t caught = 0;
  std::vector<double> transferred_deltas;
  for (std::size_t k = 0; k < n; ++k) {
    if (!d.transferred[k]) continue;
    ++transfers;
    transferred_deltas.push_back(d.adv_deltas[k]);
    caught += decide(d.adv_deltas[k], t) == Decision::flagged ? 1 : 0;
  }
  r.d_adv_med = transferred_deltas.empty() ? 0.0 : median(transferred_deltas);
  if (n > 0) {
    r.pre_transfer = static_cast<double>(transfers) / static_cast<double>(n);
    r.post_success = static_cast<double>(transfers - caught) / static_cast<double>(n);
  }
  r.filter_rate = transfers == 0 ? 1.0 : static_cast<double>(caught) / static_cast<double>(transfers);
  return r;
}

[[nodiscard]] inline TrialOutcome evaluate_trial(const TrialData& data, double target_fpr, double cutoff) {
  TrialOutcome out;
  out.trial = data.trial;
  for (const auto& rd : data.rounds) out.rounds.push_back(evaluate_round(rd, target_fpr, data.trial));
  out.nbr = compute_nbr(out.rounds, cutoff);
  return out;
}

[[nodiscard]] inline std::uint64_t trial_seed(const BreachScenario& s, int trial) {
  return derive_seed(s.seed, static_cast<std::uint64_t>(trial));
}

/// Freshly trains horizon + 1 versions for one trial.
[[nodiscard]] inline std::vector<ModelVersion> train_version_pool(const TaskDataset& task, const BreachScenario& s, int trial,
                                                                  int count = -1) {
  if (count < 0) count = s.horizon + 1;
  Rng rng(derive_seed(trial_seed(s, trial), 0x7001));
  VersionStore store;
  for (int k = 0; k < count; ++k) retire_and_replace(store, task, s.sigma0, s.train, rng, s.hidden_per_label);
  return store.versions();
}

/// Attack inputs for a round: test samples the deployed model classifies correctly, in a fixed
/// per-trial order, each with a target label drawn uniformly from the other labels.
struct AttackInput {
  std::size_t index = 0;
  int target = 0;
};

[[nodiscard]] inline std::vector<AttackInput> select_attack_inputs(const TaskDataset& task, const MlpModel& deployed,
                                                                   std::span<const MlpModel> attacked, int n, std::uint64_t seed) {
  std::vector<std::size_t> order(task.test.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0xa77));
  shuffle(order, rng);
  std::vector<AttackInput> out;
  for (std::size_t idx : order) {
    if (static_cast<int>(out.size()) >= n) break;
    const auto& s = task.test[idx];
    if (predict(deployed, s.x) != s.label) continue;
    std::vector<int> preds;
    for (const auto& m : attacked) preds.push_back(predict(m, s.x));
    Rng trng(derive_seed(seed, 0x1000 + idx));
    std::vector<int> options;
    for (int c = 0; c < task.num_classes; ++c) {
      if (c != s.label && std::find(preds.begin(), preds.end(), c) == preds.end()) options.push_back(c);
    }
    if (options.empty()) continue;
    out.push_back({idx, options[uniform_index(trng, options.size())]});
  }
  return out;
}

/// Runs the attacks of one trial against a pre-trained version pool.
[[nodiscard]] inline TrialData simulate_trial(const TaskDataset& task, std::span<const ModelVersion> pool,
                                              const BreachScenario& s, int trial) {
  s.validate();
  if (pool.size() < static_cast<std::size_t>(s.horizon) + 1) throw std::invalid_argument("simulate_trial: version pool too small");
  const auto tseed = trial_seed(s, trial);
  std::vector<MlpModel> attack_models;
  for (int j = 0; j < s.horizon; ++j) {
    if (s.prune_ratio) {
      TrainConfig ft = s.train;
      ft.epochs = s.finetune_epochs;
      ft.seed = derive_seed(tseed, 0x9000 + static_cast<std::uint64_t>(j));
      attack_models.push_back(prune_finetune(pool[static_cast<std::size_t>(j)].model, *s.prune_ratio, task.train,
                                             s.attacker_data_fraction, ft));
    } else {
      attack_models.push_back(pool[static_cast<std::size_t>(j)].model);
    }
  }
  TrialData data;
  data.trial = trial;
  for (int i = 1; i <= s.horizon; ++i) {
    const auto& deployed = pool[static_cast<std::size_t>(i)].model;
    std::vector<MlpModel> breached;
    for (int j = 0; j < i; ++j) breached.push_back(pool[static_cast<std::size_t>(j)].model);
    const std::span<const MlpModel> attacked(attack_models.data(), static_cast<std::size_t>(i));

    RoundData rd;
    rd.round = i;
    rd.benign_acc = accuracy(deployed, task.test);
    rd.validation_deltas = benign_deltas(deployed, breached, task.validation);
    rd.holdout_deltas = benign_deltas(deployed, breached, task.test);

    const auto inputs = select_attack_inputs(task, deployed, attacked, s.attack_inputs, derive_seed(tseed, static_cast<std::uint64_t>(i)));
    rd.adv_deltas.resize(inputs.size());
    rd.transferred.resize(inputs.size());
    rd.source_success.resize(inputs.size());
    parallel_for(inputs.size(), s.threads, [&](std::size_t k) {
      AttackBudget b = s.budget;
      b.seed = derive_seed(tseed, 0x10000 * static_cast<std::uint64_t>(i) + k);
      const auto ex = run_attack(s.attack, attacked, task.test[inputs[k].index].x, inputs[k].target, b);
      const auto d = delta_max_detail(ex.perturbed, deployed, breached);
      rd.adv_deltas[k] = d.value;
      rd.transferred[k] = d.label == inputs[k].target;
      rd.source_success[k] = ex.success;
    });
    data.rounds.push_back(std::move(rd));
  }
  return data;
}

[[nodiscard]] inline BreachGameResult run_breach_game(const TaskDataset& task, const BreachScenario& s) {
  s.validate();
  BreachGameResult result;
  for (int t = 0; t < s.trials; ++t) {
    const auto pool = train_version_pool(task, s, t);
    result.trials.push_back(evaluate_trial(simulate_trial(task, pool, s, t), s.target_fpr, s.nbr_cutoff));
  }
  return result;
}

/// NBR per FPR target; versions and attacks are generated once and thresholds re-derived.
struct FprSweepResult {
  std::vector<double> fprs;
  std::vector<BreachGameResult> games;  // one per FPR
};

[[nodiscard]] inline FprSweepResult fpr_sweep_from_data(std::span<const TrialData> trials, std::span<const double> fprs,
                                                        double cutoff) {
  FprSweepResult r;
  r.fprs.assign(fprs.begin(), fprs.end());
  for (double f : fprs) {
    BreachGameResult g;
    for (const auto& td : trials) g.trials.push_back(evaluate_trial(td, f, cutoff));
    r.games.push_back(std::move(g));
  }
  return r;
}

[[nodiscard]] inline FprSweepResult fpr_sweep(const TaskDataset& task, const BreachScenario& s, std::span<const double> fprs) {
  s.validate();
  for (std::size_t k = 0; k < fprs.size(); ++k) {
    if (!(fprs[k] >= 0.0 && fprs[k] < 0.5)) throw std::invalid_argument("fpr_sweep: FPR values must be in [0, 0.5)");
    if (k > 0 && !(fprs[k] > fprs[k - 1])) throw std::invalid_argument("fpr_sweep: FPR list must be ascending");
  }
  std::vector<TrialData> trials;
  for (int t = 0; t < s.trials; ++t) {
    const auto pool = train_version_pool(task, s, t);
    trials.push_back(simulate_trial(task, pool, s, t));
  }
  return fpr_sweep_from_data(trials, fprs, s.nbr_cutoff);
}

struct StrengthPoint {
  double epsilon = 0.0;
  double median_adv_delta = 0.0;  // transferred examples, pooled over rounds and trials
  double mean_nbr = 0.0;
  double post_success_mean = 0.0;
  BreachGameResult game;
};

/// Median adversarial Delta_max and NBR per L-infinity budget; the step size scales as eps/10.
/// Version pools are trained once per trial and shared across budgets.
[[nodiscard]] inline std::vector<StrengthPoint> strength_sweep(const TaskDataset& task, const BreachScenario& s,
                                                               std::span<const double> epsilons) {
  s.validate();
  std::vector<std::vector<ModelVersion>> pools;
  for (int t = 0; t < s.trials; ++t) pools.push_back(train_version_pool(task, s, t));
  std::vector<StrengthPoint> out;
  for (double eps : epsilons) {
    BreachScenario se = s;
    se.budget.epsilon = eps;
    se.budget.step = eps / 10.0;
    StrengthPoint p;
    p.epsilon = eps;
    std::vector<double> pooled;
    double post = 0.0;
    std::size_t rounds = 0;
    for (int t = 0; t < s.trials; ++t) {
      const auto td = simulate_trial(task, pools[static_cast<std::size_t>(t)], se, t);
      for (const auto& rd : td.rounds) {
        for (std::size_t k = 0; k < rd.adv_deltas.size(); ++k) {
          if (rd.transferred[k]) pooled.push_back(rd.adv_deltas[k]);
        }
      }
      auto outcome = evaluate_trial(td, se.target_fpr, se.nbr_cutoff);
      for (const auto& r : outcome.rounds) {
        post += r.post_success;
        ++rounds;
      }
      p.game.trials.push_back(std::move(outcome));
    }
    p.median_adv_delta = pooled.empty() ? 0.0 : median(pooled);
    p.mean_nbr = p.game.mean_nbr();
    p.post_success_mean = rounds == 0 ? 0.0 : post / static_cast<double>(rounds);
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Reports

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"trial",        "round",     "pre_transfer", "post_success", "filter_rate",
                                             "fpr_realized", "benign_acc", "d_benign_med", "d_adv_med"};
  return cols;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_report_csv(std::ostream& os, const BreachGameResult& result) {
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& t : result.trials) {
    for (const auto& r : t.rounds) {
      os << r.trial << ',' << r.round << ',' << format_number(r.pre_transfer) << ',' << format_number(r.post_success) << ','
         << format_number(r.filter_rate) << ',' << format_number(r.fpr_realized) << ',' << format_number(r.benign_acc)
         << ',' << format_number(r.d_benign_med) << ',' << format_number(r.d_adv_med) << '\n';
    }
  }
}

[[nodiscard]] inline std::vector<RoundResult> read_report_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("report CSV: missing header");
  std::vector<RoundResult> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != report_columns().size()) throw IoError("report CSV line " + std::to_string(lineno) + ": wrong column count");
    RoundResult r;
    r.trial = std::stoi(cells[0]);
    r.round = std::stoi(cells[1]);
    r.pre_transfer = std::stod(cells[2]);
    r.post_success = std::stod(cells[3]);
    r.filter_rate = std::stod(cells[4]);
    r.fpr_realized = std::stod(cells[5]);
    r.benign_acc = std::stod(cells[6]);
    r.d_benign_med = std::stod(cells[7]);
    r.d_adv_med = std::stod(cells[8]);
    out.push_back(r);
  }
  return out;
}

inline nlohmann::json to_json(const RoundResult& r) {
  return {{"trial", r.trial},           {"round", r.round},           {"pre_transfer", r.pre_transfer},
          {"post_success", r.post_success}, {"filter_rate", r.filter_rate}, {"fpr_realized", r.fpr_realized},
          {"benign_acc", r.benign_acc}, {"d_benign_med", r.d_benign_med}, {"d_adv_med", r.d_adv_med}};
}

[[nodiscard]] inline nlohmann::json report_summary(const BreachGameResult& result, const nlohmann::json& config = nullptr) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : result.trials) {
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& r : t.rounds) rounds.push_back(to_json(r));
    trials.push_back({{"trial", t.trial}, {"nbr", t.nbr}, {"rounds", rounds}});
  }
  return {{"nbr", result.mean_nbr()}, {"nbr_per_trial", result.nbrs()}, {"trials", trials}, {"config", config}};
}

/// Writes `<prefix>.csv` and `<prefix>.json`.
inline void emit_report(const BreachGameResult& result, const std::filesystem::path& prefix,
                        const nlohmann::json& config = nullptr) {
  if (prefix.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(prefix.parent_path(), ec);
  }
  const auto csv_path = std::filesystem::path(prefix.string() + ".csv");
  const auto json_path = std::filesystem::path(prefix.string() + ".json");
  {
    std::ofstream os(csv_path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + csv_path.string());
    write_report_csv(os, result);
    if (!os) throw IoError("short write to " + csv_path.string());
  }
  std::ofstream os(json_path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + json_path.string());
  os << report_summary(result, config).dump(2) << '\n';
  if (!os) throw IoError("short write to " + json_path.string());
}

}  // namespace vrec

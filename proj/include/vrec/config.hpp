#pragma once

// Run configuration document shared by the command-line tools.
//
//   {
//     "schema_version": 1,
//     "master_seed": 1,
//     "threads": 0,                       // 0 = hardware concurrency
//     "task": {"kind": "glyphs", ...GlyphParams} | {"kind": "csv", "path": ..., ...},
//     "train": {...TrainConfig without seed},
//     "attack": {...AttackBudget without seed},
//     "scenario": {"horizon": 12, "attack": "pgd", "target_fpr": 0.05, ...},
//     "paths": {"store": ..., "report": ..., "attacks": ...},
//     "seeds": {"task": ..., "store": ..., "train": ..., "attack": ..., "scenario": ...}
//   }
//
// Every section and key is optional; unknown keys are errors. Seeds missing from "seeds" are
// derived from master_seed, and to_json always writes the resolved values.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "vrec/attacks.hpp"
#include "vrec/distributions.hpp"
#include "vrec/experiment.hpp"
#include "vrec/nnet.hpp"
#include "vrec/versioning.hpp"

namespace vrec {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunPaths {
  std::string store = "vrec-store";
  std::string report = "vrec-report";
  std::string attacks = "vrec-attacks.jsonl";
};

struct RunSeeds {
  std::optional<std::uint64_t> task;
  std::optional<std::uint64_t> store;
  std::optional<std::uint64_t> train;
  std::optional<std::uint64_t> attack;
  std::optional<std::uint64_t> scenario;
};

struct RunConfig {
  static constexpr int kSchemaVersion = 1;

  std::uint64_t master_seed = 1;
  std::size_t threads = 0;
  TaskSpec task = GlyphParams{};
  TrainConfig train;
  AttackBudget budget;
  BreachScenario scenario;  // train, budget, seed and threads are filled in by resolved_scenario()
  RunPaths paths;
  RunSeeds seeds;

  std::uint64_t task_seed() const { return seeds.task.value_or(derive_seed(master_seed, 1)); }
  std::uint64_t store_seed() const { return seeds.store.value_or(derive_seed(master_seed, 2)); }
  std::uint64_t train_seed() const { return seeds.train.value_or(derive_seed(master_seed, 3)); }
  std::uint64_t attack_seed() const { return seeds.attack.value_or(derive_seed(master_seed, 4)); }
  std::uint64_t scenario_seed() const { return seeds.scenario.value_or(derive_seed(master_seed, 5)); }
  std::size_t thread_count() const { return threads == 0 ? default_threads() : threads; }

  TrainConfig resolved_train() const {
    TrainConfig c = train;
    c.seed = train_seed();
    return c;
  }

  AttackBudget resolved_budget() const {
    AttackBudget b = budget;
    b.seed = attack_seed();
    return b;
  }

  BreachScenario resolved_scenario() const {
    BreachScenario s = scenario;
    s.train = resolved_train();
    s.budget = resolved_budget();
    s.seed = scenario_seed();
    s.threads = thread_count();
    return s;
  }

  void validate() const {
    try {
      if (const auto* g = std::get_if<GlyphParams>(&task)) g->validate();
      resolved_scenario().validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

template <typename Fn>
void for_each_key(const nlohmann::json& j, const std::string& where, Fn&& fn) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!fn(key, value)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

inline nlohmann::json task_to_json(const TaskSpec& spec) {
  if (const auto* g = std::get_if<GlyphParams>(&spec)) {
    return {{"kind", "glyphs"},
            {"num_classes", g->num_classes},
            {"side", g->side},
            {"train_per_class", g->train_per_class},
            {"validation_per_class", g->validation_per_class},
            {"test_per_class", g->test_per_class},
            {"noise", g->noise},
            {"stroke_width", g->stroke_width},
            {"background", g->background},
            {"contrast", g->contrast}};
  }
  const auto& c = std::get<CsvTaskParams>(spec);
  return {{"kind", "csv"},
          {"path", c.path.string()},
          {"validation_fraction", c.validation_fraction},
          {"test_fraction", c.test_fraction}};
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
  const std::string kind = j.value("kind", std::string("glyphs"));
  if (kind == "glyphs") {
    GlyphParams g;
    for_each_key(j, "task", [&](const std::string& k, const nlohmann::json& v) {
      if (k == "kind") return true;
      if (k == "num_classes") g.num_classes = v.get<int>();
      else if (k == "side") g.side = v.get<int>();
      else if (k == "train_per_class") g.train_per_class = v.get<int>();
      else if (k == "validation_per_class") g.validation_per_class = v.get<int>();
      else if (k == "test_per_class") g.test_per_class = v.get<int>();
      else if (k == "noise") g.noise = v.get<double>();
      else if (k == "stroke_width") g.stroke_width = v.get<double>();
      else if (k == "background") g.background = v.get<double>();
      else if (k == "contrast") g.contrast = v.get<double>();
      else return false;
      return true;
    });
    return g;
  }
  if (kind == "csv") {
    CsvTaskParams c;
    for_each_key(j, "task", [&](const std::string& k, const nlohmann::json& v) {
      if (k == "kind") return true;
      if (k == "path") c.path = v.get<std::string>();
      else if (k == "validation_fraction") c.validation_fraction = v.get<double>();
      else if (k == "test_fraction") c.test_fraction = v.get<double>();
      else return false;
      return true;
    });
    if (c.path.empty()) throw ConfigError("task: csv task needs a path");
    return c;
  }
  throw ConfigError("task: unknown kind '" + kind + "'");
}

inline nlohmann::json scenario_to_json(const BreachScenario& s) {
  nlohmann::json j{{"horizon", s.horizon},
                   {"attack", to_string(s.attack)},
                   {"target_fpr", s.target_fpr},
                   {"nbr_cutoff", s.nbr_cutoff},
                   {"attack_inputs", s.attack_inputs},
                   {"trials", s.trials},
                   {"sigma0", s.sigma0},
                   {"hidden_per_label", s.hidden_per_label},
                   {"attacker_data_fraction", s.attacker_data_fraction},
                   {"finetune_epochs", s.finetune_epochs}};
  j["prune_ratio"] = s.prune_ratio ? nlohmann::json(*s.prune_ratio) : nlohmann::json(nullptr);
  return j;
}

inline void scenario_from_json(const nlohmann::json& j, BreachScenario& s) {
  for_each_key(j, "scenario", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "horizon") s.horizon = v.get<int>();
    else if (k == "attack") s.attack = parse_attack_kind(v.get<std::string>());
    else if (k == "target_fpr") s.target_fpr = v.get<double>();
    else if (k == "nbr_cutoff") s.nbr_cutoff = v.get<double>();
    else if (k == "attack_inputs") s.attack_inputs = v.get<int>();
    else if (k == "trials") s.trials = v.get<int>();
    else if (k == "sigma0") s.sigma0 = v.get<double>();
    else if (k == "hidden_per_label") s.hidden_per_label = v.get<int>();
    else if (k == "attacker_data_fraction") s.attacker_data_fraction = v.get<double>();
    else if (k == "finetune_epochs") s.finetune_epochs = v.get<int>();
    else if (k == "prune_ratio") s.prune_ratio = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    else return false;
    return true;
  });
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  auto train = to_json(c.train);
  train.erase("seed");
  auto attack = to_json(c.budget);
  attack.erase("seed");
  return {{"schema_version", RunConfig::kSchemaVersion},
          {"master_seed", c.master_seed},
          {"threads", c.threads},
          {"task", detail::task_to_json(c.task)},
          {"train", train},
          {"attack", attack},
          {"scenario", detail::scenario_to_json(c.scenario)},
          {"paths", {{"store", c.paths.store}, {"report", c.paths.report}, {"attacks", c.paths.attacks}}},
          {"seeds",
           {{"task", c.task_seed()},
            {"store", c.store_seed()},
            {"train", c.train_seed()},
            {"attack", c.attack_seed()},
            {"scenario", c.scenario_seed()}}}};
}

/// Parses and validates a config document. All failures surface as ConfigError.
[[nodiscard]] inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    detail::for_each_key(j, "config", [&](const std::string& k, const nlohmann::json& v) {
      if (k == "schema_version") {
        if (v.get<int>() != RunConfig::kSchemaVersion) {
          throw ConfigError("config: unsupported schema_version " + v.dump());
        }
      } else if (k == "master_seed") {
        c.master_seed = v.get<std::uint64_t>();
      } else if (k == "threads") {
        c.threads = v.get<std::size_t>();
      } else if (k == "task") {
        c.task = detail::task_from_json(v);
      } else if (k == "train") {
        if (v.contains("seed")) throw ConfigError("train: seeds belong in the \"seeds\" section");
        c.train = train_config_from_json(v);
      } else if (k == "attack") {
        if (v.contains("seed")) throw ConfigError("attack: seeds belong in the \"seeds\" section");
        c.budget = attack_budget_from_json(v);
      } else if (k == "scenario") {
        detail::scenario_from_json(v, c.scenario);
      } else if (k == "paths") {
        detail::for_each_key(v, "paths", [&](const std::string& pk, const nlohmann::json& pv) {
          if (pk == "store") c.paths.store = pv.get<std::string>();
          else if (pk == "report") c.paths.report = pv.get<std::string>();
          else if (pk == "attacks") c.paths.attacks = pv.get<std::string>();
          else return false;
          return true;
        });
      } else if (k == "seeds") {
        detail::for_each_key(v, "seeds", [&](const std::string& sk, const nlohmann::json& sv) {
          const auto seed = sv.get<std::uint64_t>();
          if (sk == "task") c.seeds.task = seed;
          else if (sk == "store") c.seeds.store = seed;
          else if (sk == "train") c.seeds.train = seed;
          else if (sk == "attack") c.seeds.attack = seed;
          else if (sk == "scenario") c.seeds.scenario = seed;
          else return false;
          return true;
        });
      } else {
        return false;
      }
      return true;
    });
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

/// Sets the value at a dotted key path ("scenario.horizon") to `text`, parsed as JSON when
/// possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& path, const std::string& text) {
  if (path.empty()) throw ConfigError("override: empty key");
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  std::string pointer;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("override: bad key '" + path + "'");
    pointer += "/" + part;
  }
  doc[nlohmann::json::json_pointer(pointer)] = std::move(value);
}

[[nodiscard]] inline nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
}

}  // namespace vrec

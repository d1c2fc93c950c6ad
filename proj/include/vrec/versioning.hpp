#pragma once

// Version store layout on disk:
//
//   <root>/index.json                 {"format_version": 1,
//                                      "versions": [{"id": 1, "status": "retired"}, ...]}
//   <root>/versions/<id>/model.bin    binary model (see model_io.hpp)
//   <root>/versions/<id>/meta.json    {"id", "status", "benign_accuracy", "final_train_loss",
//                                      "sigma0", "samples_per_label", "latents": {label: [...]},
//                                      "config": {learning_rate, epochs, batch_size, seed,
//                                                 lambda, snnl_weight, hidden_layers}}
//
// index.json is authoritative for status. Files are written to a temporary name and renamed.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrec/distributions.hpp"
#include "vrec/model_io.hpp"
#include "vrec/nnet.hpp"
#include "vrec/snnl.hpp"

namespace vrec {

enum class VersionStatus { deployed, retired };

inline std::string to_string(VersionStatus s) { return s == VersionStatus::deployed ? "deployed" : "retired"; }

inline VersionStatus parse_status(const std::string& s) {
  if (s == "deployed") return VersionStatus::deployed;
  if (s == "retired") return VersionStatus::retired;
  throw std::invalid_argument("unknown version status '" + s + "'");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},     {"batch_size", c.batch_size},
          {"seed", c.seed},                   {"lambda", c.lambda},     {"snnl_weight", c.snnl_weight},
          {"hidden_layers", c.hidden_layers}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "lambda") c.lambda = value.get<double>();
    else if (key == "snnl_weight") c.snnl_weight = value.get<double>();
    else if (key == "hidden_layers") c.hidden_layers = value.get<std::vector<std::size_t>>();
    else throw std::invalid_argument("train config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

struct ModelVersion {
  int id = 0;
  MlpModel model;
  HiddenAssignment assignment;
  TrainConfig config;
  double benign_accuracy = 0.0;
  double final_train_loss = 0.0;
  VersionStatus status = VersionStatus::deployed;
};

/// Joint training set: task samples at unit weight plus, when lambda > 0, each label's hidden
/// samples at weight lambda. Groups coincide with labels so task and hidden samples of the same
/// label share a class for the entanglement term.
[[nodiscard]] inline std::vector<Sample> hidden_training_samples(const TaskDataset& task, const HiddenAssignment& assignment,
                                                                 std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t l = 0; l < assignment.size(); ++l) {
    const auto& h = assignment.per_label[l];
    auto xs = gen_hidden_samples(h, task.input_dim, static_cast<std::size_t>(h.samples_per_label), derive_seed(seed, l));
    for (auto& x : xs) out.push_back({std::move(x), static_cast<int>(l)});
  }
  return out;
}

/// Trains a fresh model on the task plus the assigned hidden distributions.
[[nodiscard]] inline ModelVersion train_version(const TaskDataset& task, const HiddenAssignment& assignment,
                                                const TrainConfig& config) {
  config.validate();
  if (assignment.size() != static_cast<std::size_t>(task.num_classes)) {
    throw std::invalid_argument("train_version: assignment covers " + std::to_string(assignment.size()) +
                                " labels, task has " + std::to_string(task.num_classes));
  }
  std::vector<Sample> hidden;
  if (config.lambda > 0.0) hidden = hidden_training_samples(task, assignment, derive_seed(config.seed, 0x41dd));

  std::vector<WeightedSample> data;
  data.reserve(task.train.size() + hidden.size());
  for (const auto& s : task.train) data.push_back({s.x, s.label, 1.0, s.label});
  for (const auto& s : hidden) data.push_back({s.x, s.label, config.lambda, s.label});

  std::vector<ExtraLossTerm> extra;
  if (config.snnl_weight > 0.0) {
    extra.push_back({config.snnl_weight, [](const Matrix& f, std::span<const int> g, Matrix& grad) {
                       return snnl(f, g, &grad).value;
                     }});
  }
  auto init = MlpModel::glorot(task.input_dim, config.hidden_layers, static_cast<std::size_t>(task.num_classes), config.seed);
  auto result = sgd_train(std::move(init), data, config, extra);

  ModelVersion v;
  v.model = std::move(result.model);
  v.assignment = assignment;
  v.config = config;
  v.benign_accuracy = accuracy(v.model, task.test);
  v.final_train_loss = result.epoch_losses.empty() ? 0.0 : result.final_loss();
  return v;
}

/// Standard (non-versioned) model: same architecture and schedule, task data only.
[[nodiscard]] inline ModelVersion train_standard(const TaskDataset& task, TrainConfig config) {
  config.lambda = 0.0;
  config.snnl_weight = 0.0;
  HiddenAssignment empty;
  empty.per_label.resize(static_cast<std::size_t>(task.num_classes));
  return train_version(task, empty, config);
}

namespace detail {

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp);
    os << text;
    if (!os) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + ": " + ec.message());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json version_meta_json(const ModelVersion& v) {
  const auto& pl = v.assignment.per_label;
  return {{"id", v.id},
          {"status", to_string(v.status)},
          {"benign_accuracy", v.benign_accuracy},
          {"final_train_loss", v.final_train_loss},
          {"sigma0", pl.empty() ? kDefaultSigma0 : pl.front().sigma0},
          {"samples_per_label", pl.empty() ? 0 : pl.front().samples_per_label},
          {"latents", v.assignment.latents_json()},
          {"config", to_json(v.config)}};
}

/// Ordered collection of model versions, optionally backed by a directory.
class VersionStore {
 public:
  VersionStore() = default;

  /// Opens (or initialises) a store rooted at `root`.
  explicit VersionStore(std::filesystem::path root) : root_(std::move(root)) {
    if (std::filesystem::exists(root_ / "index.json")) load();
  }

  bool persistent() const { return !root_.empty(); }
  const std::filesystem::path& root() const { return root_; }
  const std::vector<ModelVersion>& versions() const { return versions_; }
  bool empty() const { return versions_.empty(); }

  const ModelVersion* deployed() const {
    for (const auto& v : versions_) {
      if (v.status == VersionStatus::deployed) return &v;
    }
    return nullptr;
  }

  std::vector<const ModelVersion*> retired() const {
    std::vector<const ModelVersion*> out;
    for (const auto& v : versions_) {
      if (v.status == VersionStatus::retired) out.push_back(&v);
    }
    return out;
  }

  const ModelVersion& get(int id) const {
    for (const auto& v : versions_) {
      if (v.id == id) return v;
    }
    throw std::out_of_range("no version " + std::to_string(id));
  }

  int next_id() const { return versions_.empty() ? 1 : versions_.back().id + 1; }

  /// Retires the deployed version (if any) and deploys `fresh` under the next id. On I/O
  /// failure the store is left unchanged in memory and on disk.
  const ModelVersion& deploy(ModelVersion fresh) {
    fresh.id = next_id();
    fresh.status = VersionStatus::deployed;
    std::vector<ModelVersion> next_state = versions_;
    for (auto& v : next_state) v.status = VersionStatus::retired;
    next_state.push_back(std::move(fresh));
    if (persistent()) persist(next_state);
    versions_ = std::move(next_state);
    return versions_.back();
  }

 private:
  std::filesystem::path version_dir(int id) const { return root_ / "versions" / std::to_string(id); }

  void persist(const std::vector<ModelVersion>& state) const {
    const auto& fresh = state.back();
    const auto dir = version_dir(fresh.id);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
      throw IoError("cannot create " + dir.string() + (ec ? ": " + ec.message() : ""));
    }
    try {
      save_model(dir / "model.bin", fresh.model);
      detail::write_text_atomic(dir / "meta.json", version_meta_json(fresh).dump(2));
      // Previously deployed version: its metadata is rewritten once, at retirement.
      for (std::size_t k = 0; k + 1 < state.size(); ++k) {
        if (versions_[k].status == VersionStatus::deployed) {
          detail::write_text_atomic(version_dir(state[k].id) / "meta.json", version_meta_json(state[k]).dump(2));
        }
      }
      nlohmann::json index{{"format_version", 1}, {"versions", nlohmann::json::array()}};
      for (const auto& v : state) index["versions"].push_back({{"id", v.id}, {"status", to_string(v.status)}});
      detail::write_text_atomic(root_ / "index.json", index.dump(2));
    } catch (...) {
      for (const auto& v : versions_) {
        if (v.status == VersionStatus::deployed) {
          std::ofstream(version_dir(v.id) / "meta.json", std::ios::trunc) << version_meta_json(v).dump(2);
        }
      }
      std::filesystem::remove_all(dir, ec);
      throw;
    }
  }

  void load() {
    const auto index = detail::read_json(root_ / "index.json");
    if (index.value("format_version", 0) != 1) throw IoError("unsupported store index format");
    versions_.clear();
    for (const auto& entry : index.at("versions")) {
      const int id = entry.at("id").get<int>();
      const auto dir = version_dir(id);
      const auto meta = detail::read_json(dir / "meta.json");
      ModelVersion v;
      v.id = id;
      v.status = parse_status(entry.at("status").get<std::string>());
      v.model = load_model(dir / "model.bin");
      v.benign_accuracy = meta.at("benign_accuracy").get<double>();
      v.final_train_loss = meta.at("final_train_loss").get<double>();
      v.config = train_config_from_json(meta.at("config"));
      v.assignment = HiddenAssignment::from_latents_json(meta.at("latents"), meta.at("sigma0").get<double>(),
                                                         meta.at("samples_per_label").get<int>());
      if (!versions_.empty() && id <= versions_.back().id) throw IoError("store index ids not strictly increasing");
      versions_.push_back(std::move(v));
    }
  }

  std::filesystem::path root_;
  std::vector<ModelVersion> versions_;
};

/// Retires the deployed version, samples a fresh hidden assignment, trains and deploys a new
/// version. The training seed is drawn from `rng` so each version starts from its own
/// initialisation.
inline const ModelVersion& retire_and_replace(VersionStore& store, const TaskDataset& task, double sigma0,
                                              TrainConfig config, Rng& rng, int samples_per_label = 100) {
  auto assignment = assign_per_label(task.num_classes, sigma0, rng, samples_per_label);
  config.seed = rng();
  return store.deploy(train_version(task, assignment, config));
}

}  // namespace vrec

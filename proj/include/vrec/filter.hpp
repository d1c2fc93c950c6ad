#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrec/nnet.hpp"

namespace vrec {

/// Maximum loss gap of `x` between the deployed model and each breached model, measured at the
/// deployed model's predicted label:
///
///   max_j  NLL(deployed(x), y_t) - NLL(breached_j(x), y_t),   y_t = argmax deployed(x)
struct DeltaMax {
  double value = 0.0;
  int label = 0;                // y_t, the deployed model's prediction
  bool label_mismatch = false;  // some breached model predicts a different label
};

[[nodiscard]] inline DeltaMax delta_max_detail(std::span<const double> x, const MlpModel& deployed,
                                               std::span<const MlpModel> breached) {
  if (breached.empty()) throw std::invalid_argument("delta_max: no breached versions");
  const auto t = forward_trace(deployed, x);
  DeltaMax out;
  out.label = static_cast<int>(argmax(t.probs));
  const double own = loss_from_trace(t, out.label, LossKind::neg_log_likelihood);
  out.value = -std::numeric_limits<double>::infinity();
  for (const auto& m : breached) {
    const auto tb = forward_trace(m, x);
    out.value = std::max(out.value, own - loss_from_trace(tb, out.label, LossKind::neg_log_likelihood));
    out.label_mismatch = out.label_mismatch || static_cast<int>(argmax(tb.probs)) != out.label;
  }
  return out;
}

[[nodiscard]] inline double delta_max(std::span<const double> x, const MlpModel& deployed,
                                      std::span<const MlpModel> breached) {
  return delta_max_detail(x, deployed, breached).value;
}

inline constexpr std::size_t kMinCalibrationSize = 100;

/// Flags inputs at or above the (1 - fpr) quantile of benign Delta_max; the quantile is the
/// order statistic at 1-based index ceil((1 - fpr) n) of the ascending benign values.
[[nodiscard]] inline double threshold_from_deltas(std::vector<double> benign_deltas, double target_fpr) {
  if (benign_deltas.size() < kMinCalibrationSize) {
    throw std::invalid_argument("calibrate: need at least " + std::to_string(kMinCalibrationSize) +
                                " validation inputs, got " + std::to_string(benign_deltas.size()));
  }
  if (!(target_fpr >= 0.0 && target_fpr <= 0.5)) throw std::invalid_argument("calibrate: target FPR must be in [0, 0.5]");
  return ceil_quantile(std::move(benign_deltas), 1.0 - target_fpr);
}

enum class Decision { clean, flagged };

struct FilterVerdict {
  int label = 0;
  double delta_max = 0.0;
  Decision decision = Decision::clean;
  bool label_mismatch = false;
};

/// Immutable once calibrated; recalibration builds a new state.
struct FilterState {
  int deployed_id = 0;
  std::vector<int> breached_ids;
  MlpModel deployed;
  std::vector<MlpModel> breached;
  std::optional<double> threshold;
  double target_fpr = 0.05;
  std::size_t calibration_size = 0;
  std::vector<double> benign_deltas;  // calibration distribution, kept for reporting

  bool calibrated() const { return threshold.has_value(); }
};

[[nodiscard]] inline std::vector<double> benign_deltas(const MlpModel& deployed, std::span<const MlpModel> breached,
                                                       std::span<const Sample> benign) {
  std::vector<double> out;
  out.reserve(benign.size());
  for (const auto& s : benign) out.push_back(delta_max(s.x, deployed, breached));
  return out;
}

[[nodiscard]] inline double calibrate(const MlpModel& deployed, std::span<const MlpModel> breached,
                                      std::span<const Sample> benign_validation, double target_fpr) {
  return threshold_from_deltas(benign_deltas(deployed, breached, benign_validation), target_fpr);
}

[[nodiscard]] inline FilterState make_filter(MlpModel deployed, std::vector<MlpModel> breached,
                                             std::span<const Sample> benign_validation, double target_fpr) {
  FilterState s;
  s.deployed = std::move(deployed);
  s.breached = std::move(breached);
  s.target_fpr = target_fpr;
  s.benign_deltas = benign_deltas(s.deployed, s.breached, benign_validation);
  s.threshold = threshold_from_deltas(s.benign_deltas, target_fpr);
  s.calibration_size = benign_validation.size();
  return s;
}

[[nodiscard]] inline Decision decide(double delta, double threshold) {
  return delta >= threshold ? Decision::flagged : Decision::clean;
}

[[nodiscard]] inline FilterVerdict judge(std::span<const double> x, const FilterState& state) {
  if (!state.calibrated()) throw std::logic_error("judge: filter state is not calibrated");
  const auto d = delta_max_detail(x, state.deployed, state.breached);
  return {d.label, d.value, decide(d.value, *state.threshold), d.label_mismatch};
}

/// Calibration report: {fpr_target, threshold, n_validation, histogram}. The histogram uses
/// fixed bins of width 0.25 on [-2, 4] plus underflow and overflow counts.
[[nodiscard]] inline nlohmann::json calibration_report(const FilterState& state) {
  constexpr double lo = -2.0;
  constexpr double width = 0.25;
  constexpr int bins = 24;
  std::vector<int> counts(bins, 0);
  int under = 0;
  int over = 0;
  for (double d : state.benign_deltas) {
    if (d < lo) {
      ++under;
    } else if (d >= lo + width * bins) {
      ++over;
    } else {
      ++counts[static_cast<std::size_t>((d - lo) / width)];
    }
  }
  std::vector<double> edges;
  for (int i = 0; i <= bins; ++i) edges.push_back(lo + width * i);
  return {{"fpr_target", state.target_fpr},
          {"threshold", state.threshold ? nlohmann::json(*state.threshold) : nlohmann::json(nullptr)},
          {"n_validation", state.calibration_size},
          {"deployed_id", state.deployed_id},
          {"breached_ids", state.breached_ids},
          {"histogram", {{"bin_edges", edges}, {"counts", counts}, {"underflow", under}, {"overflow", over}}}};
}

}  // namespace vrec

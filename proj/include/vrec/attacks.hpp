#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrec/nnet.hpp"

namespace vrec {

enum class AttackKind { pgd, cw, ead, pgd_dropout, pgd_low_confidence };

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw: return "cw";
    case AttackKind::ead: return "ead";
    case AttackKind::pgd_dropout: return "pgd_dropout";
    case AttackKind::pgd_low_confidence: return "pgd_low_confidence";
  }
  return "unknown";
}

inline AttackKind parse_attack_kind(const std::string& s) {
  for (auto k : {AttackKind::pgd, AttackKind::cw, AttackKind::ead, AttackKind::pgd_dropout, AttackKind::pgd_low_confidence}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown attack kind '" + s + "'");
}

struct AttackBudget {
  // PGD family
  double epsilon = 0.1;  // L-infinity bound
  double step = 0.01;    // signed-gradient step size
  int steps = 100;
  double p_drop = 0.1;         // dropout attack: fraction of pixels zeroed per step
  double target_prob = 0.95;   // low-confidence attack: stop once mean p(y_t) reaches this
  // CW / EAD
  double c_init = 1.0;
  double c_min = 1e-3;
  double c_max = 1e2;
  int search_rounds = 6;
  int cw_steps = 200;
  double cw_learning_rate = 0.01;
  double beta = 0.01;  // EAD L1 weight
  double confidence = 4.0;  // CW / EAD: margin of z_t over the runner-up that the loss drives toward
  // input box
  double box_lo = 0.0;
  double box_hi = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon > 0.0) || !(step > 0.0)) throw std::invalid_argument("AttackBudget: epsilon and step must be positive");
    if (steps < 0 || cw_steps < 0) throw std::invalid_argument("AttackBudget: step counts must be nonnegative");
    if (search_rounds < 1) throw std::invalid_argument("AttackBudget: need at least one binary-search round");
    if (!(c_min >= 0.0 && c_min <= c_max)) throw std::invalid_argument("AttackBudget: need 0 <= c_min <= c_max");
    if (!(beta >= 0.0)) throw std::invalid_argument("AttackBudget: beta must be nonnegative");
    if (!(confidence >= 0.0)) throw std::invalid_argument("AttackBudget: confidence must be nonnegative");
    if (!(p_drop >= 0.0 && p_drop < 1.0)) throw std::invalid_argument("AttackBudget: p_drop must be in [0, 1)");
    if (!(target_prob > 0.0 && target_prob <= 1.0)) throw std::invalid_argument("AttackBudget: target_prob must be in (0, 1]");
    if (!(box_lo < box_hi)) throw std::invalid_argument("AttackBudget: empty input box");
  }
};

struct AdvExample {
  Vector original;
  Vector perturbed;
  int target = 0;
  AttackKind kind = AttackKind::pgd;
  AttackBudget budget;
  std::vector<int> model_ids;       // provenance, filled by callers that know them
  std::vector<double> final_losses;  // NLL toward target on each attacked model
  std::vector<bool> model_success;   // argmax == target on each attacked model
  bool success = false;
  int steps_taken = 0;

  Vector delta() const {
    Vector d(perturbed.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = perturbed[i] - original[i];
    return d;
  }
};

namespace detail {

inline void check_attack_args(std::span<const MlpModel> models, std::span<const double> x, int target) {
  if (models.empty()) throw std::invalid_argument("attack: no models");
  for (const auto& m : models) {
    check_input(m, x);
    check_label(m, target);
  }
}

/// Mean NLL toward `target` over `models` and its input gradient.
inline double ensemble_loss_grad(std::span<const MlpModel> models, std::span<const double> x, int target, Vector& grad) {
  grad.assign(x.size(), 0.0);
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(models.size());
  Vector gx;
  for (const auto& m : models) {
    const auto t = forward_trace(m, x);
    total += loss_from_trace(t, target, LossKind::neg_log_likelihood);
    const auto g = loss_grad_logits(t, target, LossKind::neg_log_likelihood);
    backward(m, t, g, {}, nullptr, 1.0, &gx);
    for (std::size_t i = 0; i < gx.size(); ++i) grad[i] += inv * gx[i];
  }
  return total * inv;
}

/// Mean over models of max(max_{k != t} z_k - z_t, -kappa) and its input gradient. Flat
/// (zero gradient) once a model already clears the margin.
inline double ensemble_margin_grad(std::span<const MlpModel> models, std::span<const double> x, int target,
                                   double kappa, Vector& grad) {
  grad.assign(x.size(), 0.0);
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(models.size());
  const auto t_idx = static_cast<std::size_t>(target);
  Vector gx;
  for (const auto& m : models) {
    const auto t = forward_trace(m, x);
    std::size_t rival = t_idx == 0 ? 1 : 0;
    for (std::size_t k = 0; k < t.logits.size(); ++k) {
      if (k != t_idx && t.logits[k] > t.logits[rival]) rival = k;
    }
    const double f = t.logits[rival] - t.logits[t_idx];
    if (f <= -kappa) {
      total -= kappa * inv;
      continue;
    }
    total += f * inv;
    Vector g(t.logits.size(), 0.0);
    g[rival] = 1.0;
    g[t_idx] = -1.0;
    backward(m, t, g, {}, nullptr, 1.0, &gx);
    for (std::size_t i = 0; i < gx.size(); ++i) grad[i] += inv * gx[i];
  }
  return total;
}

inline double mean_target_prob(std::span<const MlpModel> models, std::span<const double> x, int target) {
  double p = 0.0;
  for (const auto& m : models) p += forward(m, x)[static_cast<std::size_t>(target)];
  return p / static_cast<double>(models.size());
}

inline bool fools_all(std::span<const MlpModel> models, std::span<const double> x, int target) {
  for (const auto& m : models) {
    if (predict(m, x) != target) return false;
  }
  return true;
}

/// True when y_t beats every other logit by at least `margin` on every model (argmax ties
/// are left to fools_all).
inline bool fools_all_margin(std::span<const MlpModel> models, std::span<const double> x, int target, double margin) {
  for (const auto& m : models) {
    const auto t = forward_trace(m, x);
    const double zt = t.logits[static_cast<std::size_t>(target)];
    for (std::size_t k = 0; k < t.logits.size(); ++k) {
      if (static_cast<int>(k) == target) continue;
      if (!(zt - t.logits[k] >= margin)) return false;
    }
  }
  return true;
}

inline void project(Vector& delta, std::span<const double> x, double lo, double hi, double eps) {
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double d = std::clamp(delta[i], -eps, eps);
    delta[i] = std::clamp(x[i] + d, lo, hi) - x[i];
  }
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline AdvExample finish(std::span<const MlpModel> models, std::span<const double> x, Vector perturbed, int target,
                         AttackKind kind, const AttackBudget& budget) {
  AdvExample ex;
  ex.original.assign(x.begin(), x.end());
  ex.perturbed = std::move(perturbed);
  ex.target = target;
  ex.kind = kind;
  ex.budget = budget;
  ex.success = true;
  for (const auto& m : models) {
    const auto t = forward_trace(m, ex.perturbed);
    ex.final_losses.push_back(loss_from_trace(t, target, LossKind::neg_log_likelihood));
    const bool ok = static_cast<int>(argmax(t.probs)) == target;
    ex.model_success.push_back(ok);
    ex.success = ex.success && ok;
  }
  return ex;
}

/// Shared PGD loop. `p_drop` masks pixels of the iterate before each gradient evaluation;
/// `target_prob` < 1 halts once the mean target probability reaches it.
inline AdvExample pgd_loop(std::span<const MlpModel> models, std::span<const double> x, int target,
                           const AttackBudget& budget, double p_drop, double target_prob, AttackKind kind) {
  budget.validate();
  check_attack_args(models, x, target);
  Rng rng(budget.seed);
  Vector delta(x.size(), 0.0);
  Vector cur(x.begin(), x.end());
  Vector grad;
  Vector masked(x.size());
  Vector mask(x.size(), 1.0);
  int taken = 0;
  for (int n = 0; n < budget.steps; ++n) {
    if (target_prob < 1.0 && mean_target_prob(models, cur, target) >= target_prob) break;
    if (p_drop > 0.0) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = uniform(rng, 0.0, 1.0) < p_drop ? 0.0 : 1.0;
        masked[i] = mask[i] * cur[i];
      }
      ensemble_loss_grad(models, masked, target, grad);
      for (std::size_t i = 0; i < x.size(); ++i) grad[i] *= mask[i];
    } else {
      ensemble_loss_grad(models, cur, target, grad);
    }
    for (std::size_t i = 0; i < x.size(); ++i) delta[i] -= budget.step * sign(grad[i]);
    project(delta, x, budget.box_lo, budget.box_hi, budget.epsilon);
    for (std::size_t i = 0; i < x.size(); ++i) cur[i] = x[i] + delta[i];
    ++taken;
  }
  auto ex = finish(models, x, std::move(cur), target, kind, budget);
  ex.steps_taken = taken;
  if (target_prob < 1.0) ex.success = ex.success && mean_target_prob(models, ex.perturbed, target) >= target_prob;
  return ex;
}

/// CW-style binary search over c; `beta` > 0 adds the elastic-net L1 term via soft
/// thresholding after every step (EAD). The inner optimiser is Adam on
/// ||delta||_2^2 + c * mean margin loss, projected onto the input box.
inline AdvExample cw_loop(std::span<const MlpModel> models, std::span<const double> x, int target,
                          const AttackBudget& budget, double beta, AttackKind kind) {
  budget.validate();
  check_attack_args(models, x, target);
  const std::size_t d = x.size();
  std::optional<Vector> best;
  double best_cost = std::numeric_limits<double>::infinity();
  double lower = 0.0;
  double upper = std::numeric_limits<double>::infinity();
  double c = std::clamp(budget.c_init, budget.c_min, budget.c_max);
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double adam_eps = 1e-8;
  const double lr = budget.cw_learning_rate;
  const double shrink = lr * beta;
  int total_steps = 0;
  Vector grad;
  for (int round = 0; round < budget.search_rounds; ++round) {
    Vector delta(d, 0.0);
    Vector m1(d, 0.0);
    Vector m2(d, 0.0);
    Vector cur(x.begin(), x.end());
    bool found = false;
    for (int step = 1; step <= budget.cw_steps; ++step) {
      ensemble_margin_grad(models, cur, target, budget.confidence, grad);
      const double b1 = 1.0 - std::pow(beta1, step);
      const double b2 = 1.0 - std::pow(beta2, step);
      for (std::size_t i = 0; i < d; ++i) {
        const double g = 2.0 * delta[i] + c * grad[i];
        m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
        m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
        const double precond = std::sqrt(m2[i] / b2) + adam_eps;
        delta[i] -= lr * (m1[i] / b1) / precond;
        // Proximal L1 step in the same preconditioned metric as the Adam update.
        if (shrink > 0.0) delta[i] = sign(delta[i]) * std::max(0.0, std::abs(delta[i]) - shrink / precond);
        delta[i] = std::clamp(x[i] + delta[i], budget.box_lo, budget.box_hi) - x[i];
        cur[i] = x[i] + delta[i];
      }
      ++total_steps;
      if (fools_all_margin(models, cur, target, budget.confidence) && fools_all(models, cur, target)) {
        found = true;
        const double l2 = norm_l2(delta);
        const double cost = beta * norm_l1(delta) + l2 * l2;
        if (cost < best_cost) {
          best_cost = cost;
          best = cur;
        }
      }
    }
    if (found) {
      upper = std::min(upper, c);
      c = 0.5 * (lower + upper);
    } else {
      lower = std::max(lower, c);
      c = std::isfinite(upper) ? 0.5 * (lower + upper) : c * 10.0;
    }
    c = std::clamp(c, budget.c_min, budget.c_max);
  }
  auto ex = finish(models, x, best ? std::move(*best) : Vector(x.begin(), x.end()), target, kind, budget);
  ex.success = best.has_value();
  ex.steps_taken = total_steps;
  return ex;
}

}  // namespace detail

/// Targeted L-infinity PGD against the mean NLL of `models`, starting from the clean input.
[[nodiscard]] inline AdvExample pgd(std::span<const MlpModel> models, std::span<const double> x, int target,
                                    const AttackBudget& budget) {
  return detail::pgd_loop(models, x, target, budget, 0.0, 1.0, AttackKind::pgd);
}

/// PGD whose gradients are taken on copies of the iterate with a random `p_drop` fraction of
/// pixels zeroed.
[[nodiscard]] inline AdvExample pgd_dropout(std::span<const MlpModel> models, std::span<const double> x, int target,
                                            const AttackBudget& budget, double p_drop) {
  return detail::pgd_loop(models, x, target, budget, p_drop, 1.0, AttackKind::pgd_dropout);
}

/// PGD that stops as soon as the ensemble-mean target probability reaches `target_prob`.
[[nodiscard]] inline AdvExample pgd_low_confidence(std::span<const MlpModel> models, std::span<const double> x,
                                                   int target, const AttackBudget& budget, double target_prob) {
  if (!(target_prob > 1.0 / static_cast<double>(models.empty() ? 2 : models.front().num_classes()) && target_prob <= 1.0)) {
    throw std::invalid_argument("pgd_low_confidence: target_prob must be in (1/L, 1]");
  }
  return detail::pgd_loop(models, x, target, budget, 0.0, target_prob, AttackKind::pgd_low_confidence);
}

[[nodiscard]] inline AdvExample cw(std::span<const MlpModel> models, std::span<const double> x, int target,
                                   const AttackBudget& budget) {
  return detail::cw_loop(models, x, target, budget, 0.0, AttackKind::cw);
}

[[nodiscard]] inline AdvExample ead(std::span<const MlpModel> models, std::span<const double> x, int target,
                                    const AttackBudget& budget) {
  return detail::cw_loop(models, x, target, budget, budget.beta, AttackKind::ead);
}

/// Dispatches on `kind` using the budget's own p_drop / target_prob / beta.
[[nodiscard]] inline AdvExample run_attack(AttackKind kind, std::span<const MlpModel> models, std::span<const double> x,
                                           int target, const AttackBudget& budget) {
  switch (kind) {
    case AttackKind::pgd: return pgd(models, x, target, budget);
    case AttackKind::cw: return cw(models, x, target, budget);
    case AttackKind::ead: return ead(models, x, target, budget);
    case AttackKind::pgd_dropout: return pgd_dropout(models, x, target, budget, budget.p_drop);
    case AttackKind::pgd_low_confidence: return pgd_low_confidence(models, x, target, budget, budget.target_prob);
  }
  throw std::invalid_argument("run_attack: bad kind");
}

/// Attacker-side surrogate: zero floor(ratio * #weights) randomly chosen weights, then
/// finetune on a `data_fraction` share of `train` for `config.epochs` epochs.
[[nodiscard]] inline MlpModel prune_finetune(const MlpModel& model, double ratio, std::span<const Sample> train,
                                             double data_fraction, const TrainConfig& config) {
  if (!(ratio >= 0.0 && ratio <= 0.5)) throw std::invalid_argument("prune_finetune: ratio must be in [0, 0.5]");
  if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw std::invalid_argument("prune_finetune: data_fraction must be in (0, 1]");
  MlpModel out = model;
  Rng rng(derive_seed(config.seed, 0x9a11));
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t k = 0; k < out.layers().size(); ++k) {
    for (std::size_t j = 0; j < out.layers()[k].weight.data.size(); ++j) slots.emplace_back(k, j);
  }
  const auto n_prune = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(slots.size())));
  for (std::size_t i = 0; i < n_prune; ++i) {
    std::swap(slots[i], slots[i + uniform_index(rng, slots.size() - i)]);
    out.mutable_layers()[slots[i].first].weight.data[slots[i].second] = 0.0;
  }
  if (config.epochs == 0 || train.empty()) return out;
  std::vector<std::size_t> idx(train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  shuffle(idx, rng);
  const auto n_data = std::max<std::size_t>(1, static_cast<std::size_t>(data_fraction * static_cast<double>(train.size())));
  std::vector<Sample> attacker;
  for (std::size_t i = 0; i < n_data; ++i) attacker.push_back(train[idx[i]]);
  return sgd_train(std::move(out), attacker, config).model;
}

// JSON-lines records: one AdvExample per line.

inline nlohmann::json to_json(const AttackBudget& b) {
  return {{"epsilon", b.epsilon},   {"step", b.step},         {"steps", b.steps},
          {"p_drop", b.p_drop},     {"target_prob", b.target_prob},
          {"c_init", b.c_init},     {"c_min", b.c_min},       {"c_max", b.c_max},
          {"search_rounds", b.search_rounds}, {"cw_steps", b.cw_steps}, {"cw_learning_rate", b.cw_learning_rate},
          {"beta", b.beta},         {"confidence", b.confidence}, {"box_lo", b.box_lo},     {"box_hi", b.box_hi},
          {"seed", b.seed}};
}

inline AttackBudget attack_budget_from_json(const nlohmann::json& j) {
  AttackBudget b;
  for (const auto& [key, v] : j.items()) {
    if (key == "epsilon") b.epsilon = v.get<double>();
    else if (key == "step") b.step = v.get<double>();
    else if (key == "steps") b.steps = v.get<int>();
    else if (key == "p_drop") b.p_drop = v.get<double>();
    else if (key == "target_prob") b.target_prob = v.get<double>();
    else if (key == "c_init") b.c_init = v.get<double>();
    else if (key == "c_min") b.c_min = v.get<double>();
    else if (key == "c_max") b.c_max = v.get<double>();
    else if (key == "search_rounds") b.search_rounds = v.get<int>();
    else if (key == "cw_steps") b.cw_steps = v.get<int>();
    else if (key == "cw_learning_rate") b.cw_learning_rate = v.get<double>();
    else if (key == "beta") b.beta = v.get<double>();
    else if (key == "confidence") b.confidence = v.get<double>();
    else if (key == "box_lo") b.box_lo = v.get<double>();
    else if (key == "box_hi") b.box_hi = v.get<double>();
    else if (key == "seed") b.seed = v.get<std::uint64_t>();
    else throw std::invalid_argument("attack budget: unknown key '" + key + "'");
  }
  b.validate();
  return b;
}

inline nlohmann::json to_json(const AdvExample& e) {
  return {{"kind", to_string(e.kind)},
          {"target", e.target},
          {"seed", e.budget.seed},
          {"model_ids", e.model_ids},
          {"budget", to_json(e.budget)},
          {"success", e.success},
          {"model_success", e.model_success},
          {"final_losses", e.final_losses},
          {"steps_taken", e.steps_taken},
          {"original", e.original},
          {"perturbed", e.perturbed}};
}

inline AdvExample adv_example_from_json(const nlohmann::json& j) {
  AdvExample e;
  e.kind = parse_attack_kind(j.at("kind").get<std::string>());
  e.target = j.at("target").get<int>();
  e.budget = attack_budget_from_json(j.at("budget"));
  e.model_ids = j.at("model_ids").get<std::vector<int>>();
  e.success = j.at("success").get<bool>();
  e.model_success = j.at("model_success").get<std::vector<bool>>();
  e.final_losses = j.at("final_losses").get<std::vector<double>>();
  e.steps_taken = j.value("steps_taken", 0);
  e.original = j.at("original").get<Vector>();
  e.perturbed = j.at("perturbed").get<Vector>();
  return e;
}

inline void write_jsonl(std::ostream& os, std::span<const AdvExample> examples) {
  for (const auto& e : examples) os << to_json(e).dump() << '\n';
}

inline std::vector<AdvExample> read_jsonl(std::istream& is) {
  std::vector<AdvExample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(adv_example_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace vrec

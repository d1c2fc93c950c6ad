#pragma once

// Loss-gap bound for a pair of 1-D linear models sharing slope a:
//   F(x) = a x + b_F,  G(x) = a x + b_G,  D = b_G - b_F >= 0,
//   l2(M(x'), y_t) = (y_t - (a x' + b_M))^2.
// An attack optimised on F to loss <= gamma lies in
//   [(y_t - b_F - sqrt(gamma)) / a, (y_t - b_F + sqrt(gamma)) / a].
// It transfers to G (loss <= gamma') iff that interval lies inside G's gamma' interval, i.e.
// D <= sqrt(gamma') - sqrt(gamma). With x' uniform on F's interval,
//   P(l2_G - l2_F > T) = (D (D + 2 sqrt(gamma)) - T) / (4 sqrt(gamma) D),
// equivalently T = D (D + 2 sqrt(gamma) - 4 sqrt(gamma) p).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrec/core.hpp"

namespace vrec::theory {

struct LinearPair {
  double slope = 1.0;
  double intercept_f = 0.0;
  double intercept_g = 0.0;
  double gamma = 1.0;        // attack loss on F is at most gamma
  double gamma_prime = 25.0;  // transfer tolerance on G
  double target = 0.0;

  /// Swaps the intercepts if needed so that intercept_g >= intercept_f.
  [[nodiscard]] LinearPair normalized() const {
    LinearPair p = *this;
    if (p.intercept_g < p.intercept_f) std::swap(p.intercept_f, p.intercept_g);
    return p;
  }

  double gap() const { return std::abs(intercept_g - intercept_f); }

  void validate() const {
    if (!(slope > 0.0)) throw std::invalid_argument("LinearPair: slope must be positive");
    if (!(gamma > 0.0)) throw std::invalid_argument("LinearPair: gamma must be positive");
    if (!(gamma_prime > gamma)) throw std::invalid_argument("LinearPair: gamma' must exceed gamma");
  }

  /// Builds a pair with the given gap D, slope 1 and target 0.
  static LinearPair with_gap(double gap, double gamma, double gamma_prime) {
    return {1.0, 0.0, gap, gamma, gamma_prime, 0.0};
  }
};

enum class TransferCase { no_transfer, transfers };

[[nodiscard]] inline TransferCase transfer_case(const LinearPair& pair) {
  pair.validate();
  const double d = pair.gap();
  return d > std::sqrt(pair.gamma_prime) - std::sqrt(pair.gamma) ? TransferCase::no_transfer : TransferCase::transfers;
}

[[nodiscard]] inline double lower_bound_t(double gap, double gamma, double p) {
  if (!(gap >= 0.0)) throw std::invalid_argument("lower_bound_t: gap must be nonnegative");
  if (!(gamma > 0.0)) throw std::invalid_argument("lower_bound_t: gamma must be positive");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("lower_bound_t: p must be in [0, 1]");
  const double s = std::sqrt(gamma);
  return gap * (gap + 2.0 * s - 4.0 * s * p);
}

/// Closed-form exceedance probability, clamped to [0, 1]. For D = 0 the gap is identically
/// zero, so the probability is 1 when T < 0 and 0 otherwise.
[[nodiscard]] inline double exceed_probability(double gap, double gamma, double t) {
  if (gap == 0.0) return t < 0.0 ? 1.0 : 0.0;
  const double s = std::sqrt(gamma);
  return std::clamp((gap * (gap + 2.0 * s) - t) / (4.0 * s * gap), 0.0, 1.0);
}

/// Attack interval of F: x' with l2(F(x'), y_t) <= gamma.
[[nodiscard]] inline std::pair<double, double> attack_interval(const LinearPair& p) {
  const double s = std::sqrt(p.gamma);
  return {(p.target - p.intercept_f - s) / p.slope, (p.target - p.intercept_f + s) / p.slope};
}

[[nodiscard]] inline double l2_loss(double slope, double intercept, double x, double target) {
  const double r = target - (slope * x + intercept);
  return r * r;
}

struct MonteCarloResult {
  double probability = 0.0;
  std::size_t samples = 0;
  double ci_low = 0.0;  // normal-approximation 99.9% interval
  double ci_high = 0.0;
};

/// Fraction of x' ~ U(attack interval of F) with l2_G - l2_F > T. Rejects pairs for which the
/// attack does not transfer.
[[nodiscard]] inline MonteCarloResult monte_carlo_verify(const LinearPair& raw, double t, std::size_t n_samples,
                                                         std::uint64_t seed) {
  const LinearPair pair = raw.normalized();
  if (transfer_case(pair) != TransferCase::transfers) {
    throw std::invalid_argument("monte_carlo_verify: pair is in the no-transfer case");
  }
  if (n_samples < 10000) throw std::invalid_argument("monte_carlo_verify: need at least 1e4 samples");
  const auto [lo, hi] = attack_interval(pair);
  Rng rng(seed);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double x = uniform(rng, lo, hi);
    const double diff = l2_loss(pair.slope, pair.intercept_g, x, pair.target) -
                        l2_loss(pair.slope, pair.intercept_f, x, pair.target);
    hits += diff > t ? 1 : 0;
  }
  MonteCarloResult r;
  r.samples = n_samples;
  r.probability = static_cast<double>(hits) / static_cast<double>(n_samples);
  const double se = std::sqrt(r.probability * (1.0 - r.probability) / static_cast<double>(n_samples));
  r.ci_low = std::max(0.0, r.probability - 3.29 * se);
  r.ci_high = std::min(1.0, r.probability + 3.29 * se);
  return r;
}

struct GridPoint {
  double gap = 0.0;
  double gamma = 1.0;
  double gamma_prime = 25.0;
  double p = 0.95;
};

/// Verification report over a grid: analytic T at each point, case, and (for transferring
/// points) the empirical exceedance probability at that T.
[[nodiscard]] inline nlohmann::json verification_report(const std::vector<GridPoint>& grid, std::size_t n_samples,
                                                         std::uint64_t seed) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& g = grid[i];
    const auto pair = LinearPair::with_gap(g.gap, g.gamma, g.gamma_prime);
    const auto kase = transfer_case(pair);
    const double t = lower_bound_t(g.gap, g.gamma, g.p);
    nlohmann::json row{{"gap", g.gap},
                       {"gamma", g.gamma},
                       {"gamma_prime", g.gamma_prime},
                       {"p", g.p},
                       {"threshold", t},
                       {"case", kase == TransferCase::transfers ? "transfers" : "no_transfer"}};
    if (kase == TransferCase::transfers) {
      const auto mc = monte_carlo_verify(pair, t, n_samples, derive_seed(seed, i));
      row["empirical_p"] = mc.probability;
      row["ci"] = {mc.ci_low, mc.ci_high};
    } else {
      row["empirical_p"] = nullptr;
      row["ci"] = nullptr;
    }
    rows.push_back(std::move(row));
  }
  return {{"samples", n_samples}, {"seed", seed}, {"grid", rows}};
}

}  // namespace vrec::theory

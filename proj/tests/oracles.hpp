#pragma once

// Independent reference computations used by the tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "vrec/nnet.hpp"
#include "vrec/snnl.hpp"

namespace vrec::oracle {

/// Central finite-difference gradient of loss(model, x, label) with respect to x.
inline Vector fd_grad_input(const MlpModel& model, const Vector& x, int label, LossKind kind, double h = 1e-6) {
  Vector g(x.size());
  Vector xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double up = loss(model, xp, label, kind);
    xp[i] = x[i] - h;
    const double down = loss(model, xp, label, kind);
    xp[i] = x[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Central finite-difference gradient of the mean batch loss with respect to every
/// parameter, flattened layer by layer (weights row-major, then biases).
inline Vector fd_grad_params(const MlpModel& model, std::span<const Sample> batch, LossKind kind, double h = 1e-6) {
  auto mean_loss = [&](const MlpModel& m) {
    double s = 0.0;
    for (const auto& b : batch) s += loss(m, b.x, b.label, kind);
    return s / static_cast<double>(batch.size());
  };
  Vector out;
  MlpModel m = model;
  auto probe = [&](double& p) {
    const double keep = p;
    p = keep + h;
    const double up = mean_loss(m);
    p = keep - h;
    const double down = mean_loss(m);
    p = keep;
    out.push_back((up - down) / (2.0 * h));
  };
  for (auto& layer : m.mutable_layers()) {
    for (double& w : layer.weight.data) probe(w);
    for (double& b : layer.bias) probe(b);
  }
  return out;
}

inline Vector flatten(const ParamGradient& g) {
  Vector out;
  for (std::size_t k = 0; k < g.weights.size(); ++k) {
    out.insert(out.end(), g.weights[k].data.begin(), g.weights[k].data.end());
    out.insert(out.end(), g.biases[k].begin(), g.biases[k].end());
  }
  return out;
}

/// ||a - b|| / max(||a||, ||b||), with a tiny floor so two zero vectors compare equal.
inline double relative_error(const Vector& a, const Vector& b) {
  double diff = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

/// Random small model, input and label for gradient checks.
struct GradCase {
  MlpModel model;
  Vector x;
  int label = 0;
  LossKind kind = LossKind::neg_log_likelihood;
};

inline GradCase random_grad_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t in = 2 + uniform_index(rng, 7);
  const std::size_t classes = 2 + uniform_index(rng, 4);
  std::vector<std::size_t> hidden;
  const std::size_t depth = uniform_index(rng, 3);
  for (std::size_t d = 0; d < depth; ++d) hidden.push_back(3 + uniform_index(rng, 6));
  GradCase c;
  c.model = MlpModel::glorot(in, hidden, classes, rng());
  for (auto& layer : c.model.mutable_layers()) {
    for (double& b : layer.bias) b = uniform(rng, -0.3, 0.3);
  }
  c.x.resize(in);
  for (double& v : c.x) v = uniform(rng, -1.0, 1.0);
  c.label = static_cast<int>(uniform_index(rng, classes));
  c.kind = uniform(rng, 0.0, 1.0) < 0.5 ? LossKind::neg_log_likelihood : LossKind::squared_error;
  return c;
}

/// Worst relative error of grad_input and grad_params against finite differences over
/// `n` random cases.
inline double worst_gradient_error(int n, std::uint64_t seed) {
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto c = random_grad_case(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const auto gi = grad_input(c.model, c.x, c.label, c.kind);
    worst = std::max(worst, relative_error(gi, fd_grad_input(c.model, c.x, c.label, c.kind)));
    const std::vector<Sample> batch{{c.x, c.label}};
    const auto gp = flatten(grad_params(c.model, batch, c.kind));
    worst = std::max(worst, relative_error(gp, fd_grad_params(c.model, batch, c.kind)));
  }
  return worst;
}

// Direct evaluation of the definition with plain exponentials; rows with no partner add 0.
inline double brute_force_snnl(const Matrix& x, const std::vector<int>& y) {
  const std::size_t n = x.rows;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d = 0.0;
      for (std::size_t c = 0; c < x.cols; ++c) d += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
      const double e = std::exp(-d);
      den += e;
      if (y[j] == y[i]) num += e;
    }
    if (num > 0.0) total += std::log(num / den);
  }
  return -total / static_cast<double>(n);
}

}  // namespace vrec::oracle

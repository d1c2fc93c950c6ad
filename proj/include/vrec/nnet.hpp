#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vrec/core.hpp"

namespace vrec {

enum class Activation : std::uint8_t { identity = 0, relu = 1 };

enum class LossKind { neg_log_likelihood, squared_error };

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::identity;

  std::size_t in_dim() const { return weight.cols; }
  std::size_t out_dim() const { return weight.rows; }
  bool operator==(const DenseLayer&) const = default;
};

/// Dense feed-forward classifier whose last layer feeds a softmax.
class MlpModel {
 public:
  MlpModel() = default;

  explicit MlpModel(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { validate(); }

  /// Glorot-uniform weights, zero biases, ReLU hidden layers and an identity output layer.
  static MlpModel glorot(std::size_t input_dim, std::span<const std::size_t> hidden,
                         std::size_t num_classes, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<DenseLayer> layers;
    std::size_t in = input_dim;
    auto add = [&](std::size_t out, Activation act) {
      DenseLayer layer{Matrix(out, in), Vector(out, 0.0), act};
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      for (double& w : layer.weight.data) w = uniform(rng, -limit, limit);
      layers.push_back(std::move(layer));
      in = out;
    };
    for (std::size_t h : hidden) add(h, Activation::relu);
    add(num_classes, Activation::identity);
    return MlpModel(std::move(layers));
  }

  std::size_t input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
  std::size_t num_classes() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }
  std::size_t feature_dim() const { return layers_.empty() ? 0 : layers_.back().in_dim(); }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.data.size() + l.bias.size();
    return n;
  }

  void validate() const {
    if (layers_.empty()) throw std::invalid_argument("MlpModel: no layers");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& l = layers_[k];
      if (l.weight.rows == 0 || l.weight.cols == 0) throw std::invalid_argument("MlpModel: empty layer");
      if (l.weight.data.size() != l.weight.rows * l.weight.cols) {
        throw std::invalid_argument("MlpModel: weight storage does not match shape");
      }
      if (l.bias.size() != l.out_dim()) throw DimensionError("MlpModel: bias length", l.out_dim(), l.bias.size());
      if (k > 0 && layers_[k - 1].out_dim() != l.in_dim()) {
        throw DimensionError("MlpModel: layer " + std::to_string(k) + " input", layers_[k - 1].out_dim(), l.in_dim());
      }
      if (!all_finite(l.weight.data) || !all_finite(l.bias)) {
        throw std::invalid_argument("MlpModel: non-finite parameter in layer " + std::to_string(k));
      }
    }
    if (num_classes() < 2) throw std::invalid_argument("MlpModel: need at least two classes");
  }

  bool operator==(const MlpModel&) const = default;

 private:
  std::vector<DenseLayer> layers_;
};

/// Intermediate values of one forward pass, kept for backpropagation.
struct ForwardTrace {
  std::vector<Vector> inputs;  // inputs[k] feeds layer k
  std::vector<Vector> pre;     // pre-activations of layer k
  Vector logits;               // post-activation output of the last layer
  Vector probs;

  /// Penultimate representation, i.e. the input of the output layer.
  const Vector& features() const { return inputs.back(); }
};

namespace detail {

inline double apply(Activation a, double v) { return a == Activation::relu ? (v > 0.0 ? v : 0.0) : v; }

inline double apply_grad(Activation a, double pre) { return a == Activation::relu ? (pre > 0.0 ? 1.0 : 0.0) : 1.0; }

inline double log_sum_exp(std::span<const double> v) {
  double m = v[0];
  for (double e : v) m = std::max(m, e);
  double s = 0.0;
  for (double e : v) s += std::exp(e - m);
  return m + std::log(s);
}

inline void check_input(const MlpModel& model, std::span<const double> x) {
  if (x.size() != model.input_dim()) throw DimensionError("input", model.input_dim(), x.size());
}

inline void check_label(const MlpModel& model, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= model.num_classes()) {
    throw std::out_of_range("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(model.num_classes()) + ")");
  }
}

}  // namespace detail

[[nodiscard]] inline Vector softmax(std::span<const double> logits) {
  const double lse = detail::log_sum_exp(logits);
  Vector p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

[[nodiscard]] inline ForwardTrace forward_trace(const MlpModel& model, std::span<const double> x) {
  detail::check_input(model, x);
  ForwardTrace t;
  const auto& layers = model.layers();
  t.inputs.reserve(layers.size());
  t.pre.reserve(layers.size());
  Vector cur(x.begin(), x.end());
  for (const auto& l : layers) {
    Vector z(l.bias);
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      const auto w = l.weight.row(r);
      double s = 0.0;
      for (std::size_t c = 0; c < w.size(); ++c) s += w[c] * cur[c];
      z[r] += s;
    }
    Vector a(z.size());
    for (std::size_t r = 0; r < z.size(); ++r) a[r] = detail::apply(l.activation, z[r]);
    t.inputs.push_back(std::move(cur));
    t.pre.push_back(std::move(z));
    cur = std::move(a);
  }
  t.logits = std::move(cur);
  t.probs = softmax(t.logits);
  return t;
}

/// Softmax class probabilities.
[[nodiscard]] inline Vector forward(const MlpModel& model, std::span<const double> x) {
  return forward_trace(model, x).probs;
}

[[nodiscard]] inline int predict(const MlpModel& model, std::span<const double> x) {
  return static_cast<int>(argmax(forward(model, x)));
}

[[nodiscard]] inline double loss_from_trace(const ForwardTrace& t, int label, LossKind kind) {
  if (kind == LossKind::neg_log_likelihood) {
    return detail::log_sum_exp(t.logits) - t.logits[static_cast<std::size_t>(label)];
  }
  double s = 0.0;
  for (std::size_t c = 0; c < t.probs.size(); ++c) {
    const double d = (c == static_cast<std::size_t>(label) ? 1.0 : 0.0) - t.probs[c];
    s += d * d;
  }
  return s;
}

[[nodiscard]] inline double loss(const MlpModel& model, std::span<const double> x, int label,
                                 LossKind kind = LossKind::neg_log_likelihood) {
  detail::check_label(model, label);
  return loss_from_trace(forward_trace(model, x), label, kind);
}

/// Gradient of the loss with respect to the output-layer activations.
[[nodiscard]] inline Vector loss_grad_logits(const ForwardTrace& t, int label, LossKind kind) {
  const auto y = static_cast<std::size_t>(label);
  Vector g(t.probs.size());
  if (kind == LossKind::neg_log_likelihood) {
    for (std::size_t c = 0; c < g.size(); ++c) g[c] = t.probs[c] - (c == y ? 1.0 : 0.0);
    return g;
  }
  // d/dp_c = 2 (p_c - onehot_c), chained through the softmax Jacobian.
  Vector dp(g.size());
  double dot = 0.0;
  for (std::size_t c = 0; c < g.size(); ++c) {
    dp[c] = 2.0 * (t.probs[c] - (c == y ? 1.0 : 0.0));
    dot += dp[c] * t.probs[c];
  }
  for (std::size_t c = 0; c < g.size(); ++c) g[c] = t.probs[c] * (dp[c] - dot);
  return g;
}

/// Parameter-shaped gradient container.
struct ParamGradient {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static ParamGradient zeros_like(const MlpModel& model) {
    ParamGradient g;
    for (const auto& l : model.layers()) {
      g.weights.emplace_back(l.weight.rows, l.weight.cols);
      g.biases.emplace_back(l.bias.size(), 0.0);
    }
    return g;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights) {
      for (double v : w.data) s += v * v;
    }
    for (const auto& b : biases) {
      for (double v : b) s += v * v;
    }
    return s;
  }
};

/// Backpropagates `grad_out` (w.r.t. the last layer's activations) and an optional gradient on
/// the penultimate features. Parameter gradients are accumulated into `params` scaled by
/// `scale`; the input gradient is written to `grad_input` when non-null.
inline void backward(const MlpModel& model, const ForwardTrace& t, std::span<const double> grad_out,
                     std::span<const double> feature_grad, ParamGradient* params, double scale,
                     Vector* grad_input) {
  const auto& layers = model.layers();
  Vector g(grad_out.begin(), grad_out.end());
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& l = layers[k];
    const auto& pre = t.pre[k];
    for (std::size_t r = 0; r < g.size(); ++r) g[r] *= detail::apply_grad(l.activation, pre[r]);
    const auto& in = t.inputs[k];
    if (params != nullptr) {
      auto& gw = params->weights[k];
      auto& gb = params->biases[k];
      for (std::size_t r = 0; r < l.out_dim(); ++r) {
        const double gr = scale * g[r];
        if (gr == 0.0) continue;
        gb[r] += gr;
        auto row = gw.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += gr * in[c];
      }
    }
    if (k == 0 && grad_input == nullptr) break;
    Vector gin(l.in_dim(), 0.0);
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      if (g[r] == 0.0) continue;
      const auto w = l.weight.row(r);
      for (std::size_t c = 0; c < w.size(); ++c) gin[c] += w[c] * g[r];
    }
    if (k + 1 == layers.size() && !feature_grad.empty()) {
      for (std::size_t c = 0; c < gin.size(); ++c) gin[c] += feature_grad[c];
    }
    g = std::move(gin);
  }
  if (grad_input != nullptr) *grad_input = std::move(g);
}

/// Analytic gradient of the loss with respect to the input.
[[nodiscard]] inline Vector grad_input(const MlpModel& model, std::span<const double> x, int label,
                                       LossKind kind = LossKind::neg_log_likelihood) {
  detail::check_label(model, label);
  const auto t = forward_trace(model, x);
  const auto g = loss_grad_logits(t, label, kind);
  Vector gx;
  backward(model, t, g, {}, nullptr, 1.0, &gx);
  return gx;
}

struct Sample {
  Vector x;
  int label = 0;
};

/// Gradient of the mean loss over `batch` with respect to the parameters.
[[nodiscard]] inline ParamGradient grad_params(const MlpModel& model, std::span<const Sample> batch,
                                               LossKind kind = LossKind::neg_log_likelihood) {
  if (batch.empty()) throw std::invalid_argument("grad_params: empty batch");
  auto grads = ParamGradient::zeros_like(model);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    detail::check_label(model, s.label);
    const auto t = forward_trace(model, s.x);
    const auto g = loss_grad_logits(t, s.label, kind);
    backward(model, t, g, {}, &grads, scale, nullptr);
  }
  return grads;
}

struct TrainConfig {
  double learning_rate = 0.05;
  int epochs = 40;
  int batch_size = 64;
  std::uint64_t seed = 0;
  double lambda = 1.0;       // weight of the hidden-distribution term
  double snnl_weight = 0.5;  // weight of the feature-entanglement term
  std::vector<std::size_t> hidden_layers{64, 64};

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be nonnegative");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (!(lambda >= 0.0)) throw std::invalid_argument("TrainConfig: lambda must be nonnegative");
    if (!(snnl_weight >= 0.0)) throw std::invalid_argument("TrainConfig: snnl_weight must be nonnegative");
  }
};

/// One training example; `group` is the class identity used by feature-level terms.
struct WeightedSample {
  std::span<const double> x;
  int label = 0;
  double weight = 1.0;
  int group = 0;
};

/// A per-batch loss on penultimate features. Returns the term value (unweighted) and writes
/// d(term)/d(features) into `grad` (same shape as `features`).
using FeatureLoss = std::function<double(const Matrix& features, std::span<const int> groups, Matrix& grad)>;

struct ExtraLossTerm {
  double weight = 0.0;
  FeatureLoss fn;
};

struct TrainResult {
  MlpModel model;
  std::vector<double> epoch_losses;

  double final_loss() const { return epoch_losses.empty() ? std::nan("") : epoch_losses.back(); }
};

/// Mini-batch SGD on the weighted NLL plus any feature-level terms. Deterministic given
/// `config.seed`.
[[nodiscard]] inline TrainResult sgd_train(MlpModel model, std::span<const WeightedSample> data,
                                           const TrainConfig& config,
                                           std::span<const ExtraLossTerm> extra = {}) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("sgd_train: empty dataset");
  for (const auto& s : data) {
    detail::check_input(model, s.x);
    detail::check_label(model, s.label);
  }
  TrainResult result;
  Rng rng(derive_seed(config.seed, 0x5bd1e995));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const auto bs = static_cast<std::size_t>(config.batch_size);
  std::vector<ForwardTrace> traces;
  std::vector<int> groups;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const std::size_t b = end - start;
      const double inv_b = 1.0 / static_cast<double>(b);
      traces.clear();
      groups.clear();
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = data[order[i]];
        traces.push_back(forward_trace(model, s.x));
        groups.push_back(s.group);
        batch_loss += s.weight * loss_from_trace(traces.back(), s.label, LossKind::neg_log_likelihood) * inv_b;
      }
      Matrix feature_grad;
      bool have_feature_grad = false;
      for (const auto& term : extra) {
        if (term.weight == 0.0 || !term.fn) continue;
        Matrix feats(b, model.feature_dim());
        for (std::size_t i = 0; i < b; ++i) {
          std::copy(traces[i].features().begin(), traces[i].features().end(), feats.row(i).begin());
        }
        Matrix g(b, model.feature_dim());
        batch_loss += term.weight * term.fn(feats, groups, g);
        if (!have_feature_grad) {
          feature_grad = Matrix(b, model.feature_dim());
          have_feature_grad = true;
        }
        for (std::size_t i = 0; i < g.data.size(); ++i) feature_grad.data[i] += term.weight * g.data[i];
      }
      auto grads = ParamGradient::zeros_like(model);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& s = data[order[start + i]];
        auto g = loss_grad_logits(traces[i], s.label, LossKind::neg_log_likelihood);
        for (double& v : g) v *= s.weight * inv_b;
        std::span<const double> fg;
        if (have_feature_grad) fg = feature_grad.row(i);
        backward(model, traces[i], g, fg, &grads, 1.0, nullptr);
      }
      auto& layers = model.mutable_layers();
      for (std::size_t k = 0; k < layers.size(); ++k) {
        auto& w = layers[k].weight.data;
        const auto& gw = grads.weights[k].data;
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= config.learning_rate * gw[j];
        auto& bias = layers[k].bias;
        for (std::size_t j = 0; j < bias.size(); ++j) bias[j] -= config.learning_rate * grads.biases[k][j];
      }
      epoch_loss += batch_loss;
      ++n_batches;
    }
    epoch_loss /= static_cast<double>(n_batches);
    if (!std::isfinite(epoch_loss)) throw TrainingDiverged(epoch, epoch_loss);
    result.epoch_losses.push_back(epoch_loss);
  }
  result.model = std::move(model);
  return result;
}

/// Convenience overload: unit-weight samples, each label its own group.
[[nodiscard]] inline TrainResult sgd_train(MlpModel model, std::span<const Sample> data, const TrainConfig& config) {
  std::vector<WeightedSample> ws;
  ws.reserve(data.size());
  for (const auto& s : data) ws.push_back({s.x, s.label, 1.0, s.label});
  return sgd_train(std::move(model), ws, config);
}

[[nodiscard]] inline double accuracy(const MlpModel& model, std::span<const Sample> data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : data) hits += predict(model, s.x) == s.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace vrec

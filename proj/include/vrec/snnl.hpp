#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "vrec/core.hpp"

namespace vrec {

/// Soft nearest neighbour loss over the rows of `features`:
///
///   SNNL = -(1/N) sum_i log( sum_{j != i, y_j = y_i} exp(-|x_i - x_j|^2)
///                           / sum_{k != i} exp(-|x_i - x_k|^2) )
///
/// Rows without a same-label partner contribute nothing and are counted in `excluded`; the
/// normaliser stays N.
struct SnnlResult {
  double value = 0.0;
  std::size_t excluded = 0;
};

namespace detail {

inline double log_sum_exp_masked(std::span<const double> v, const std::vector<char>& mask) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i]) m = std::max(m, v[i]);
  }
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i]) s += std::exp(v[i] - m);
  }
  return m + std::log(s);
}

}  // namespace detail

/// Computes the loss and, when `grad` is non-null, its gradient with respect to `features`.
inline SnnlResult snnl(const Matrix& features, std::span<const int> labels, Matrix* grad = nullptr) {
  const std::size_t n = features.rows;
  if (labels.size() != n) throw DimensionError("snnl labels", n, labels.size());
  if (n < 2) throw std::invalid_argument("snnl: need at least two rows");
  if (grad != nullptr) *grad = Matrix(n, features.cols);

  Matrix neg_dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d = 0.0;
      const auto a = features.row(i);
      const auto b = features.row(j);
      for (std::size_t c = 0; c < a.size(); ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
      neg_dist(i, j) = -d;
      neg_dist(j, i) = -d;
    }
  }

  SnnlResult out;
  std::vector<char> same(n);
  std::vector<char> other(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool has_partner = false;
    for (std::size_t j = 0; j < n; ++j) {
      other[j] = j != i;
      same[j] = j != i && labels[j] == labels[i];
      has_partner = has_partner || same[j];
    }
    if (!has_partner) {
      ++out.excluded;
      continue;
    }
    const auto row = neg_dist.row(i);
    const double log_same = detail::log_sum_exp_masked(row, same);
    const double log_all = detail::log_sum_exp_masked(row, other);
    out.value += (log_all - log_same) * inv_n;
    if (grad == nullptr) continue;
    // d term_i / d D_ij = [same] e_ij / S_i - e_ij / T_i, with D_ij = |x_i - x_j|^2.
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double coef = -std::exp(row[j] - log_all);
      if (same[j]) coef += std::exp(row[j] - log_same);
      coef *= inv_n;
      if (coef == 0.0) continue;
      auto gi = grad->row(i);
      auto gj = grad->row(j);
      const auto xi = features.row(i);
      const auto xj = features.row(j);
      for (std::size_t c = 0; c < xi.size(); ++c) {
        const double g = 2.0 * coef * (xi[c] - xj[c]);
        gi[c] += g;
        gj[c] -= g;
      }
    }
  }
  return out;
}

}  // namespace vrec

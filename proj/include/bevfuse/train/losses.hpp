#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "bevfuse/diffcore/ops.hpp"

namespace bevfuse::train {

using diff::Graph;
using diff::Shape;
using diff::Tensor;
using diff::Var;

struct LossWeights {
  double bce = 1.0;
  double aux = 0.4;
  double dice = 1.0;
  double dice_smooth = 1.0;

  void validate() const {
    if (!(bce >= 0 && aux >= 0 && dice >= 0 && dice_smooth > 0)) {
      throw std::invalid_argument("loss weights must be nonnegative and dice smoothing positive");
    }
  }
};

namespace detail {

inline void require_target(const Var& logits, const Tensor& target, const char* op) {
  if (logits.shape() != target.shape()) {
    throw diff::ShapeError(std::string(op) + ": logits " + diff::shape_str(logits.shape()) +
                           " vs target " + diff::shape_str(target.shape()));
  }
}

/// -[y log s(x) + (1 - y) log(1 - s(x))] = max(x, 0) - x y + log(1 + exp(-|x|)).
inline double bce_cell(double x, double y) {
  return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

/// Mean binary cross-entropy on raw logits.
inline Var bce_loss(Var logits, const Tensor& target) {
  detail::require_target(logits, target, "bce_loss");
  const Tensor& x = logits.value();
  const std::size_t n = x.size();
  if (n == 0) throw diff::ShapeError("bce_loss: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += detail::bce_cell(x[i], target[i]);
  Graph& g = *logits.graph;
  const std::size_t xi = logits.id;
  return g.emplace("bce_loss", {xi}, Tensor::scalar(acc / static_cast<double>(n)),
                   [xi, target, n](Graph& g, std::size_t self) {
                     const double up = g.grad(self)[0] / static_cast<double>(n);
                     const Tensor& x = g.value(xi);
                     Tensor& dx = g.grad_ref(xi);
                     for (std::size_t i = 0; i < n; ++i) {
                       dx[i] += up * (diff::sigmoid_scalar(x[i]) - target[i]);
                     }
                   });
}

/// 1 - (2 sum(p y) + s) / (sum p + sum y + s) with p = sigmoid(logits).
inline Var dice_loss(Var logits, const Tensor& target, double smooth = 1.0) {
  detail::require_target(logits, target, "dice_loss");
  const Tensor& x = logits.value();
  const std::size_t n = x.size();
  Tensor p(x.shape());
  double inter = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = diff::sigmoid_scalar(x[i]);
    inter += p[i] * target[i];
    sp += p[i];
    sy += target[i];
  }
  const double num = 2.0 * inter + smooth, den = sp + sy + smooth;
  Graph& g = *logits.graph;
  const std::size_t xi = logits.id;
  return g.emplace("dice_loss", {xi}, Tensor::scalar(1.0 - num / den),
                   [=](Graph& g, std::size_t self) {
                     const double up = g.grad(self)[0];
                     Tensor& dx = g.grad_ref(xi);
                     // dL/dp_i = -(2 y_i den - num) / den^2
                     for (std::size_t i = 0; i < n; ++i) {
                       const double dp = -(2.0 * target[i] * den - num) / (den * den);
                       dx[i] += up * dp * p[i] * (1.0 - p[i]);
                     }
                   });
}

/// Scalar form of the weighted objective.
inline double combine(const LossWeights& w, double bce, double aux, double dice) {
  return w.bce * bce + w.aux * aux + w.dice * dice;
}

struct LossTerms {
  Var total;
  double bce = 0, aux = 0, dice = 0;
};

/// alpha1 * BCE(main) + alpha2 * BCE(aux) + alpha3 * Dice(main).
inline LossTerms total_loss(Var main_logits, Var aux_logits, const Tensor& target,
                            const Tensor& aux_target, const LossWeights& w = {}) {
  w.validate();
  Var b = bce_loss(main_logits, target);
  Var a = bce_loss(aux_logits, aux_target);
  Var d = dice_loss(main_logits, target, w.dice_smooth);
  Var t = diff::add(diff::add(diff::scale(b, w.bce), diff::scale(a, w.aux)), diff::scale(d, w.dice));
  return {t, b.value()[0], a.value()[0], d.value()[0]};
}

}  // namespace bevfuse::train

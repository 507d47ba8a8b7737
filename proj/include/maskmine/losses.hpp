#pragma once

// Differentiable training objectives. Every loss returns its value plus
// the analytic gradient with respect to the logits, verified against
// central finite differences in the test suite. Templated on the scalar
// type so checks can run in 64-bit arithmetic.

#include <cmath>
#include <span>
#include <vector>

#include "maskmine/core.hpp"
#include "maskmine/weight_map.hpp"

namespace maskmine {

template <typename T>
struct LossValue {
  T value{};
  std::vector<T> grad;  // w.r.t. the logits argument, same layout
};

namespace detail {

template <typename T>
void require_finite(std::span<const T> xs, const char* what) {
  for (T x : xs)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
}

// column-wise softmax of (C, N) logits
template <typename T>
std::vector<T> softmax(std::span<const T> logits, int64_t channels, int64_t n) {
  std::vector<T> p(logits.begin(), logits.end());
  for (int64_t i = 0; i < n; ++i) {
    T mx = p[static_cast<size_t>(i)];
    for (int64_t c = 1; c < channels; ++c) mx = std::max(mx, p[static_cast<size_t>(c * n + i)]);
    T sum = 0;
    for (int64_t c = 0; c < channels; ++c) {
      T e = std::exp(p[static_cast<size_t>(c * n + i)] - mx);
      p[static_cast<size_t>(c * n + i)] = e;
      sum += e;
    }
    for (int64_t c = 0; c < channels; ++c) p[static_cast<size_t>(c * n + i)] /= sum;
  }
  return p;
}

}  // namespace detail

// Weighted softmax cross-entropy over C classes:
//   L = sum_i w_i * (-log p(y_i)) / sum_i w_i
template <typename T>
LossValue<T> weighted_cross_entropy(std::span<const T> logits, std::span<const uint8_t> target,
                                    std::span<const T> weights, int64_t channels) {
  int64_t n = static_cast<int64_t>(target.size());
  if (static_cast<int64_t>(logits.size()) != channels * n)
    throw ShapeError("cross_entropy: logits/target size mismatch");
  if (!weights.empty() && static_cast<int64_t>(weights.size()) != n)
    throw ShapeError("cross_entropy: weight size mismatch");
  detail::require_finite(logits, "cross_entropy");

  std::vector<T> p = detail::softmax(logits, channels, n);
  T wsum = 0;
  T loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    uint8_t y = target[static_cast<size_t>(i)];
    if (y >= channels) throw DomainError("cross_entropy: target class out of range");
    T w = weights.empty() ? T(1) : weights[static_cast<size_t>(i)];
    if (!(w > 0)) throw ParameterError("cross_entropy: weights must be positive");
    wsum += w;
    T py = std::max(p[static_cast<size_t>(y * n + i)], T(1e-30));
    loss -= w * std::log(py);
  }
  LossValue<T> out;
  out.value = loss / wsum;
  out.grad.resize(logits.size());
  for (int64_t i = 0; i < n; ++i) {
    uint8_t y = target[static_cast<size_t>(i)];
    T w = (weights.empty() ? T(1) : weights[static_cast<size_t>(i)]) / wsum;
    for (int64_t c = 0; c < channels; ++c)
      out.grad[static_cast<size_t>(c * n + i)] =
          w * (p[static_cast<size_t>(c * n + i)] - (c == y ? T(1) : T(0)));
  }
  return out;
}

// Pixel-weighted cross-entropy for the binary (2-channel) head.
template <typename T>
LossValue<T> pwce_loss(std::span<const T> logits, std::span<const uint8_t> target,
                       std::span<const T> weights) {
  return weighted_cross_entropy(logits, target, weights, 2);
}

// Smooth dice score (2 sum(p*g) + s) / (sum p + sum g + s), in (0, 1].
template <typename T>
struct DiceScore {
  T score{};
  std::vector<T> grad;  // d score / d probs
};

template <typename T>
DiceScore<T> smooth_dice(std::span<const T> probs, std::span<const uint8_t> target, T s = T(1)) {
  if (probs.size() != target.size()) throw ShapeError("smooth_dice: size mismatch");
  T inter = 0, psum = 0, gsum = 0;
  for (size_t i = 0; i < probs.size(); ++i) {
    inter += probs[i] * static_cast<T>(target[i]);
    psum += probs[i];
    gsum += static_cast<T>(target[i]);
  }
  T num = 2 * inter + s;
  T den = psum + gsum + s;
  DiceScore<T> out;
  out.score = num / den;
  out.grad.resize(probs.size());
  for (size_t i = 0; i < probs.size(); ++i)
    out.grad[i] = (2 * static_cast<T>(target[i]) * den - num) / (den * den);
  return out;
}

// Lesion loss: L = pwce / (dice + eps), with the dice score computed on
// the foreground softmax probability channel of the same logits.
template <typename T>
LossValue<T> combined_lesion_loss(std::span<const T> logits, std::span<const uint8_t> target,
                                  std::span<const T> weights, T eps = T(1e-5), T s = T(1)) {
  int64_t n = static_cast<int64_t>(target.size());
  LossValue<T> ce = pwce_loss(logits, target, weights);
  std::vector<T> p = detail::softmax(logits, 2, n);
  std::span<const T> fg(p.data() + n, static_cast<size_t>(n));
  DiceScore<T> dice = smooth_dice(fg, target, s);

  T denom = dice.score + eps;
  LossValue<T> out;
  out.value = ce.value / denom;
  out.grad.resize(logits.size());
  // dL = dCE/denom - CE/denom^2 * dDice; dDice flows through the 2-class
  // softmax: dp_fg/dz_fg = p(1-p), dp_fg/dz_bg = -p(1-p)
  for (int64_t i = 0; i < n; ++i) {
    T pf = fg[static_cast<size_t>(i)];
    T jac = pf * (1 - pf);
    T dd = dice.grad[static_cast<size_t>(i)];
    T common = ce.value / (denom * denom);
    out.grad[static_cast<size_t>(n + i)] =
        ce.grad[static_cast<size_t>(n + i)] / denom - common * dd * jac;
    out.grad[static_cast<size_t>(i)] = ce.grad[static_cast<size_t>(i)] / denom + common * dd * jac;
  }
  return out;
}

// Mining loss, pwce variant: plain 4-class cross-entropy over the error
// classes; unweighted by default so class frequency drives the signal.
template <typename T>
LossValue<T> multiclass_pwce(std::span<const T> logits, std::span<const uint8_t> error_classes,
                             std::span<const T> weights = {}) {
  return weighted_cross_entropy(logits, error_classes, weights, 4);
}

// Mining loss, dice variant: mean over the four channels of
// 1 - smooth_dice(sigmoid(logit_c), target_c). Sigmoid rather than
// softmax because TP replacement makes target channels overlap.
template <typename T>
LossValue<T> multiclass_dice(std::span<const T> logits,
                             const std::array<std::span<const uint8_t>, 4>& targets, T s = T(1)) {
  int64_t n = static_cast<int64_t>(targets[0].size());
  if (static_cast<int64_t>(logits.size()) != 4 * n)
    throw ShapeError("multiclass_dice: expected 4 channels");
  detail::require_finite(logits, "multiclass_dice");

  LossValue<T> out;
  out.value = 0;
  out.grad.assign(logits.size(), T(0));
  std::vector<T> probs(static_cast<size_t>(n));
  for (int c = 0; c < 4; ++c) {
    if (static_cast<int64_t>(targets[static_cast<size_t>(c)].size()) != n)
      throw ShapeError("multiclass_dice: target channel size mismatch");
    const T* z = logits.data() + c * n;
    for (int64_t i = 0; i < n; ++i)
      probs[static_cast<size_t>(i)] = T(1) / (T(1) + std::exp(-z[i]));
    DiceScore<T> d = smooth_dice<T>(probs, targets[static_cast<size_t>(c)], s);
    out.value += (T(1) - d.score) / T(4);
    for (int64_t i = 0; i < n; ++i) {
      T p = probs[static_cast<size_t>(i)];
      out.grad[static_cast<size_t>(c * n + i)] = -d.grad[static_cast<size_t>(i)] * p * (1 - p) / T(4);
    }
  }
  return out;
}

}  // namespace maskmine

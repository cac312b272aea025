// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "xcaps/tensor.hpp"

namespace xcaps::losses {

// Defaults follow the three-part objective: per-attribute weights and the
// malignancy weight at 1, reconstruction at 0.512 for 32x32 patches.
struct LossWeights {
  std::vector<double> alpha = std::vector<double>(6, 1.0);
  double beta = 1.0;
  double gamma = 0.512;

  void validate() const {
    for (double a : alpha)
      if (a < 0) throw std::invalid_argument("loss weights: alpha must be >= 0");
    if (beta < 0 || gamma < 0) throw std::invalid_argument("loss weights: beta/gamma must be >= 0");
  }
};

struct LossBreakdown {
  double l_r = 0.0;
  double l_a = 0.0;
  std::vector<double> l_a_per_attribute;
  double l_m = 0.0;
  double total = 0.0;
};

inline LossBreakdown make_breakdown(double l_m, double l_a, std::vector<double> per_attribute,
                                    double l_r) {
  LossBreakdown b;
  b.l_m = l_m;
  b.l_a = l_a;
  b.l_a_per_attribute = std::move(per_attribute);
  b.l_r = l_r;
  b.total = l_m + l_a + l_r;
  return b;
}

// Masked reconstruction: mean absolute deviation between the decoder output
// and the mask-gated input, scaled by gamma. Only nodule pixels carry signal;
// everything else is pushed to zero.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& recon, const std::vector<T>& image,
                              const std::vector<T>& mask, T gamma) {
  const std::size_t n = recon.size();
  if (image.size() != n || mask.size() != n)
    throw std::invalid_argument("reconstruction_loss: image/mask size mismatch");
  std::vector<T> target(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] != T(0) && mask[i] != T(1))
      throw std::invalid_argument("reconstruction_loss: mask value " + std::to_string(mask[i]) +
                                  " outside {0,1}");
    target[i] = image[i] * mask[i];
  }
  Tensor<T> r(recon.shape(), std::move(target));
  return scale(sum_all(abs(sub(r, recon))), gamma / static_cast<T>(n));
}

// Weighted sum of absolute attribute errors, scores in normalized [0,1] units.
template <typename T>
Tensor<T> attribute_loss(const Tensor<T>& pred, const std::vector<T>& target,
                         const std::vector<T>& alpha) {
  if (pred.size() != target.size() || pred.size() != alpha.size())
    throw std::invalid_argument("attribute_loss: length mismatch (" + std::to_string(pred.size()) +
                                " pred, " + std::to_string(target.size()) + " target, " +
                                std::to_string(alpha.size()) + " alpha)");
  Tensor<T> t(pred.shape(), std::vector<T>(target));
  Tensor<T> a(pred.shape(), std::vector<T>(alpha));
  return sum_all(mul(a, abs(sub(t, pred))));
}

template <typename T>
std::vector<double> attribute_loss_terms(const std::vector<T>& pred, const std::vector<T>& target,
                                         const std::vector<T>& alpha) {
  std::vector<double> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i)
    out[i] = static_cast<double>(alpha[i]) *
             std::abs(static_cast<double>(target[i]) - static_cast<double>(pred[i]));
  return out;
}

// Discrete Gaussian target over integer class centers 1..K: pdf values
// floored at 1e-7 and normalized, so KL against it is always defined.
inline constexpr double kProbFloor = 1e-7;

inline std::vector<double> fit_target_distribution(double mu, double sigma, std::size_t classes) {
  if (classes < 2) throw std::invalid_argument("fit_target_distribution: need at least 2 classes");
  if (!(sigma > 0.0)) throw std::logic_error("fit_target_distribution: sigma must be positive");
  std::vector<double> g(classes);
  double sum = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    const double x = static_cast<double>(k + 1) - mu;
    g[k] = std::max(std::exp(-x * x / (2.0 * sigma * sigma)), kProbFloor);
    sum += g[k];
  }
  for (double& v : g) v /= sum;
  return g;
}

namespace detail_losses {

inline void check_distribution(const std::vector<double>& g) {
  double sum = 0.0;
  for (double v : g) {
    if (!(v > 0.0)) throw std::invalid_argument("kl loss: target has non-positive entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("kl loss: target sums to " + std::to_string(sum) + ", not 1");
}

}  // namespace detail_losses

// beta * KL(softmax(logits) || g), with the prediction inside the log
// numerator. Log-probabilities come from a max-shifted log-sum-exp so the
// softmax never has to be logged directly.
template <typename T>
Tensor<T> malignancy_kl_loss(const Tensor<T>& logits, const std::vector<double>& target, T beta) {
  if (logits.size() != target.size())
    throw std::invalid_argument("kl loss: logit/target length mismatch");
  detail_losses::check_distribution(target);

  const auto& lv = logits.values();
  T m = lv[0];
  for (T v : lv) m = std::max(m, v);
  Tensor<T> shifted = sub(logits, Tensor<T>::scalar(m));
  Tensor<T> logz = log(sum_all(exp(shifted)));
  Tensor<T> logp = sub(shifted, logz);

  std::vector<T> logg(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) logg[i] = static_cast<T>(std::log(target[i]));
  Tensor<T> p = softmax(logits, 0);
  Tensor<T> kl = sum_all(mul(p, sub(logp, Tensor<T>(logits.shape(), std::move(logg)))));
  return scale(kl, beta);
}

// Components are already weighted; the total is their plain sum.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_m, const Tensor<T>& l_a, const Tensor<T>& l_r) {
  for (const Tensor<T>* t : {&l_m, &l_a, &l_r})
    if (!all_finite(*t)) throw std::domain_error("total_loss: non-finite component");
  return add(add(l_m, l_a), l_r);
}

}  // namespace xcaps::losses

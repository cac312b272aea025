// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "xcaps/losses.hpp"

namespace xcaps::ratings {

inline constexpr std::size_t kAttributeCount = 6;
inline constexpr std::size_t kScoreClasses = 5;
inline constexpr std::array<const char*, kAttributeCount> kAttributeNames = {
    "sub", "sph", "mar", "lob", "spi", "tex"};

// Panels of at least three raters, integer scores 1..5, for malignancy and
// each visual attribute.
struct RaterScores {
  std::vector<int> malignancy;
  std::array<std::vector<int>, kAttributeCount> attributes;

  void validate() const {
    check_list(malignancy, "malignancy");
    for (std::size_t i = 0; i < kAttributeCount; ++i) check_list(attributes[i], kAttributeNames[i]);
  }

 private:
  static void check_list(const std::vector<int>& scores, const std::string& what) {
    if (scores.size() < 3)
      throw std::invalid_argument("ratings: " + what + " needs at least 3 scores, got " +
                                  std::to_string(scores.size()));
    for (int s : scores)
      if (s < 1 || s > 5)
        throw std::invalid_argument("ratings: " + what + " score " + std::to_string(s) +
                                    " outside 1..5");
  }
};

struct ScoreDistribution {
  double mu = 0.0;
  double sigma = 0.0;
  std::vector<double> probs;
};

inline double mean_score(const std::vector<int>& scores) {
  if (scores.empty()) throw std::invalid_argument("mean_score: empty score list");
  long sum = 0;
  for (int s : scores) sum += s;
  return static_cast<double>(sum) / static_cast<double>(scores.size());
}

// Unanimous panels would give sigma 0; the floor keeps the fitted Gaussian
// proper (0.1 score units).
inline constexpr double kSigmaMin = 0.1;

// Gaussian fit to a rater panel: mean and population standard deviation,
// discretized over the 5 score classes.
inline ScoreDistribution fit_label_distribution(const std::vector<int>& scores) {
  if (scores.size() < 3)
    throw std::invalid_argument("fit_label_distribution: need at least 3 scores, got " +
                                std::to_string(scores.size()));
  for (int s : scores)
    if (s < 1 || s > 5)
      throw std::invalid_argument("fit_label_distribution: score " + std::to_string(s) +
                                  " outside 1..5");
  const double mu = mean_score(scores);
  double var = 0.0;
  for (int s : scores) var += (s - mu) * (s - mu);
  var /= static_cast<double>(scores.size());
  const double sigma = std::max(std::sqrt(var), kSigmaMin);
  ScoreDistribution d;
  d.mu = mu;
  d.sigma = sigma;
  d.probs = losses::fit_target_distribution(mu, sigma, kScoreClasses);
  return d;
}

// A prediction counts as correct within one score unit of the raters' raw
// (unrounded) mean.
inline bool within_one_correct(int predicted_class, double rater_mean) {
  if (predicted_class < 1 || predicted_class > 5)
    throw std::invalid_argument("within_one_correct: class " + std::to_string(predicted_class) +
                                " outside 1..5");
  return std::abs(static_cast<double>(predicted_class) - rater_mean) <= 1.0;
}

// Normalized-entropy confidence: 1 for a degenerate distribution, 0 for the
// uniform one.
inline double confidence(const std::vector<double>& probs) {
  if (probs.empty()) throw std::invalid_argument("confidence: empty distribution");
  double sum = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw std::invalid_argument("confidence: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("confidence: probabilities sum to " + std::to_string(sum));
  double entropy = 0.0;
  for (double p : probs)
    if (p > 0.0) entropy -= p * std::log(p);
  const double c = 1.0 - entropy / std::log(static_cast<double>(probs.size()));
  return std::min(1.0, std::max(0.0, c));
}

}  // namespace xcaps::ratings

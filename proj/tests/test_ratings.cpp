// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "xcaps/ratings.hpp"
#include "xcaps/rng.hpp"

using namespace xcaps;

TEST_CASE("fit label distribution") {
  auto unanimous = ratings::fit_label_distribution({5, 5, 5});
  CHECK(unanimous.mu == 5.0);
  CHECK(unanimous.sigma == 0.1);  // floored
  CHECK(std::max_element(unanimous.probs.begin(), unanimous.probs.end()) -
            unanimous.probs.begin() ==
        4);

  auto spread = ratings::fit_label_distribution({1, 3, 5});
  CHECK(spread.mu == 3.0);
  CHECK(spread.sigma == Catch::Approx(std::sqrt(8.0 / 3.0)).margin(1e-12));
  CHECK(spread.sigma == Catch::Approx(1.632993161855452).margin(1e-12));

  auto pairs = ratings::fit_label_distribution({2, 2, 3, 3});
  CHECK(pairs.mu == 2.5);
  CHECK(pairs.sigma == 0.5);
  // symmetric about 2.5: classes 2 and 3 carry equal mass
  CHECK(pairs.probs[1] == Catch::Approx(pairs.probs[2]).margin(1e-15));
  CHECK(pairs.probs[0] == Catch::Approx(pairs.probs[3]).margin(1e-15));

  CHECK_THROWS_AS(ratings::fit_label_distribution({3, 3}), std::invalid_argument);
  CHECK_THROWS_AS(ratings::fit_label_distribution({3, 3, 6}), std::invalid_argument);
  CHECK_THROWS_AS(ratings::fit_label_distribution({0, 3, 3}), std::invalid_argument);
}

TEST_CASE("fit label distribution is permutation invariant") {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<int> scores(3 + rng.index(4));
    for (auto& s : scores) s = 1 + static_cast<int>(rng.index(5));
    auto base = ratings::fit_label_distribution(scores);
    auto shuffled = scores;
    shuffle(shuffled, rng);
    auto again = ratings::fit_label_distribution(shuffled);
    CHECK(base.mu == again.mu);
    CHECK(base.sigma == again.sigma);
    CHECK(base.probs == again.probs);
  }
}

TEST_CASE("widening sigma flattens the target") {
  // sigma/mu pairs reachable from rater panels: the sigma floor (0.1) only
  // occurs with unanimous panels (integer mean); a fractional mean f forces a
  // population sigma of at least sqrt(f(1-f))
  for (double mu : {1.0, 3.0, 5.0}) {
    double prev_peak = 1.0;
    for (double sigma : {0.1, 0.3, 0.8, 1.5, 3.0}) {
      auto g = losses::fit_target_distribution(mu, sigma, 5);
      const double peak = *std::max_element(g.begin(), g.end());
      CHECK(peak <= prev_peak + 1e-9);
      prev_peak = peak;
    }
  }
  for (double mu : {1.5, 2.2, 4.2}) {
    double prev_peak = 1.0;
    const double f = mu - std::floor(mu);
    const double sigma_min = std::sqrt(f * (1.0 - f));
    for (double mult : {1.0, 1.5, 2.5, 4.0, 8.0}) {
      auto g = losses::fit_target_distribution(mu, sigma_min * mult, 5);
      const double peak = *std::max_element(g.begin(), g.end());
      CHECK(peak <= prev_peak + 1e-9);
      prev_peak = peak;
    }
  }
}

TEST_CASE("mean score") {
  CHECK(ratings::mean_score({3, 3, 3}) == 3.0);
  CHECK(ratings::mean_score({1, 2, 3, 4}) == 2.5);
  CHECK(ratings::mean_score({4, 5, 5}) == Catch::Approx(14.0 / 3.0));
  CHECK_THROWS_AS(ratings::mean_score({}), std::invalid_argument);
}

TEST_CASE("within one rule") {
  CHECK(ratings::within_one_correct(4, 4.6));
  CHECK_FALSE(ratings::within_one_correct(2, 4.0));
  CHECK(ratings::within_one_correct(5, 4.0));  // boundary
  CHECK_THROWS_AS(ratings::within_one_correct(0, 3.0), std::invalid_argument);
  CHECK_THROWS_AS(ratings::within_one_correct(6, 3.0), std::invalid_argument);

  // rounding the mean is always within one of itself
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const double mean = rng.uniform(1.0, 5.0);
    const int rounded = static_cast<int>(std::lround(mean));
    CHECK(ratings::within_one_correct(rounded, mean));
  }
}

TEST_CASE("confidence") {
  CHECK(ratings::confidence({1.0 - 4e-10, 1e-10, 1e-10, 1e-10, 1e-10}) ==
        Catch::Approx(1.0).margin(1e-7));
  CHECK(ratings::confidence({0.2, 0.2, 0.2, 0.2, 0.2}) == Catch::Approx(0.0).margin(1e-12));

  // two-way split with 1e-7 floors
  std::vector<double> p = {0.5, 0.5, 1e-7, 1e-7, 1e-7};
  double sum = 0.0;
  for (double v : p) sum += v;
  for (double& v : p) v /= sum;
  CHECK(ratings::confidence(p) == Catch::Approx(1.0 - std::log(2.0) / std::log(5.0)).margin(1e-4));
  CHECK(ratings::confidence(p) == Catch::Approx(0.5693).margin(1e-3));

  CHECK_THROWS_AS(ratings::confidence({0.5, 0.4}), std::invalid_argument);
  CHECK_THROWS_AS(ratings::confidence({1.5, -0.5}), std::invalid_argument);
}

TEST_CASE("confidence properties") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = losses::fit_target_distribution(rng.uniform(1, 5), rng.uniform(0.1, 2.0), 5);
    const double base = ratings::confidence(p);
    auto q = p;
    shuffle(q, rng);
    CHECK(ratings::confidence(q) == Catch::Approx(base).margin(1e-12));
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
    // only near-degenerate distributions approach confidence 1
    const double peak = *std::max_element(p.begin(), p.end());
    if (base > 0.999) CHECK(peak > 0.999);
  }
}

TEST_CASE("rater scores validation") {
  ratings::RaterScores rs;
  rs.malignancy = {1, 2, 3};
  for (auto& a : rs.attributes) a = {2, 3, 4};
  CHECK_NOTHROW(rs.validate());

  rs.malignancy = {1, 2};
  CHECK_THROWS_AS(rs.validate(), std::invalid_argument);
  rs.malignancy = {1, 2, 9};
  CHECK_THROWS_AS(rs.validate(), std::invalid_argument);
}

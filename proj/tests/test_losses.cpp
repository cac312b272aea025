// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "xcaps/gradcheck.hpp"
#include "xcaps/losses.hpp"
#include "xcaps/rng.hpp"

using namespace xcaps;

TEST_CASE("reconstruction loss") {
  const std::vector<double> image = {1, 1, 1, 1};
  const std::vector<double> mask = {1, 0, 0, 0};

  // perfect reconstruction of the masked target
  Tensor<double> perfect(Shape{2, 2}, {1, 0, 0, 0});
  CHECK(losses::reconstruction_loss(perfect, image, mask, 0.512).item() == 0.0);

  // hand case: all-zero output, single masked pixel of 1
  Tensor<double> zeros = Tensor<double>::zeros(Shape{2, 2});
  CHECK(losses::reconstruction_loss(zeros, image, mask, 0.512).item() ==
        Catch::Approx(0.128).margin(1e-15));

  // linear in gamma
  const double l1 = losses::reconstruction_loss(zeros, image, mask, 0.512).item();
  const double l2 = losses::reconstruction_loss(zeros, image, mask, 1.024).item();
  CHECK(l2 == Catch::Approx(2.0 * l1));

  // mask values outside {0,1} rejected
  CHECK_THROWS_AS(losses::reconstruction_loss(zeros, image, {0.5, 0, 0, 0}, 0.512),
                  std::invalid_argument);
}

TEST_CASE("reconstruction loss strictly increases with any pixel deviation") {
  Rng rng(77);
  std::vector<double> image(16), mask(16);
  for (std::size_t i = 0; i < 16; ++i) {
    image[i] = rng.uniform();
    mask[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  }
  std::vector<double> recon(16);
  for (auto& v : recon) v = rng.uniform();
  const double base =
      losses::reconstruction_loss(Tensor<double>(Shape{16}, std::vector<double>(recon)), image,
                                  mask, 0.512)
          .item();
  for (std::size_t i = 0; i < 16; ++i) {
    auto worse = recon;
    const double target = image[i] * mask[i];
    worse[i] = target + (worse[i] >= target ? 1.0 : -1.0) * (std::abs(worse[i] - target) + 0.25);
    const double l =
        losses::reconstruction_loss(Tensor<double>(Shape{16}, std::move(worse)), image, mask, 0.512)
            .item();
    CHECK(l > base);
  }
}

TEST_CASE("attribute loss") {
  Tensor<double> equal(Shape{2}, {0.5, 0.25});
  CHECK(losses::attribute_loss(equal, {0.5, 0.25}, {1, 1}).item() == 0.0);

  Tensor<double> pred(Shape{2}, {0.5, 0.25});
  CHECK(losses::attribute_loss(pred, {0.75, 0.25}, {1, 1}).item() == Catch::Approx(0.25));

  // weight semantics: alpha [2,0] leaves only the first attribute
  Tensor<double> p2(Shape{2}, {0.5, 0.9});
  CHECK(losses::attribute_loss(p2, {0.75, 0.25}, {2, 0}).item() == Catch::Approx(0.5));

  CHECK_THROWS_AS(losses::attribute_loss(p2, {0.1}, {1, 1}), std::invalid_argument);
}

TEST_CASE("fit target distribution") {
  auto wide = losses::fit_target_distribution(3.0, 10.0, 5);
  for (double p : wide) CHECK(p == Catch::Approx(0.2).margin(0.01));

  auto peaked = losses::fit_target_distribution(5.0, 0.1, 5);
  CHECK(std::max_element(peaked.begin(), peaked.end()) - peaked.begin() == 4);

  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto g = losses::fit_target_distribution(rng.uniform(1, 5), rng.uniform(0.1, 3.0), 5);
    double sum = 0.0;
    for (double p : g) {
      CHECK(p > 0.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }

  CHECK_THROWS_AS(losses::fit_target_distribution(3.0, 0.0, 5), std::logic_error);
  CHECK_THROWS_AS(losses::fit_target_distribution(3.0, 1.0, 1), std::invalid_argument);
}

TEST_CASE("malignancy KL loss") {
  // zero iff softmax(logits) equals the target
  const std::vector<double> g = {0.75, 0.25};
  Tensor<double> matching(Shape{2}, {std::log(0.75), std::log(0.25)});
  CHECK(losses::malignancy_kl_loss(matching, g, 1.0).item() == Catch::Approx(0.0).margin(1e-9));

  // hand case: uniform prediction vs [0.75, 0.25]
  Tensor<double> uniform(Shape{2}, {0.0, 0.0});
  const double expect = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  CHECK(expect == Catch::Approx(0.1438410362258905).margin(1e-12));
  CHECK(losses::malignancy_kl_loss(uniform, g, 1.0).item() == Catch::Approx(expect).margin(1e-12));

  // beta scaling
  CHECK(losses::malignancy_kl_loss(uniform, g, 2.0).item() ==
        Catch::Approx(2.0 * expect).margin(1e-12));

  // Gibbs: non-negative on random pairs
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> logits(5);
    for (auto& v : logits) v = rng.uniform(-4, 4);
    auto target = losses::fit_target_distribution(rng.uniform(1, 5), rng.uniform(0.1, 2.0), 5);
    const double kl =
        losses::malignancy_kl_loss(Tensor<double>(Shape{5}, std::move(logits)), target, 1.0).item();
    CHECK(kl >= -1e-12);
  }

  CHECK_THROWS_AS(losses::malignancy_kl_loss(uniform, {0.5, 0.6}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(losses::malignancy_kl_loss(uniform, {1.0, 0.0}, 1.0), std::invalid_argument);
}

TEST_CASE("KL positive unless matched") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    auto g = losses::fit_target_distribution(rng.uniform(1, 5), rng.uniform(0.1, 2.0), 5);
    std::vector<double> logits(5);
    for (auto& v : logits) v = rng.uniform(-3, 3);
    Tensor<double> lt(Shape{5}, std::vector<double>(logits));
    const double kl = losses::malignancy_kl_loss(lt, g, 1.0).item();
    auto p = softmax(lt, 0).values();
    double dist = 0.0;
    for (std::size_t i = 0; i < 5; ++i) dist = std::max(dist, std::abs(p[i] - g[i]));
    if (dist > 1e-9)
      CHECK(kl > 0.0);
    else
      CHECK(kl < 1e-9);
  }
}

TEST_CASE("total loss") {
  auto zero = losses::total_loss(Tensor<double>::scalar(0), Tensor<double>::scalar(0),
                                 Tensor<double>::scalar(0));
  CHECK(zero.item() == 0.0);
  auto combo = losses::total_loss(Tensor<double>::scalar(1.0), Tensor<double>::scalar(0.5),
                                  Tensor<double>::scalar(0.25));
  CHECK(combo.item() == Catch::Approx(1.75));

  auto b = losses::make_breakdown(1.0, 0.5, {0.2, 0.3}, 0.25);
  CHECK(b.l_m == 1.0);
  CHECK(b.l_a == 0.5);
  CHECK(b.l_r == 0.25);
  CHECK(b.total == 1.75);

  CHECK_THROWS_AS(losses::total_loss(Tensor<double>::scalar(std::nan("")),
                                     Tensor<double>::scalar(0), Tensor<double>::scalar(0)),
                  std::domain_error);
}

TEST_CASE("loss gradients vs finite differences") {
  auto results = gradcheck::run_loss_checks(321, 20);
  for (const auto& r : results) {
    INFO(r.name << " max rel err " << r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("gamma zero removes the reconstruction term") {
  Rng rng(55);
  std::vector<double> image(9), mask(9, 1.0), r1(9), r2(9);
  for (auto& v : image) v = rng.uniform();
  for (auto& v : r1) v = rng.uniform();
  for (auto& v : r2) v = rng.uniform();
  const double a =
      losses::reconstruction_loss(Tensor<double>(Shape{9}, std::move(r1)), image, mask, 0.0).item();
  const double b =
      losses::reconstruction_loss(Tensor<double>(Shape{9}, std::move(r2)), image, mask, 0.0).item();
  CHECK(a == 0.0);
  CHECK(b == 0.0);
}

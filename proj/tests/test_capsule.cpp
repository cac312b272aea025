// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers/brute_force_routing.hpp"
#include "xcaps/capsule.hpp"
#include "xcaps/gradcheck.hpp"
#include "xcaps/rng.hpp"

using namespace xcaps;
using caps::RoutingConfig;
using caps::RoutingMode;

namespace {
double vec_norm(const std::vector<double>& v, std::size_t off, std::size_t dim) {
  double n2 = 0.0;
  for (std::size_t d = 0; d < dim; ++d) n2 += v[off + d] * v[off + d];
  return std::sqrt(n2);
}
}  // namespace

TEST_CASE("squash values") {
  auto zero = caps::squash(Tensor<double>(Shape{1, 3}, {0, 0, 0}));
  CHECK(zero.values() == std::vector<double>{0, 0, 0});

  auto unit = caps::squash(Tensor<double>(Shape{1, 3}, {1, 0, 0}));
  CHECK(unit.values()[0] == Catch::Approx(0.5).margin(1e-9));
  CHECK(unit.values()[1] == 0.0);

  auto big = caps::squash(Tensor<double>(Shape{1, 2}, {100, 0}));
  CHECK(vec_norm(big.values(), 0, 2) == Catch::Approx(10000.0 / 10001.0).margin(1e-9));
}

TEST_CASE("squash monotone and bounded") {
  Rng rng(17);
  double prev = 0.0;
  for (double scale = 0.1; scale < 40.0; scale *= 1.7) {
    auto v = caps::squash(Tensor<double>(Shape{1, 2}, {scale * 0.6, scale * 0.8}));
    const double n = vec_norm(v.values(), 0, 2);
    CHECK(n > prev);
    CHECK(n < 1.0);
    prev = n;
  }
  // direction preserved
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(4);
    for (auto& x : s) x = rng.uniform(-3, 3);
    auto v = caps::squash(Tensor<double>(Shape{1, 4}, std::vector<double>(s)));
    const double ns = vec_norm(s, 0, 4), nv = vec_norm(v.values(), 0, 4);
    if (ns > 1e-9) {
      double dot = 0.0;
      for (std::size_t d = 0; d < 4; ++d) dot += s[d] * v.values()[d];
      CHECK(dot / (ns * nv) == Catch::Approx(1.0).margin(1e-9));
    }
  }
}

TEST_CASE("routing sigmoid values and locality") {
  auto r0 = caps::routing_sigmoid(Tensor<double>(Shape{1, 1}, {0.0}));
  CHECK(r0.item() == Catch::Approx(0.5));

  auto r1 = caps::routing_sigmoid(Tensor<double>(Shape{1, 1}, {1.0}));
  CHECK(r1.item() == Catch::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).margin(1e-12));
  CHECK(r1.item() == Catch::Approx(0.7310585786300049).margin(1e-12));

  // per-entry independence: perturbing one logit leaves the others unchanged
  Rng rng(3);
  std::vector<double> b(6);
  for (auto& v : b) v = rng.uniform(-2, 2);
  auto base = caps::routing_sigmoid(Tensor<double>(Shape{2, 3}, std::vector<double>(b)));
  for (std::size_t k = 0; k < b.size(); ++k) {
    auto bp = b;
    bp[k] += 0.5;
    auto perturbed = caps::routing_sigmoid(Tensor<double>(Shape{2, 3}, std::vector<double>(bp)));
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (i == k)
        CHECK(perturbed.values()[i] != base.values()[i]);
      else
        CHECK(perturbed.values()[i] == base.values()[i]);
    }
  }
}

TEST_CASE("routing softmax values") {
  auto r = caps::routing_softmax(Tensor<double>(Shape{2, 3}, std::vector<double>(6, 0.0)));
  for (double v : r.values()) CHECK(v == Catch::Approx(1.0 / 3.0));

  auto peaked = caps::routing_softmax(Tensor<double>(Shape{1, 3}, {10, 0, 0}));
  CHECK(peaked.values()[0] == Catch::Approx(0.99990921).margin(1e-6));
  CHECK(peaked.values()[1] == Catch::Approx(4.5397e-5).margin(1e-7));

  Rng rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> b(12);
    for (auto& v : b) v = rng.uniform(-8, 8);
    auto rr = caps::routing_softmax(Tensor<double>(Shape{4, 3}, std::move(b)));
    for (std::size_t c = 0; c < 4; ++c) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 3; ++j) sum += rr.values()[c * 3 + j];
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("routing config validation") {
  RoutingConfig bad = RoutingConfig::sigmoid(0);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  RoutingConfig wrong = {RoutingMode::kSigmoid, 3, 0.0};
  CHECK_THROWS_AS(wrong.validate(), std::invalid_argument);
  RoutingConfig wrong2 = {RoutingMode::kSoftmax, 3, 1.0};
  CHECK_THROWS_AS(wrong2.validate(), std::invalid_argument);
}

TEST_CASE("single child single parent one iteration") {
  // v = squash(r * u_hat) with r = e/(e+1)
  const std::vector<double> u = {0.4, -0.7, 1.1};
  auto rr = caps::dynamic_routing(Tensor<double>(Shape{1, 1, 3}, std::vector<double>(u)),
                                  RoutingConfig::sigmoid(1));
  const double r = std::exp(1.0) / (std::exp(1.0) + 1.0);
  CHECK(rr.coefficients[0] == Catch::Approx(r).margin(1e-12));
  std::vector<double> s = {r * u[0], r * u[1], r * u[2]};
  const double n2 = s[0] * s[0] + s[1] * s[1] + s[2] * s[2];
  const double factor = n2 / ((1 + n2) * std::sqrt(n2 + 1e-12));
  for (std::size_t d = 0; d < 3; ++d)
    CHECK(rr.parents.values()[d] == Catch::Approx(factor * s[d]).margin(1e-12));
}

TEST_CASE("identical children stay uniformly routed") {
  // all children share one prediction per parent: symmetry is preserved
  const std::vector<double> proto = {0.3, -0.2, 0.9, 0.5};  // parent 0 and 1, dim 2
  std::vector<double> u_hat;
  for (int child = 0; child < 3; ++child) u_hat.insert(u_hat.end(), proto.begin(), proto.end());
  auto rr = caps::dynamic_routing(Tensor<double>(Shape{3, 2, 2}, std::move(u_hat)),
                                  RoutingConfig::sigmoid(3));
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t c = 1; c < 3; ++c)
      CHECK(rr.coefficients[c * 2 + j] == Catch::Approx(rr.coefficients[j]).margin(1e-14));
  // each parent output is parallel to its shared prediction
  for (std::size_t j = 0; j < 2; ++j) {
    const double cross = rr.parents.values()[j * 2] * proto[j * 2 + 1] -
                         rr.parents.values()[j * 2 + 1] * proto[j * 2];
    CHECK(std::abs(cross) < 1e-12);
  }
}

TEST_CASE("routing matches brute-force oracle") {
  Rng rng(2718);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t children = 1 + rng.index(4);
    const std::size_t parents = 1 + rng.index(3);
    const std::size_t dim = 1 + rng.index(4);
    const std::size_t iterations = 1 + rng.index(4);
    std::vector<double> u(children * parents * dim);
    for (auto& v : u) v = rng.uniform(-2, 2);
    const bool sigmoid_mode = trial % 2 == 0;

    auto cfg = sigmoid_mode ? RoutingConfig::sigmoid(iterations) : RoutingConfig::softmax(iterations);
    auto got = caps::dynamic_routing(Tensor<double>(Shape{children, parents, dim},
                                                    std::vector<double>(u)),
                                     cfg);
    auto expect = oracle::brute_force_routing(u, children, parents, dim, sigmoid_mode, iterations,
                                              cfg.prior_init);
    REQUIRE(got.parents.values().size() == expect.parents.size());
    for (std::size_t i = 0; i < expect.parents.size(); ++i)
      CHECK(got.parents.values()[i] == Catch::Approx(expect.parents[i]).margin(1e-10));
    for (std::size_t i = 0; i < expect.coefficients.size(); ++i)
      CHECK(got.coefficients[i] == Catch::Approx(expect.coefficients[i]).margin(1e-10));
  }
}

TEST_CASE("routing output norms stay below one") {
  Rng rng(555);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t children = 1 + rng.index(6), parents = 1 + rng.index(4),
                      dim = 1 + rng.index(5);
    std::vector<double> u(children * parents * dim);
    for (auto& v : u) v = rng.uniform(-30, 30);
    auto cfg = trial % 2 ? RoutingConfig::sigmoid(1 + rng.index(5))
                         : RoutingConfig::softmax(1 + rng.index(5));
    auto rr = caps::dynamic_routing(
        Tensor<double>(Shape{children, parents, dim}, std::move(u)), cfg);
    for (std::size_t j = 0; j < parents; ++j)
      CHECK(vec_norm(rr.parents.values(), j * dim, dim) < 1.0);
  }
}

TEST_CASE("agreement amplification") {
  // two children: opposite predictions for parent 0, equal for parent 1
  std::vector<double> u_hat = {
      1.0, 0.0, /* child0 -> parent0 */ 0.8, 0.6,  /* child0 -> parent1 */
      -1.0, 0.0, /* child1 -> parent0 */ 0.8, 0.6, /* child1 -> parent1 */
  };
  auto rr = caps::dynamic_routing(Tensor<double>(Shape{2, 2, 2}, std::move(u_hat)),
                                  RoutingConfig::sigmoid(3));
  for (std::size_t c = 0; c < 2; ++c)
    CHECK(rr.coefficients[c * 2 + 1] > rr.coefficients[c * 2 + 0]);
}

TEST_CASE("routing coefficients are constants on the tape") {
  // gradients flow through the final weighted sum only: they must match the
  // fixed-coefficient route exactly
  Rng rng(808);
  std::vector<double> u(2 * 2 * 3);
  for (auto& v : u) v = rng.uniform(-1, 1);

  Tape<double> t1;
  auto u1 = t1.leaf(Shape{2, 2, 3}, std::vector<double>(u));
  auto r1 = caps::dynamic_routing(u1, RoutingConfig::sigmoid(3));
  t1.backward(sum_all(r1.parents));

  Tape<double> t2;
  auto u2 = t2.leaf(Shape{2, 2, 3}, std::vector<double>(u));
  auto r2 = caps::dynamic_routing(u2, RoutingConfig::sigmoid(3),
                                  std::optional<std::vector<double>>(r1.coefficients));
  t2.backward(sum_all(r2.parents));

  CHECK(u1.grad() == u2.grad());
  CHECK(r1.parents.values() == r2.parents.values());
}

TEST_CASE("primary caps layer shapes and ranges") {
  // 8 feature maps 12x12, 4 types x 3D, 5x5 kernel stride 1 -> grid 8x8
  Rng rng(99);
  std::vector<double> f(8 * 12 * 12), k(12 * 8 * 5 * 5), b(12, 0.0);
  for (auto& v : f) v = rng.uniform(-1, 1);
  for (auto& v : k) v = rng.uniform(-0.2, 0.2);
  auto capsules = caps::primary_caps_layer(
      Tensor<double>(Shape{8, 12, 12}, std::move(f)),
      Tensor<double>(Shape{12, 8, 5, 5}, std::move(k)),
      Tensor<double>(Shape{12}, std::move(b)), 1, 4, 3);
  CHECK(capsules.types == 4);
  CHECK(capsules.grid == 64);
  CHECK(capsules.dim == 3);
  for (std::size_t i = 0; i < capsules.count(); ++i)
    CHECK(vec_norm(capsules.data.values(), i * 3, 3) < 1.0);

  // zero input with zero bias: all zero vectors
  auto zero = caps::primary_caps_layer(
      Tensor<double>::zeros(Shape{8, 12, 12}),
      Tensor<double>(Shape{12, 8, 5, 5}, std::vector<double>(12 * 8 * 25, 0.3)),
      Tensor<double>::zeros(Shape{12}), 1, 4, 3);
  for (double v : zero.data.values()) CHECK(v == 0.0);
}

TEST_CASE("primary caps channel grouping is type-major") {
  // channel c = type*dim + d; craft a conv whose output channel equals c
  // everywhere and verify vector layout before squash distortion
  const std::size_t types = 2, dim = 2;
  std::vector<double> k(types * dim * 1 * 1 * 1, 0.0);
  // 1x1 kernels over a 1-channel input of ones: output channel c = weight c
  for (std::size_t c = 0; c < types * dim; ++c) k[c] = static_cast<double>(c + 1);
  auto capsules = caps::primary_caps_layer(
      Tensor<double>(Shape{1, 2, 2}, std::vector<double>(4, 1.0)),
      Tensor<double>(Shape{types * dim, 1, 1, 1}, std::move(k)), Tensor<double>{}, 1, types, dim);
  // type 0 vectors come from channels {1,2}, type 1 from {3,4}; squash keeps direction
  const auto& v = capsules.data.values();
  CHECK(v[0] / v[1] == Catch::Approx(1.0 / 2.0));
  CHECK(v[capsules.grid * dim] / v[capsules.grid * dim + 1] == Catch::Approx(3.0 / 4.0));
}

TEST_CASE("fc caps layer") {
  // identity-ish transform, one child one parent
  const std::vector<double> u = {0.6, -0.3};
  std::vector<double> w = {1, 0, 0, 1};  // 2x2 identity
  caps::CapsuleTensor<double> child(1, 1, 2, Tensor<double>(Shape{1, 1, 2}, std::vector<double>(u)));
  auto out = caps::fc_caps_layer(child, Tensor<double>(Shape{1, 1, 2, 2}, std::move(w)),
                                 RoutingConfig::sigmoid(1));
  CHECK(out.capsules.types == 1);
  CHECK(out.capsules.dim == 2);
  const double r = std::exp(1.0) / (std::exp(1.0) + 1.0);
  std::vector<double> s = {r * u[0], r * u[1]};
  const double n2 = s[0] * s[0] + s[1] * s[1];
  const double factor = n2 / ((1 + n2) * std::sqrt(n2 + 1e-12));
  CHECK(out.capsules.data.values()[0] == Catch::Approx(factor * s[0]).margin(1e-12));
  CHECK(out.capsules.data.values()[1] == Catch::Approx(factor * s[1]).margin(1e-12));

  // shape contract: mismatched weights throw
  CHECK_THROWS_AS(caps::fc_caps_layer(child, Tensor<double>(Shape{2, 1, 2, 2},
                                                            std::vector<double>(8, 0.1)),
                                      RoutingConfig::sigmoid(1)),
                  std::invalid_argument);
}

TEST_CASE("fc caps gradients vs finite differences") {
  Rng rng(1213);
  const std::size_t children = 3, parents = 2, in_dim = 3, out_dim = 4;
  std::vector<double> w(children * parents * out_dim * in_dim), u(children * in_dim);
  for (auto& v : w) v = rng.uniform(-1, 1);
  for (auto& v : u) v = rng.uniform(-1, 1);

  caps::CapsuleTensor<double> child(children, 1, in_dim,
                                    Tensor<double>(Shape{children, 1, in_dim}, std::vector<double>(u)));
  Tape<double> tape;
  auto wt = tape.leaf(Shape{children, parents, out_dim, in_dim}, std::vector<double>(w));
  auto out = caps::fc_caps_layer(child, wt, RoutingConfig::sigmoid(3));
  tape.backward(sum_all(out.capsules.data));
  const std::vector<double> frozen = out.coefficients;

  auto objective = [&](const std::vector<double>& wx) {
    auto o = caps::fc_caps_layer(child,
                                 Tensor<double>(Shape{children, parents, out_dim, in_dim},
                                                std::vector<double>(wx)),
                                 RoutingConfig::sigmoid(3),
                                 std::optional<std::vector<double>>(frozen));
    double acc = 0.0;
    for (double v : o.capsules.data.values()) acc += v;
    return acc;
  };
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    auto p = w, m = w;
    p[i] += h;
    m[i] -= h;
    worst = std::max(worst,
                     gradcheck::rel_err(wt.grad()[i], (objective(p) - objective(m)) / (2 * h)));
  }
  CHECK(worst < 1e-4);
}

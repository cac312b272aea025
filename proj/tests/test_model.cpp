// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "xcaps/gradcheck.hpp"
#include "xcaps/model.hpp"
#include "xcaps/rng.hpp"

using namespace xcaps;
namespace fs = std::filesystem;

namespace {

model::XCapsConfig toy_config() {
  model::XCapsConfig c;
  c.input_size = 8;
  c.conv_filters = 4;
  c.conv_kernel = 3;
  c.primary_types = 2;
  c.primary_dim = 4;
  c.primary_kernel = 3;
  c.primary_stride = 2;
  c.attr_count = 2;
  c.attr_dim = 4;
  c.decoder_widths = {6, 10};
  return c;
}

std::vector<double> random_image(std::size_t pixels, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> img(pixels);
  for (auto& v : img) v = rng.uniform();
  return img;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("default architecture shape arithmetic") {
  model::XCapsConfig c;  // defaults
  CHECK(c.conv_out() == 24);
  CHECK(c.primary_grid_side() == 8);
  CHECK(c.child_count() == 2048);
  CHECK(c.head_inputs() == 96);

  auto net = model::XCapsModel<double>::build(c, 1);
  CHECK(net.param("conv1.weight").shape == Shape{256, 1, 9, 9});
  CHECK(net.param("primary.weight").shape == Shape{256, 256, 9, 9});
  CHECK(net.param("attrcaps.weight").shape == Shape{2048, 6, 16, 8});
  CHECK(net.param("head.weight").shape == Shape{96, 5});
  CHECK(net.param("decoder.0.weight").shape == Shape{96, 512});
  CHECK(net.param("decoder.1.weight").shape == Shape{512, 1024});
  CHECK(net.param("decoder.2.weight").shape == Shape{1024, 1024});
}

TEST_CASE("build is deterministic") {
  auto a = model::XCapsModel<double>::build(toy_config(), 99);
  auto b = model::XCapsModel<double>::build(toy_config(), 99);
  auto c = model::XCapsModel<double>::build(toy_config(), 100);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(*a.parameters()[i].values == *b.parameters()[i].values);
    if (*a.parameters()[i].values != *c.parameters()[i].values) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("toy config runs forward with valid ranges") {
  auto net = model::XCapsModel<double>::build(toy_config(), 5);
  auto img = random_image(64, 11);
  auto out = net.forward(img);

  REQUIRE(out.attr_scores.size() == 2);
  for (double s : out.attr_scores.values()) {
    CHECK(s >= 0.0);
    CHECK(s < 1.0);
  }
  REQUIRE(out.reconstruction.size() == 64);
  for (double p : out.reconstruction.values()) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  // attr_scores are exactly the vector norms
  for (std::size_t n = 0; n < 2; ++n) {
    double n2 = 0;
    for (std::size_t d = 0; d < 4; ++d) {
      const double v = out.attr_vectors.values()[n * 4 + d];
      n2 += v * v;
    }
    CHECK(out.attr_scores.values()[n] == Catch::Approx(std::sqrt(n2)).margin(1e-12));
  }

  CHECK_THROWS_AS(net.forward(std::vector<double>(63, 0.0)), std::invalid_argument);
}

TEST_CASE("forward determinism") {
  auto net = model::XCapsModel<double>::build(toy_config(), 5);
  auto img = random_image(64, 13);
  auto a = net.forward(img);
  auto b = net.forward(img);
  CHECK(a.logits.values() == b.logits.values());
  CHECK(a.reconstruction.values() == b.reconstruction.values());
  CHECK(a.attr_vectors.values() == b.attr_vectors.values());
}

TEST_CASE("malignancy head sees only the attribute capsule vectors") {
  auto net = model::XCapsModel<double>::build(toy_config(), 21);
  auto img = random_image(64, 22);
  auto out = net.forward(img);

  // zeroed attribute vectors reduce the head to its bias
  const auto& w = *net.param("head.weight").values;
  const auto& bias = *net.param("head.bias").values;
  std::vector<double> manual(bias.begin(), bias.end());
  const auto& v = out.attr_vectors.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t k = 0; k < manual.size(); ++k) manual[k] += v[i] * w[i * manual.size() + k];
  for (std::size_t k = 0; k < manual.size(); ++k)
    CHECK(out.logits.values()[k] == Catch::Approx(manual[k]).margin(1e-12));

  auto zeroed = model::contribution_report(net, std::vector<double>(v.size(), 0.0));
  for (const auto& row : zeroed)
    for (double c : row) CHECK(c == 0.0);
}

TEST_CASE("head gradient reaches the image only through the attribute vectors") {
  auto net = model::XCapsModel<double>::build(toy_config(), 33);
  auto img = random_image(64, 34);
  Rng rng(35);
  std::vector<double> proj(5);
  for (auto& p : proj) p = rng.uniform(-1, 1);

  // route A: d(proj . logits)/d image by full backprop
  Tape<double> t1;
  auto x1 = t1.leaf(Shape{64}, std::vector<double>(img));
  model::ForwardOptions<double> o1;
  o1.tape = &t1;
  o1.with_reconstruction = false;
  auto f1 = net.forward_tensor(x1, o1);
  const std::vector<double> frozen = f1.routing_coefficients;
  t1.backward(sum_all(mul(f1.logits, Tensor<double>(Shape{5}, std::vector<double>(proj)))));
  const std::vector<double> dx_full = x1.grad();

  // route B: the head is affine, so proj . logits = proj . bias + v . (W proj);
  // backprop that projection of the attribute vectors instead
  const auto& w = *net.param("head.weight").values;
  std::vector<double> wproj(net.config().head_inputs(), 0.0);
  for (std::size_t i = 0; i < wproj.size(); ++i)
    for (std::size_t k = 0; k < proj.size(); ++k) wproj[i] += w[i * proj.size() + k] * proj[k];

  Tape<double> t2;
  auto x2 = t2.leaf(Shape{64}, std::vector<double>(img));
  model::ForwardOptions<double> o2;
  o2.tape = &t2;
  o2.with_reconstruction = false;
  o2.fixed_routing = &frozen;  // identical coefficients, identical taped function
  auto f2 = net.forward_tensor(x2, o2);
  t2.backward(sum_all(mul(reshape(f2.attr_vectors, Shape{wproj.size()}),
                          Tensor<double>(Shape{wproj.size()}, std::vector<double>(wproj)))));
  const std::vector<double> dx_chain = x2.grad();

  REQUIRE(dx_full.size() == dx_chain.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < dx_full.size(); ++i)
    worst = std::max(worst, std::abs(dx_full[i] - dx_chain[i]));
  CHECK(worst < 1e-12);

  // and the direct head gradient: d(proj . logits)/d v == W proj
  Tape<double> t3;
  model::ForwardOptions<double> o3;
  o3.tape = &t3;
  o3.with_reconstruction = false;
  auto f3 = net.forward(img, o3);
  t3.backward(sum_all(mul(f3.logits, Tensor<double>(Shape{5}, std::vector<double>(proj)))));
  const auto& dv = f3.attr_vectors.grad();
  for (std::size_t i = 0; i < dv.size(); ++i)
    CHECK(dv[i] == Catch::Approx(wproj[i]).margin(1e-10));
}

TEST_CASE("attribute score scale") {
  auto scaled = model::attribute_scores_to_scale(std::vector<double>{0.0, 0.5, 0.731});
  CHECK(scaled[0] == Catch::Approx(1.0));
  CHECK(scaled[1] == Catch::Approx(3.0));
  CHECK(scaled[2] == Catch::Approx(3.924));
  CHECK_THROWS_AS(model::attribute_scores_to_scale(std::vector<double>{1.0}),
                  std::invalid_argument);
}

TEST_CASE("contribution report decomposes the logits") {
  auto net = model::XCapsModel<double>::build(toy_config(), 44);
  auto img = random_image(64, 45);
  auto out = net.forward(img);
  const auto& v = out.attr_vectors.values();

  auto report = model::contribution_report(net, v);
  const auto& bias = *net.param("head.bias").values;
  for (std::size_t k = 0; k < bias.size(); ++k) {
    double sum = bias[k];
    for (std::size_t n = 0; n < report.size(); ++n) sum += report[n][k];
    CHECK(std::abs(sum - out.logits.values()[k]) < 1e-10);
  }

  // doubling one attribute's vector doubles its row only
  std::vector<double> doubled(v);
  for (std::size_t d = 0; d < net.config().attr_dim; ++d) doubled[d] *= 2.0;
  auto report2 = model::contribution_report(net, doubled);
  for (std::size_t k = 0; k < bias.size(); ++k) {
    CHECK(report2[0][k] == Catch::Approx(2.0 * report[0][k]).margin(1e-12));
    CHECK(report2[1][k] == Catch::Approx(report[1][k]).margin(1e-12));
  }
}

TEST_CASE("perturb and decode") {
  auto net = model::XCapsModel<double>::build(toy_config(), 55);
  auto img = random_image(64, 56);
  auto out = net.forward(img);
  const auto& v = out.attr_vectors.values();

  const auto deltas = model::default_sweep_deltas();
  REQUIRE(deltas.size() == 11);
  CHECK(deltas[5] == 0.0);
  CHECK(deltas.front() == Catch::Approx(-0.25));
  CHECK(deltas.back() == Catch::Approx(0.25));

  auto sweep = model::perturb_and_decode(net, v, 1, 2, deltas);
  REQUIRE(sweep.size() == 11);
  CHECK(sweep[5] == net.decode(v).values());  // delta 0 is the plain reconstruction
  for (const auto& im : sweep)
    for (double p : im) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }
  CHECK_THROWS_AS(model::perturb_and_decode(net, v, 9, 0, deltas), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  auto net = model::XCapsModel<double>::build(toy_config(), 66);
  auto dir = fs::temp_directory_path() / "xcaps_test_ckpt";
  fs::create_directories(dir);
  const fs::path a = dir / "a.xcap";
  const fs::path b = dir / "b.xcap";

  model::save_checkpoint(net, a);
  auto loaded = model::load_checkpoint<double>(a);
  model::save_checkpoint(loaded, b);
  CHECK(slurp(a) == slurp(b));  // save -> load -> save is byte-stable

  CHECK(loaded.seed() == net.seed());
  CHECK(loaded.config().conv_filters == net.config().conv_filters);
  for (std::size_t i = 0; i < net.parameters().size(); ++i)
    CHECK(*loaded.parameters()[i].values == *net.parameters()[i].values);

  // same outputs after reload
  auto img = random_image(64, 67);
  CHECK(loaded.forward(img).logits.values() == net.forward(img).logits.values());

  // float model round-trips exactly too (float fits in the f64 container)
  auto netf = model::XCapsModel<float>::build(toy_config(), 66);
  const fs::path fa = dir / "fa.xcap", fb = dir / "fb.xcap";
  model::save_checkpoint(netf, fa);
  auto loadedf = model::load_checkpoint<float>(fa);
  model::save_checkpoint(loadedf, fb);
  CHECK(slurp(fa) == slurp(fb));

  std::ofstream bad(dir / "bad.xcap", std::ios::binary);
  bad << "NOPE";
  bad.close();
  CHECK_THROWS_AS(model::load_checkpoint<double>(dir / "bad.xcap"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("config validation") {
  auto c = toy_config();
  c.conv_kernel = 9;  // exceeds 8x8 input
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = toy_config();
  c.malignancy_outputs = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = toy_config();
  c.decoder_widths.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("end-to-end gradients on the toy model") {
  auto result = gradcheck::run_model_check(4242);
  INFO("max rel err " << result.max_rel_err);
  CHECK(result.pass);
}

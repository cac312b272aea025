// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xcaps/capsule.hpp"
#include "xcaps/losses.hpp"
#include "xcaps/model.hpp"
#include "xcaps/rng.hpp"
#include "xcaps/tensor.hpp"
#include "xcaps/trainer.hpp"

namespace xcaps::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

namespace detail_gc {

inline constexpr double kStep = 1e-5;

// One operation under test: shapes, a builder over (possibly taped) inputs,
// and a sampler that keeps inputs away from kinks and domain edges.
struct OpSpec {
  std::string name;
  std::vector<Shape> input_shapes;
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> apply;
  std::function<double(Rng&)> sample;
  double tolerance = 1e-5;
};

inline double uniform_pm2(Rng& rng) { return rng.uniform(-2.0, 2.0); }
inline double uniform_pos(Rng& rng) { return rng.uniform(0.2, 3.0); }
// keeps |x| well above the finite-difference step so relu/abs kinks are never straddled
inline double uniform_off_zero(Rng& rng) {
  const double v = rng.uniform(0.1, 2.0);
  return rng.uniform() < 0.5 ? -v : v;
}

// max rel err between backward gradients and central differences of the
// projected output sum_i w_i * out_i, over every input coordinate.
inline double check_op(const OpSpec& op, Rng& rng) {
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (const Shape& s : op.input_shapes) {
    sizes.push_back(numel(s));
    total += sizes.back();
  }
  std::vector<double> flat(total);
  for (double& v : flat) v = op.sample(rng);

  auto build_inputs = [&](const std::vector<double>& values, Tape<double>* tape) {
    std::vector<Tensor<double>> inputs;
    std::size_t off = 0;
    for (std::size_t k = 0; k < op.input_shapes.size(); ++k) {
      std::vector<double> chunk(values.begin() + off, values.begin() + off + sizes[k]);
      off += sizes[k];
      if (tape)
        inputs.push_back(tape->leaf(op.input_shapes[k], std::move(chunk)));
      else
        inputs.emplace_back(op.input_shapes[k], std::move(chunk));
    }
    return inputs;
  };

  // fixed projection weights so the scalar objective exercises every output
  Tensor<double> probe_out = op.apply(build_inputs(flat, nullptr));
  std::vector<double> w(probe_out.size());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  auto objective = [&](const std::vector<double>& values) {
    Tensor<double> out = op.apply(build_inputs(values, nullptr));
    const auto& ov = out.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < ov.size(); ++i) acc += w[i] * ov[i];
    return acc;
  };

  Tape<double> tape;
  std::vector<Tensor<double>> inputs = build_inputs(flat, &tape);
  Tensor<double> out = op.apply(inputs);
  Tensor<double> loss = sum_all(mul(out, Tensor<double>(out.shape(), std::vector<double>(w))));
  tape.backward(loss);

  std::vector<double> analytic;
  analytic.reserve(total);
  for (const Tensor<double>& in : inputs) {
    const std::vector<double>& g = in.grad();
    if (g.empty())
      analytic.insert(analytic.end(), in.size(), 0.0);
    else
      analytic.insert(analytic.end(), g.begin(), g.end());
  }

  double worst = 0.0;
  std::vector<double> probe = flat;
  for (std::size_t i = 0; i < total; ++i) {
    const double orig = probe[i];
    probe[i] = orig + kStep;
    const double fp = objective(probe);
    probe[i] = orig - kStep;
    const double fm = objective(probe);
    probe[i] = orig;
    worst = std::max(worst, rel_err(analytic[i], (fp - fm) / (2.0 * kStep)));
  }
  return worst;
}

inline std::vector<OpSpec> primitive_specs() {
  using V = std::vector<Tensor<double>>;
  std::vector<OpSpec> ops;
  auto push = [&](std::string name, std::vector<Shape> shapes,
                  std::function<Tensor<double>(const V&)> apply,
                  std::function<double(Rng&)> sample = uniform_pm2) {
    ops.push_back(OpSpec{std::move(name), std::move(shapes), std::move(apply), std::move(sample)});
  };

  push("add", {{2, 3}, {2, 3}}, [](const V& in) { return add(in[0], in[1]); });
  push("add_scalar_broadcast", {{2, 3}, {}}, [](const V& in) { return add(in[0], in[1]); });
  push("sub", {{2, 3}, {2, 3}}, [](const V& in) { return sub(in[0], in[1]); });
  push("mul", {{2, 3}, {2, 3}}, [](const V& in) { return mul(in[0], in[1]); });
  push("mul_scalar_broadcast", {{}, {2, 3}}, [](const V& in) { return mul(in[0], in[1]); });
  push("div", {{2, 3}, {2, 3}}, [](const V& in) { return div(in[0], in[1]); }, uniform_off_zero);
  push("neg", {{5}}, [](const V& in) { return neg(in[0]); });
  push("exp", {{5}}, [](const V& in) { return exp(in[0]); });
  push("log", {{5}}, [](const V& in) { return log(in[0]); }, uniform_pos);
  push("sqrt", {{5}}, [](const V& in) { return sqrt(in[0]); }, uniform_pos);
  push("sigmoid", {{5}}, [](const V& in) { return sigmoid(in[0]); });
  push("relu", {{5}}, [](const V& in) { return relu(in[0]); }, uniform_off_zero);
  push("abs", {{5}}, [](const V& in) { return abs(in[0]); }, uniform_off_zero);
  push("scale", {{5}}, [](const V& in) { return scale(in[0], 1.7); });
  push("matmul", {{3, 4}, {4, 2}}, [](const V& in) { return matmul(in[0], in[1]); });
  push("conv2d_stride1", {{2, 5, 5}, {3, 2, 3, 3}, {3}},
       [](const V& in) { return conv2d(in[0], in[1], in[2], 1); });
  push("conv2d_stride2", {{1, 6, 6}, {2, 1, 3, 3}, {2}},
       [](const V& in) { return conv2d(in[0], in[1], in[2], 2); });
  push("reduce_sum", {{3, 4}}, [](const V& in) { return reduce_sum(in[0], 1); });
  push("reduce_mean", {{3, 4}}, [](const V& in) { return reduce_mean(in[0], 0); });
  // spread values so the argmax never sits within a finite-difference step of a tie
  push("reduce_max", {{3, 4}}, [](const V& in) { return reduce_max(in[0], 1); },
       [](Rng& rng) { return rng.uniform(-4.0, 4.0); });
  push("sum_all", {{2, 3}}, [](const V& in) { return sum_all(in[0]); });
  push("softmax", {{2, 4}}, [](const V& in) { return softmax(in[0], 1); });
  push("l2_norm", {{3, 4}}, [](const V& in) { return l2_norm(in[0], 1); }, uniform_off_zero);
  push("reshape", {{2, 6}}, [](const V& in) { return reshape(in[0], Shape{3, 4}); });
  push("transpose", {{2, 3, 4}}, [](const V& in) { return transpose(in[0], {2, 0, 1}); });
  push("expand_last", {{3, 2}}, [](const V& in) { return expand_last(in[0], 4); });
  push("squash", {{3, 4}}, [](const V& in) { return caps::squash(in[0]); }, uniform_off_zero);
  push("caps_predict", {{3, 2, 4, 3}, {3, 3}},
       [](const V& in) { return caps::caps_predict(in[0], in[1]); });
  push("route_weighted_sum", {{3, 2, 4}}, [](const V& in) {
    std::vector<double> r = {0.7, 0.3, 0.5, 0.9, 0.2, 0.6};
    return caps::route_weighted_sum(in[0], r);
  });
  push("routing_sigmoid", {{3, 2}}, [](const V& in) { return caps::routing_sigmoid(in[0]); });
  push("routing_softmax", {{3, 2}}, [](const V& in) { return caps::routing_softmax(in[0]); });
  return ops;
}

inline std::vector<OpSpec> loss_specs() {
  using V = std::vector<Tensor<double>>;
  std::vector<OpSpec> ops;
  ops.push_back(OpSpec{
      "reconstruction_loss",
      {{4, 4}},
      [](const V& in) {
        std::vector<double> image = {0.1, 0.9, 0.4, 0.3, 0.8, 0.2, 0.5, 0.6,
                                     0.7, 0.1, 0.3, 0.9, 0.2, 0.4, 0.6, 0.5};
        std::vector<double> mask = {1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 1};
        return losses::reconstruction_loss(in[0], image, mask, 0.512);
      },
      // keep |recon - masked target| away from the absolute-value kink
      [](Rng& rng) { return rng.uniform(1.5, 3.0); },
      1e-5});
  ops.push_back(OpSpec{
      "attribute_loss",
      {{6}},
      [](const V& in) {
        std::vector<double> target = {0.1, 0.4, 0.9, 0.3, 0.6, 0.8};
        std::vector<double> alpha = {1.0, 1.0, 0.5, 2.0, 1.0, 1.0};
        return losses::attribute_loss(in[0], target, alpha);
      },
      [](Rng& rng) { return rng.uniform(1.5, 3.0); },
      1e-5});
  ops.push_back(OpSpec{
      "malignancy_kl_loss",
      {{5}},
      [](const V& in) {
        const std::vector<double> g = losses::fit_target_distribution(3.4, 0.8, 5);
        return losses::malignancy_kl_loss(in[0], g, 1.0);
      },
      uniform_pm2,
      1e-5});
  return ops;
}

}  // namespace detail_gc

inline std::vector<CheckResult> run_primitive_checks(std::uint64_t seed, std::size_t trials = 20) {
  std::vector<CheckResult> results;
  for (const auto& op : detail_gc::primitive_specs()) {
    Rng rng(mix_seed(seed, 0x6C0000 + results.size()));
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t)
      worst = std::max(worst, detail_gc::check_op(op, rng));
    results.push_back(CheckResult{op.name, worst, op.tolerance, worst < op.tolerance});
  }
  return results;
}

inline std::vector<CheckResult> run_loss_checks(std::uint64_t seed, std::size_t trials = 20) {
  std::vector<CheckResult> results;
  for (const auto& op : detail_gc::loss_specs()) {
    Rng rng(mix_seed(seed, 0x7055 + results.size()));
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t)
      worst = std::max(worst, detail_gc::check_op(op, rng));
    results.push_back(CheckResult{op.name, worst, op.tolerance, worst < op.tolerance});
  }
  return results;
}

// End-to-end check on a toy network: gradients of the full training loss for
// every parameter against central differences, with routing coefficients
// frozen at their base-point values (they are constants on the tape, so the
// differentiated function holds them fixed).
inline CheckResult run_model_check(std::uint64_t seed) {
  model::XCapsConfig config;
  config.input_size = 8;
  config.conv_filters = 4;
  config.conv_kernel = 3;
  config.primary_types = 2;
  config.primary_dim = 4;
  config.primary_kernel = 3;
  config.primary_stride = 2;
  config.attr_count = 2;
  config.attr_dim = 4;
  config.decoder_widths = {6, 10};
  auto net = model::XCapsModel<double>::build(config, seed);

  Rng rng(mix_seed(seed, 0xE2E));
  train::SampleTargets<double> tgt;
  tgt.id = "gradcheck";
  tgt.image.resize(config.pixels());
  tgt.mask.resize(config.pixels());
  for (std::size_t i = 0; i < config.pixels(); ++i) {
    tgt.image[i] = rng.uniform();
    tgt.mask[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  }
  tgt.attr_targets = {0.3, 0.7};
  tgt.attr_means = {2.2, 3.8};
  tgt.malig_dist = losses::fit_target_distribution(3.1, 0.9, config.malignancy_classes);
  tgt.malig_mean = 3.1;
  tgt.malig_mean_norm = (3.1 - 1.0) / 4.0;

  train::TrainConfig tc;
  tc.weights.alpha.assign(config.attr_count, 1.0);

  // base forward: analytic gradients and the frozen routing coefficients
  Tape<double> tape;
  model::ForwardOptions<double> opts;
  opts.tape = &tape;
  model::ForwardOutput<double> fwd = net.forward(tgt.image, opts);
  const std::vector<double> frozen_r = fwd.routing_coefficients;
  Tensor<double> loss = train::sample_loss(fwd, tgt, tc).total;
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const Tensor<double>& p : fwd.bound_params) {
    const auto& g = p.grad();
    analytic.push_back(g.empty() ? std::vector<double>(p.size(), 0.0) : g);
  }

  auto objective = [&]() {
    model::ForwardOptions<double> o;
    o.fixed_routing = &frozen_r;
    model::ForwardOutput<double> f = net.forward(tgt.image, o);
    return train::sample_loss(f, tgt, tc).breakdown.total;
  };

  double worst = 0.0;
  auto& params = net.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double>& vals = *params[p].values;
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      vals[j] = orig + detail_gc::kStep;
      const double fp = objective();
      vals[j] = orig - detail_gc::kStep;
      const double fm = objective();
      vals[j] = orig;
      worst = std::max(worst, rel_err(analytic[p][j], (fp - fm) / (2.0 * detail_gc::kStep)));
    }
  }
  return CheckResult{"model_end_to_end", worst, 1e-4, worst < 1e-4};
}

inline bool all_pass(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace xcaps::gradcheck

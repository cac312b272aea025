// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xcaps/data.hpp"
#include "xcaps/losses.hpp"
#include "xcaps/model.hpp"
#include "xcaps/pgm.hpp"
#include "xcaps/ratings.hpp"
#include "xcaps/rng.hpp"

namespace xcaps::train {

enum class MalignancyMode { kDistribution, kMeanRegression };

// Protocol defaults: batch 16, Adam at 0.02 cut by 10x on validation
// plateau, early stopping on the 10% validation split.
struct TrainConfig {
  std::size_t batch_size = 16;
  double lr = 0.02;
  double plateau_factor = 0.1;
  std::size_t plateau_patience = 5;
  std::size_t early_stop_patience = 15;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  caps::RoutingMode routing_mode = caps::RoutingMode::kSigmoid;
  std::size_t routing_iterations = 3;
  bool use_reconstruction = true;
  MalignancyMode malignancy_mode = MalignancyMode::kDistribution;
  losses::LossWeights weights;
  std::size_t folds = 5;
  double val_fraction = 0.10;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("train: lr must be positive");
    if (!(plateau_factor > 0 && plateau_factor < 1))
      throw std::invalid_argument("train: plateau factor must be in (0,1)");
    if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
    weights.validate();
  }

  caps::RoutingConfig routing() const {
    return routing_mode == caps::RoutingMode::kSigmoid
               ? caps::RoutingConfig::sigmoid(routing_iterations)
               : caps::RoutingConfig::softmax(routing_iterations);
  }
};

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamState init(const model::XCapsModel<T>& m_) {
    AdamState s;
    for (const auto& p : m_.parameters()) {
      s.m.emplace_back(p.size(), T(0));
      s.v.emplace_back(p.size(), T(0));
    }
    return s;
  }
};

// Bias-corrected Adam update, in place on the model parameters.
template <typename T>
void adam_step(model::XCapsModel<T>& model_, const std::vector<std::vector<T>>& grads,
               AdamState<T>& state, double lr) {
  auto& params = model_.parameters();
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw std::invalid_argument("adam: buffer count mismatch");
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<T>& p = *params[i].values;
    const std::vector<T>& g = grads[i];
    if (g.size() != p.size())
      throw std::invalid_argument("adam: gradient size mismatch for " + params[i].name);
    std::vector<T>& m = state.m[i];
    std::vector<T>& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      if (!std::isfinite(gj))
        throw std::runtime_error("adam: non-finite gradient in " + params[i].name + "[" +
                                 std::to_string(j) + "]");
      const double mj = state.beta1 * static_cast<double>(m[j]) + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * static_cast<double>(v[j]) + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// per-sample supervision targets

template <typename T>
struct SampleTargets {
  std::string id;
  std::vector<T> image;
  std::vector<T> mask;
  std::vector<T> attr_targets;        // (mean-1)/4, per attribute
  std::vector<double> malig_dist;     // fitted Gaussian target over 5 classes
  double malig_mean = 0.0;
  double malig_mean_norm = 0.0;       // (mean-1)/4
  std::vector<double> attr_means;
};

template <typename T>
SampleTargets<T> make_targets(const data::SampleRecord& rec) {
  SampleTargets<T> t;
  t.id = rec.id;
  t.image.assign(rec.image.begin(), rec.image.end());
  t.mask.resize(rec.mask.size());
  for (std::size_t i = 0; i < rec.mask.size(); ++i) t.mask[i] = static_cast<T>(rec.mask[i]);
  t.attr_targets.resize(ratings::kAttributeCount);
  t.attr_means.resize(ratings::kAttributeCount);
  for (std::size_t a = 0; a < ratings::kAttributeCount; ++a) {
    t.attr_means[a] = ratings::mean_score(rec.scores.attributes[a]);
    t.attr_targets[a] = static_cast<T>((t.attr_means[a] - 1.0) / 4.0);
  }
  t.malig_dist = ratings::fit_label_distribution(rec.scores.malignancy).probs;
  t.malig_mean = rec.malignancy_mean();
  t.malig_mean_norm = (t.malig_mean - 1.0) / 4.0;
  return t;
}

template <typename T>
std::vector<SampleTargets<T>> make_targets(const std::vector<data::SampleRecord>& recs) {
  std::vector<SampleTargets<T>> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(make_targets<T>(r));
  return out;
}

// ---------------------------------------------------------------------------
// loss assembly

template <typename T>
struct SampleLoss {
  Tensor<T> total;
  losses::LossBreakdown breakdown;
};

template <typename T>
SampleLoss<T> sample_loss(const model::ForwardOutput<T>& fwd, const SampleTargets<T>& tgt,
                          const TrainConfig& cfg) {
  std::vector<T> alpha(tgt.attr_targets.size());
  for (std::size_t i = 0; i < alpha.size(); ++i)
    alpha[i] = static_cast<T>(cfg.weights.alpha.at(i));
  Tensor<T> l_a = losses::attribute_loss(fwd.attr_scores, tgt.attr_targets, alpha);

  Tensor<T> l_m;
  if (cfg.malignancy_mode == MalignancyMode::kDistribution) {
    l_m = losses::malignancy_kl_loss(fwd.logits, tgt.malig_dist, static_cast<T>(cfg.weights.beta));
  } else {
    // regress the normalized mean score with an absolute-error loss
    Tensor<T> pred = sigmoid(fwd.logits);
    Tensor<T> target(pred.shape(), std::vector<T>{static_cast<T>(tgt.malig_mean_norm)});
    l_m = scale(sum_all(abs(sub(target, pred))), static_cast<T>(cfg.weights.beta));
  }

  Tensor<T> l_r;
  const bool recon = cfg.use_reconstruction && cfg.weights.gamma > 0 && !fwd.reconstruction.empty();
  if (recon) {
    l_r = losses::reconstruction_loss(fwd.reconstruction, tgt.image, tgt.mask,
                                      static_cast<T>(cfg.weights.gamma));
  } else {
    l_r = Tensor<T>::scalar(T(0));
  }

  SampleLoss<T> out;
  out.total = losses::total_loss(l_m, l_a, l_r);
  out.breakdown = losses::make_breakdown(
      static_cast<double>(l_m.item()), static_cast<double>(l_a.item()),
      losses::attribute_loss_terms(fwd.attr_scores.values(), tgt.attr_targets, alpha),
      static_cast<double>(l_r.item()));
  return out;
}

// ---------------------------------------------------------------------------
// batched gradients: each sample runs forward/backward on its own tape, then
// per-sample gradients are reduced in index order. Results are bit-identical
// for any thread count.

template <typename T>
struct BatchGradients {
  std::vector<std::vector<T>> grads;  // aligned with model.parameters()
  losses::LossBreakdown mean_loss;
};

template <typename T>
BatchGradients<T> batch_gradients(const model::XCapsModel<T>& net,
                                  const std::vector<const SampleTargets<T>*>& batch,
                                  const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("batch_gradients: empty batch");
  struct PerSample {
    std::vector<std::vector<T>> grads;
    losses::LossBreakdown breakdown;
  };
  std::vector<PerSample> results(batch.size());

  auto run_sample = [&](std::size_t i) {
    Tape<T> tape;
    model::ForwardOptions<T> opts;
    opts.tape = &tape;
    opts.with_reconstruction = cfg.use_reconstruction && cfg.weights.gamma > 0;
    model::ForwardOutput<T> fwd = net.forward(batch[i]->image, opts);
    SampleLoss<T> loss = sample_loss(fwd, *batch[i], cfg);
    if (!all_finite(loss.total)) throw std::runtime_error("train: non-finite loss");
    tape.backward(loss.total);
    results[i].breakdown = loss.breakdown;
    results[i].grads.reserve(fwd.bound_params.size());
    for (const Tensor<T>& p : fwd.bound_params) {
      const std::vector<T>& g = p.grad();
      results[i].grads.push_back(g.empty() ? std::vector<T>(p.size(), T(0)) : g);
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, batch.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) run_sample(i);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mu;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < batch.size(); i += workers) run_sample(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  BatchGradients<T> out;
  const auto& params = net.parameters();
  out.grads.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) out.grads[p].assign(params[p].size(), T(0));
  const T inv = T(1) / static_cast<T>(batch.size());
  out.mean_loss.l_a_per_attribute.assign(ratings::kAttributeCount, 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      const std::vector<T>& g = results[i].grads[p];
      std::vector<T>& acc = out.grads[p];
      for (std::size_t j = 0; j < g.size(); ++j) acc[j] += inv * g[j];
    }
    const auto& b = results[i].breakdown;
    out.mean_loss.l_m += b.l_m;
    out.mean_loss.l_a += b.l_a;
    out.mean_loss.l_r += b.l_r;
    out.mean_loss.total += b.total;
    for (std::size_t a = 0; a < b.l_a_per_attribute.size(); ++a)
      out.mean_loss.l_a_per_attribute[a] += b.l_a_per_attribute[a];
  }
  const double n = static_cast<double>(batch.size());
  out.mean_loss.l_m /= n;
  out.mean_loss.l_a /= n;
  out.mean_loss.l_r /= n;
  out.mean_loss.total /= n;
  for (double& a : out.mean_loss.l_a_per_attribute) a /= n;
  return out;
}

// ---------------------------------------------------------------------------
// evaluation

struct SampleEval {
  std::string id;
  int malignancy_pred = 0;
  double malignancy_mean = 0.0;
  bool malignancy_correct = false;
  double confidence = 0.0;
  std::vector<double> attr_scale;              // predicted scores on the 1-5 scale
  std::vector<int> attr_pred;
  std::vector<bool> attr_correct;
  std::vector<std::vector<double>> contributions;  // [attr][class]
  losses::LossBreakdown loss;
};

struct EvalReport {
  std::size_t count = 0;
  std::vector<double> attribute_accuracy;  // per attribute
  double malignancy_accuracy = 0.0;
  double mean_confidence = 0.0;
  losses::LossBreakdown mean_loss;
  std::vector<SampleEval> samples;
};

inline int clamp_class(long v) { return static_cast<int>(std::min(5L, std::max(1L, v))); }

template <typename T>
EvalReport evaluate(const model::XCapsModel<T>& net, const std::vector<SampleTargets<T>>& targets,
                    const TrainConfig& cfg) {
  EvalReport rep;
  rep.count = targets.size();
  rep.attribute_accuracy.assign(ratings::kAttributeCount, 0.0);
  rep.mean_loss.l_a_per_attribute.assign(ratings::kAttributeCount, 0.0);
  if (targets.empty()) return rep;

  for (const SampleTargets<T>& tgt : targets) {
    model::ForwardOptions<T> opts;  // tape-free inference
    model::ForwardOutput<T> fwd = net.forward(tgt.image, opts);
    SampleEval se;
    se.id = tgt.id;
    se.malignancy_mean = tgt.malig_mean;

    const auto& logits = fwd.logits.values();
    if (cfg.malignancy_mode == MalignancyMode::kDistribution) {
      const auto probs_t = softmax(fwd.logits, 0);
      const auto& probs = probs_t.values();
      std::size_t best = 0;
      for (std::size_t k = 1; k < probs.size(); ++k)
        if (probs[k] > probs[best]) best = k;
      se.malignancy_pred = static_cast<int>(best) + 1;
      std::vector<double> pd(probs.begin(), probs.end());
      double sum = 0.0;
      for (double& p : pd) sum += p;
      for (double& p : pd) p /= sum;  // renormalize float32 residue
      se.confidence = ratings::confidence(pd);
    } else {
      const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[0])));
      se.malignancy_pred = clamp_class(std::lround(1.0 + 4.0 * s));
      se.confidence = 0.0;  // no distribution to score in regression mode
    }
    se.malignancy_correct = ratings::within_one_correct(se.malignancy_pred, tgt.malig_mean);

    const auto& norms = fwd.attr_scores.values();
    se.attr_scale.resize(norms.size());
    se.attr_pred.resize(norms.size());
    se.attr_correct.resize(norms.size());
    for (std::size_t a = 0; a < norms.size(); ++a) {
      se.attr_scale[a] = 1.0 + 4.0 * static_cast<double>(norms[a]);
      se.attr_pred[a] = clamp_class(std::lround(se.attr_scale[a]));
      se.attr_correct[a] = ratings::within_one_correct(se.attr_pred[a], tgt.attr_means[a]);
      if (se.attr_correct[a]) rep.attribute_accuracy[a] += 1.0;
    }
    se.contributions = model::contribution_report(net, fwd.attr_vectors.values());
    se.loss = sample_loss(fwd, tgt, cfg).breakdown;

    if (se.malignancy_correct) rep.malignancy_accuracy += 1.0;
    rep.mean_confidence += se.confidence;
    rep.mean_loss.l_m += se.loss.l_m;
    rep.mean_loss.l_a += se.loss.l_a;
    rep.mean_loss.l_r += se.loss.l_r;
    rep.mean_loss.total += se.loss.total;
    for (std::size_t a = 0; a < se.loss.l_a_per_attribute.size(); ++a)
      rep.mean_loss.l_a_per_attribute[a] += se.loss.l_a_per_attribute[a];
    rep.samples.push_back(std::move(se));
  }
  const double n = static_cast<double>(targets.size());
  for (double& a : rep.attribute_accuracy) a /= n;
  rep.malignancy_accuracy /= n;
  rep.mean_confidence /= n;
  rep.mean_loss.l_m /= n;
  rep.mean_loss.l_a /= n;
  rep.mean_loss.l_r /= n;
  rep.mean_loss.total /= n;
  for (double& a : rep.mean_loss.l_a_per_attribute) a /= n;
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& rep) {
  nlohmann::json samples = nlohmann::json::array();
  for (const SampleEval& s : rep.samples) {
    samples.push_back(nlohmann::json{{"id", s.id},
                                     {"malignancy_pred", s.malignancy_pred},
                                     {"malignancy_mean", s.malignancy_mean},
                                     {"malignancy_correct", s.malignancy_correct},
                                     {"confidence", s.confidence},
                                     {"attr_scale", s.attr_scale},
                                     {"attr_pred", s.attr_pred},
                                     {"attr_correct", s.attr_correct},
                                     {"contributions", s.contributions},
                                     {"loss_total", s.loss.total}});
  }
  return nlohmann::json{
      {"count", rep.count},
      {"attribute_names", ratings::kAttributeNames},
      {"attribute_accuracy", rep.attribute_accuracy},
      {"malignancy_accuracy", rep.malignancy_accuracy},
      {"mean_confidence", rep.mean_confidence},
      {"mean_loss",
       nlohmann::json{{"l_m", rep.mean_loss.l_m},
                      {"l_a", rep.mean_loss.l_a},
                      {"l_r", rep.mean_loss.l_r},
                      {"l_a_per_attribute", rep.mean_loss.l_a_per_attribute},
                      {"total", rep.mean_loss.total}}},
      {"samples", samples}};
}

// ---------------------------------------------------------------------------
// training loop

struct EpochRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_total = 0.0;
  double train_lm = 0.0;
  double train_la = 0.0;
  double train_lr = 0.0;
  double val_total = 0.0;
};

template <typename T>
struct FoldResult {
  model::XCapsModel<T> best_model;
  std::vector<EpochRow> log;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
};

template <typename T>
double mean_total_loss(const model::XCapsModel<T>& net, const std::vector<SampleTargets<T>>& targets,
                       const TrainConfig& cfg) {
  if (targets.empty()) throw std::invalid_argument("loss: empty evaluation set");
  double acc = 0.0;
  for (const auto& tgt : targets) {
    model::ForwardOptions<T> opts;
    opts.with_reconstruction = cfg.use_reconstruction && cfg.weights.gamma > 0;
    model::ForwardOutput<T> fwd = net.forward(tgt.image, opts);
    acc += sample_loss(fwd, tgt, cfg).breakdown.total;
  }
  return acc / static_cast<double>(targets.size());
}

// Epoch loop with seeded shuffling, plateau learning-rate decay and early
// stopping on the validation total loss; returns the best-validation weights.
template <typename T>
FoldResult<T> train_fold(const model::XCapsModel<T>& init,
                         const std::vector<SampleTargets<T>>& train_set,
                         const std::vector<SampleTargets<T>>& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty() || val_set.empty())
    throw std::invalid_argument("train_fold: empty train or validation split");

  model::XCapsModel<T> net = init.clone();
  AdamState<T> adam = AdamState<T>::init(net);
  double lr = cfg.lr;

  FoldResult<T> result;
  result.best_model = net.clone();
  std::size_t plateau_counter = 0;
  std::size_t stop_counter = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 0xE70C0000ULL + epoch));
    shuffle(order, shuffle_rng);

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<const SampleTargets<T>*> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&train_set[order[i]]);
      BatchGradients<T> bg = batch_gradients(net, batch, cfg);
      adam_step(net, bg.grads, adam, lr);
      const double w = static_cast<double>(batch.size());
      row.train_total += w * bg.mean_loss.total;
      row.train_lm += w * bg.mean_loss.l_m;
      row.train_la += w * bg.mean_loss.l_a;
      row.train_lr += w * bg.mean_loss.l_r;
      seen += batch.size();
    }
    row.train_total /= static_cast<double>(seen);
    row.train_lm /= static_cast<double>(seen);
    row.train_la /= static_cast<double>(seen);
    row.train_lr /= static_cast<double>(seen);

    row.val_total = mean_total_loss(net, val_set, cfg);
    result.log.push_back(row);

    if (row.val_total < result.best_val) {
      result.best_val = row.val_total;
      result.best_epoch = epoch;
      result.best_model = net.clone();
      plateau_counter = 0;
      stop_counter = 0;
    } else {
      ++plateau_counter;
      ++stop_counter;
      if (plateau_counter >= cfg.plateau_patience) {
        lr *= cfg.plateau_factor;
        plateau_counter = 0;
      }
      if (stop_counter >= cfg.early_stop_patience) break;
    }
  }
  return result;
}

inline void write_train_log(const std::filesystem::path& file, const std::vector<EpochRow>& rows) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("train log: cannot open " + file.string());
  out << "epoch,lr,train_total,train_lm,train_la,train_lr,val_total\n";
  char buf[256];
  for (const EpochRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.lr,
                  r.train_total, r.train_lm, r.train_la, r.train_lr, r.val_total);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// cross-validation driver

template <typename T>
struct CrossValResult {
  std::vector<EvalReport> fold_reports;
  std::vector<FoldResult<T>> folds;
  EvalReport aggregate;
};

inline EvalReport aggregate_reports(const std::vector<EvalReport>& reports) {
  EvalReport agg;
  agg.attribute_accuracy.assign(ratings::kAttributeCount, 0.0);
  agg.mean_loss.l_a_per_attribute.assign(ratings::kAttributeCount, 0.0);
  std::size_t total = 0;
  for (const EvalReport& r : reports) total += r.count;
  agg.count = total;
  if (total == 0) return agg;
  for (const EvalReport& r : reports) {
    const double w = static_cast<double>(r.count) / static_cast<double>(total);
    agg.malignancy_accuracy += w * r.malignancy_accuracy;
    agg.mean_confidence += w * r.mean_confidence;
    for (std::size_t a = 0; a < ratings::kAttributeCount; ++a)
      agg.attribute_accuracy[a] += w * r.attribute_accuracy[a];
    agg.mean_loss.l_m += w * r.mean_loss.l_m;
    agg.mean_loss.l_a += w * r.mean_loss.l_a;
    agg.mean_loss.l_r += w * r.mean_loss.l_r;
    agg.mean_loss.total += w * r.mean_loss.total;
    for (std::size_t a = 0; a < ratings::kAttributeCount; ++a)
      agg.mean_loss.l_a_per_attribute[a] += w * r.mean_loss.l_a_per_attribute[a];
  }
  return agg;
}

// Trains and evaluates each requested fold: the fold is held out for
// evaluation, the rest is split 90/10 into train/validation.
template <typename T>
CrossValResult<T> cross_validate(const std::vector<data::SampleRecord>& records,
                                 const model::XCapsConfig& config, const TrainConfig& cfg,
                                 std::optional<std::size_t> only_fold = {}) {
  cfg.validate();
  data::FoldSpec folds = data::stratified_kfold(records, cfg.folds, cfg.seed);

  CrossValResult<T> out;
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    if (only_fold && *only_fold != f) continue;
    std::vector<data::SampleRecord> held, rest;
    for (const auto& rec : records)
      (folds.fold_of(rec.id) == f ? held : rest).push_back(rec);
    auto [train_recs, val_recs] =
        data::train_val_split(rest, cfg.val_fraction, mix_seed(cfg.seed, 0x5EED00 + f));

    model::XCapsConfig fold_config = config;
    fold_config.routing = cfg.routing();
    fold_config.malignancy_outputs =
        cfg.malignancy_mode == MalignancyMode::kDistribution ? config.malignancy_classes : 1;
    model::XCapsModel<T> init =
        model::XCapsModel<T>::build(fold_config, mix_seed(cfg.seed, 0xB111D + f));

    auto train_targets = make_targets<T>(train_recs);
    auto val_targets = make_targets<T>(val_recs);
    auto held_targets = make_targets<T>(held);

    FoldResult<T> fr = train_fold(init, train_targets, val_targets, cfg);
    out.fold_reports.push_back(evaluate(fr.best_model, held_targets, cfg));
    out.folds.push_back(std::move(fr));
  }
  out.aggregate = aggregate_reports(out.fold_reports);
  return out;
}

// ---------------------------------------------------------------------------
// ablations: base model plus the three single-change variants, run on
// identical fold assignments and per-seed initializations.

struct AblationRow {
  std::string name;
  std::vector<double> malignancy_acc_per_seed;
  double mean_malignancy_acc = 0.0;
  bool reconstruction_loss_always_zero = true;
};

template <typename T>
std::vector<AblationRow> ablation_suite(const std::vector<data::SampleRecord>& records,
                                        const model::XCapsConfig& config, const TrainConfig& base,
                                        const std::vector<std::uint64_t>& seeds,
                                        std::optional<std::size_t> only_fold = 0) {
  struct Variant {
    std::string name;
    TrainConfig cfg;
  };
  std::vector<Variant> variants;
  variants.push_back({"base", base});
  {
    TrainConfig c = base;
    c.malignancy_mode = MalignancyMode::kMeanRegression;
    variants.push_back({"mean_regression", c});
  }
  {
    TrainConfig c = base;
    c.use_reconstruction = false;
    variants.push_back({"no_reconstruction", c});
  }
  {
    TrainConfig c = base;
    c.routing_mode = caps::RoutingMode::kSoftmax;
    variants.push_back({"routing_softmax", c});
  }

  std::vector<AblationRow> rows;
  for (const Variant& v : variants) {
    AblationRow row;
    row.name = v.name;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = v.cfg;
      cfg.seed = seed;  // same seed across variants: identical folds, splits, shuffles
      CrossValResult<T> cv = cross_validate<T>(records, config, cfg, only_fold);
      row.malignancy_acc_per_seed.push_back(cv.aggregate.malignancy_accuracy);
      for (const FoldResult<T>& fr : cv.folds)
        for (const EpochRow& er : fr.log)
          if (er.train_lr != 0.0) row.reconstruction_loss_always_zero = false;
    }
    double sum = 0.0;
    for (double a : row.malignancy_acc_per_seed) sum += a;
    row.mean_malignancy_acc = sum / static_cast<double>(row.malignancy_acc_per_seed.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// reconstruction sweeps: per attribute capsule, one PGM grid of
// attr_dim rows x 11 delta columns of decoded tiles.

template <typename T>
std::vector<std::filesystem::path> emit_sweep_images(const model::XCapsModel<T>& net,
                                                     const data::SampleRecord& rec,
                                                     const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto& c = net.config();
  std::vector<T> image(rec.image.begin(), rec.image.end());
  model::ForwardOutput<T> fwd = net.forward(image);
  const std::vector<T> vectors = fwd.attr_vectors.values();
  const std::vector<double> deltas = model::default_sweep_deltas();

  const std::size_t tile = c.input_size;
  const std::size_t grid_w = deltas.size() * tile;
  const std::size_t grid_h = c.attr_dim * tile;
  std::vector<std::filesystem::path> files;
  for (std::size_t a = 0; a < c.attr_count; ++a) {
    std::vector<double> grid(grid_w * grid_h, 0.0);
    for (std::size_t d = 0; d < c.attr_dim; ++d) {
      const auto sweep = model::perturb_and_decode(net, vectors, a, d, deltas);
      for (std::size_t col = 0; col < sweep.size(); ++col)
        for (std::size_t y = 0; y < tile; ++y)
          for (std::size_t x = 0; x < tile; ++x)
            grid[(d * tile + y) * grid_w + col * tile + x] =
                static_cast<double>(sweep[col][y * tile + x]);
    }
    const std::string name = a < ratings::kAttributeCount
                                 ? std::string(ratings::kAttributeNames[a])
                                 : "attr" + std::to_string(a);
    fs::path file = out_dir / ("sweep_" + rec.id + "_" + name + ".pgm");
    write_pgm(file, grid_w, grid_h, grid);
    files.push_back(std::move(file));
  }
  return files;
}

// ---------------------------------------------------------------------------
// Pixel-space multinomial logistic regression, the learned-linear comparator
// for the capsule model. Full-batch Adam on the softmax cross-entropy of the
// rounded mean score; independent of the tensor engine by construction.

struct LogisticBaseline {
  std::size_t features = 0;
  std::size_t classes = 5;
  std::vector<double> weights;  // [classes x (features+1)], last column is bias

  int predict(const std::vector<float>& image) const {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < classes; ++k) {
      const double* row = weights.data() + k * (features + 1);
      double s = row[features];
      for (std::size_t i = 0; i < features; ++i) s += row[i] * static_cast<double>(image[i]);
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    return static_cast<int>(best) + 1;
  }
};

inline LogisticBaseline train_logistic_baseline(const std::vector<data::SampleRecord>& train_recs,
                                                std::size_t iterations = 400, double lr = 0.1) {
  if (train_recs.empty()) throw std::invalid_argument("baseline: empty training set");
  const std::size_t n = train_recs.size();
  const std::size_t f = data::kPatchPixels;
  const std::size_t classes = 5;
  LogisticBaseline model;
  model.features = f;
  model.classes = classes;
  model.weights.assign(classes * (f + 1), 0.0);

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i)
    labels[i] = clamp_class(std::lround(train_recs[i].malignancy_mean())) - 1;

  std::vector<double> m(model.weights.size(), 0.0), v(model.weights.size(), 0.0);
  std::vector<double> logits(classes), probs(classes);
  std::vector<double> grad(model.weights.size());
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  for (std::size_t it = 1; it <= iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& img = train_recs[i].image;
      for (std::size_t k = 0; k < classes; ++k) {
        const double* row = model.weights.data() + k * (f + 1);
        double s = row[f];
        for (std::size_t p = 0; p < f; ++p) s += row[p] * static_cast<double>(img[p]);
        logits[k] = s;
      }
      double mx = logits[0];
      for (double s : logits) mx = std::max(mx, s);
      double z = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        probs[k] = std::exp(logits[k] - mx);
        z += probs[k];
      }
      for (std::size_t k = 0; k < classes; ++k) {
        const double err = probs[k] / z - (static_cast<int>(k) == labels[i] ? 1.0 : 0.0);
        double* grow = grad.data() + k * (f + 1);
        for (std::size_t p = 0; p < f; ++p) grow[p] += err * static_cast<double>(img[p]);
        grow[f] += err;
      }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(it));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(it));
    for (std::size_t j = 0; j < grad.size(); ++j) {
      const double g = grad[j] * inv_n;
      m[j] = beta1 * m[j] + (1.0 - beta1) * g;
      v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      model.weights[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
  return model;
}

inline double baseline_accuracy(const LogisticBaseline& model,
                                const std::vector<data::SampleRecord>& records) {
  if (records.empty()) throw std::invalid_argument("baseline: empty evaluation set");
  std::size_t correct = 0;
  for (const auto& rec : records)
    if (ratings::within_one_correct(model.predict(rec.image), rec.malignancy_mean())) ++correct;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

}  // namespace xcaps::train

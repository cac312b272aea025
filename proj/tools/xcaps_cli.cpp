// SPDX-License-Identifier: Apache-2.0
// Command-line front end: dataset generation, training, evaluation,
// ablations, reconstruction sweeps and the gradient-check suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "xcaps/data.hpp"
#include "xcaps/gradcheck.hpp"
#include "xcaps/model.hpp"
#include "xcaps/trainer.hpp"

namespace fs = std::filesystem;
using namespace xcaps;

namespace {

struct TrainArgs {
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t batch = 16;
  double lr = 0.02;
  std::string routing = "sigmoid";
  bool no_reconstruction = false;
  std::string malignancy = "distribution";
  std::size_t epochs = 100;
  std::size_t folds = 5;
  int fold = -1;
  double val_fraction = 0.10;
  double gamma = 0.512;
  std::size_t routing_iterations = 3;
  std::size_t threads = 0;
  std::string precision = "float32";
  bool keep_mean3 = false;
  // architecture knobs; defaults follow the reference design
  std::size_t conv_filters = 256;
  std::size_t primary_types = 32;
  std::size_t primary_dim = 8;
  std::size_t attr_dim = 16;
  std::vector<std::size_t> decoder_widths = {512, 1024};
};

std::size_t pick_threads(std::size_t requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

train::TrainConfig to_train_config(const TrainArgs& a) {
  train::TrainConfig cfg;
  cfg.batch_size = a.batch;
  cfg.lr = a.lr;
  cfg.seed = a.seed;
  cfg.max_epochs = a.epochs;
  cfg.folds = a.folds;
  cfg.val_fraction = a.val_fraction;
  cfg.routing_mode =
      a.routing == "softmax" ? caps::RoutingMode::kSoftmax : caps::RoutingMode::kSigmoid;
  cfg.routing_iterations = a.routing_iterations;
  cfg.use_reconstruction = !a.no_reconstruction;
  cfg.malignancy_mode = a.malignancy == "mean" ? train::MalignancyMode::kMeanRegression
                                               : train::MalignancyMode::kDistribution;
  cfg.weights.gamma = a.gamma;
  cfg.threads = pick_threads(a.threads);
  return cfg;
}

model::XCapsConfig to_model_config(const TrainArgs& a) {
  model::XCapsConfig c;
  c.conv_filters = a.conv_filters;
  c.primary_types = a.primary_types;
  c.primary_dim = a.primary_dim;
  c.attr_dim = a.attr_dim;
  c.decoder_widths = a.decoder_widths;
  return c;
}

void write_json(const fs::path& file, const nlohmann::json& j) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << j.dump(2) << "\n";
}

template <typename T>
int run_train(const TrainArgs& args) {
  auto records = data::load_dataset(args.data, !args.keep_mean3);
  if (records.empty()) {
    std::cerr << "no records in " << args.data << "\n";
    return 1;
  }
  fs::create_directories(args.out);
  const train::TrainConfig cfg = to_train_config(args);
  std::optional<std::size_t> only_fold;
  if (args.fold >= 0) only_fold = static_cast<std::size_t>(args.fold);

  std::cout << "training on " << records.size() << " samples, " << cfg.folds << "-fold"
            << (only_fold ? " (fold " + std::to_string(*only_fold) + " only)" : "") << ", "
            << args.precision << ", " << cfg.threads << " threads\n";

  auto cv = train::cross_validate<T>(records, to_model_config(args), cfg, only_fold);

  std::size_t report_idx = 0;
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    if (only_fold && *only_fold != f) continue;
    const auto& fr = cv.folds[report_idx];
    const auto& rep = cv.fold_reports[report_idx];
    const std::string tag = std::to_string(f);
    model::save_checkpoint(fr.best_model, fs::path(args.out) / ("checkpoint_fold" + tag + ".xcap"));
    train::write_train_log(fs::path(args.out) / ("train_log_fold" + tag + ".csv"), fr.log);
    write_json(fs::path(args.out) / ("report_fold" + tag + ".json"), train::report_to_json(rep));
    std::printf("fold %zu: %zu epochs, best val %.6f, malignancy acc %.4f\n", f, fr.log.size(),
                fr.best_val, rep.malignancy_accuracy);
    ++report_idx;
  }
  write_json(fs::path(args.out) / "report.json", train::report_to_json(cv.aggregate));
  std::printf("aggregate malignancy accuracy %.4f over %zu samples\n",
              cv.aggregate.malignancy_accuracy, cv.aggregate.count);
  return 0;
}

template <typename T>
int run_evaluate(const std::string& data, const std::string& checkpoint, const std::string& report,
                 bool keep_mean3) {
  auto net = model::load_checkpoint<T>(checkpoint);
  auto records = data::load_dataset(data, !keep_mean3);
  train::TrainConfig cfg;
  cfg.malignancy_mode = net.config().malignancy_outputs == 1
                            ? train::MalignancyMode::kMeanRegression
                            : train::MalignancyMode::kDistribution;
  auto targets = train::make_targets<T>(records);
  auto rep = train::evaluate(net, targets, cfg);
  write_json(report, train::report_to_json(rep));
  std::printf("evaluated %zu samples: malignancy acc %.4f, mean confidence %.4f\n", rep.count,
              rep.malignancy_accuracy, rep.mean_confidence);
  std::printf("attributes:");
  for (std::size_t a = 0; a < rep.attribute_accuracy.size(); ++a)
    std::printf(" %s %.4f", ratings::kAttributeNames[a], rep.attribute_accuracy[a]);
  std::printf("\n");
  return 0;
}

template <typename T>
int run_ablate(const TrainArgs& args, std::size_t n_seeds) {
  auto records = data::load_dataset(args.data, !args.keep_mean3);
  fs::create_directories(args.out);
  const train::TrainConfig cfg = to_train_config(args);
  std::optional<std::size_t> only_fold;
  if (args.fold >= 0) only_fold = static_cast<std::size_t>(args.fold);

  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(args.seed + i);
  auto rows = train::ablation_suite<T>(records, to_model_config(args), cfg, seeds, only_fold);

  std::ofstream csv(fs::path(args.out) / "ablation.csv", std::ios::trunc);
  csv << "variant,mean_malignancy_accuracy";
  for (std::size_t s = 0; s < seeds.size(); ++s) csv << ",seed" << seeds[s];
  csv << "\n";
  std::printf("%-20s %s\n", "variant", "malignancy accuracy");
  for (const auto& row : rows) {
    csv << row.name << "," << row.mean_malignancy_acc;
    for (double a : row.malignancy_acc_per_seed) csv << "," << a;
    csv << "\n";
    std::printf("%-20s %.4f (", row.name.c_str(), row.mean_malignancy_acc);
    for (std::size_t s = 0; s < row.malignancy_acc_per_seed.size(); ++s)
      std::printf("%s%.4f", s ? ", " : "", row.malignancy_acc_per_seed[s]);
    std::printf(")\n");
  }
  return 0;
}

int run_gradcheck() {
  bool ok = true;
  auto print = [&](const gradcheck::CheckResult& r) {
    std::printf("%-24s max rel err %.3e (tol %.0e) %s\n", r.name.c_str(), r.max_rel_err,
                r.tolerance, r.pass ? "pass" : "FAIL");
    ok = ok && r.pass;
  };
  for (const auto& r : gradcheck::run_primitive_checks(2024)) print(r);
  for (const auto& r : gradcheck::run_loss_checks(2024)) print(r);
  print(gradcheck::run_model_check(2024));
  std::printf("gradient checks %s\n", ok ? "passed" : "FAILED");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"X-Caps: explainable capsule network trainer"};
  app.require_subcommand(1);

  // generate
  auto* generate = app.add_subcommand("generate", "write a synthetic dataset directory");
  data::SyntheticConfig gen_cfg;
  std::string gen_out;
  generate->add_option("--seed", gen_cfg.seed, "generator seed")->required();
  generate->add_option("--count", gen_cfg.count, "number of samples")->required();
  generate->add_option("--out", gen_out, "output directory")->required();
  generate->add_option("--raters", gen_cfg.rater_count, "raters per sample (default 4)");
  generate->add_option("--noise", gen_cfg.rater_noise, "rater noise in score units (default 0.7)");

  // train
  auto* tr = app.add_subcommand("train", "train with stratified cross-validation");
  TrainArgs targs;
  tr->add_option("--data", targs.data)->required();
  tr->add_option("--out", targs.out)->required();
  tr->add_option("--seed", targs.seed);
  tr->add_option("--batch", targs.batch);
  tr->add_option("--lr", targs.lr);
  tr->add_option("--routing", targs.routing)->check(CLI::IsMember({"sigmoid", "softmax"}));
  tr->add_flag("--no-reconstruction", targs.no_reconstruction);
  tr->add_option("--malignancy", targs.malignancy)->check(CLI::IsMember({"distribution", "mean"}));
  tr->add_option("--epochs", targs.epochs);
  tr->add_option("--folds", targs.folds);
  tr->add_option("--fold", targs.fold, "train a single fold index");
  tr->add_option("--val-fraction", targs.val_fraction);
  tr->add_option("--gamma", targs.gamma, "reconstruction weight (default 0.512)");
  tr->add_option("--routing-iterations", targs.routing_iterations);
  tr->add_option("--threads", targs.threads, "worker threads (default: hardware)");
  tr->add_option("--precision", targs.precision)->check(CLI::IsMember({"float32", "float64"}));
  tr->add_flag("--keep-mean3", targs.keep_mean3, "keep samples with mean malignancy exactly 3");
  tr->add_option("--conv-filters", targs.conv_filters);
  tr->add_option("--primary-types", targs.primary_types);
  tr->add_option("--primary-dim", targs.primary_dim);
  tr->add_option("--attr-dim", targs.attr_dim);
  tr->add_option("--decoder-widths", targs.decoder_widths)->expected(-1);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
  std::string ev_data, ev_ckpt, ev_report;
  bool ev_keep3 = false;
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--report", ev_report)->required();
  ev->add_flag("--keep-mean3", ev_keep3);

  // ablate
  auto* ab = app.add_subcommand("ablate", "run the four-way ablation comparison");
  TrainArgs aargs;
  std::size_t ab_seeds = 1;
  aargs.folds = 5;
  aargs.fold = 0;
  ab->add_option("--data", aargs.data)->required();
  ab->add_option("--out", aargs.out)->required();
  ab->add_option("--seed", aargs.seed)->required();
  ab->add_option("--seeds", ab_seeds, "number of seeds (default 1)");
  ab->add_option("--epochs", aargs.epochs);
  ab->add_option("--folds", aargs.folds);
  ab->add_option("--fold", aargs.fold, "fold index to run (default 0, -1 for all)");
  ab->add_option("--batch", aargs.batch);
  ab->add_option("--threads", aargs.threads);
  ab->add_option("--precision", aargs.precision)->check(CLI::IsMember({"float32", "float64"}));
  ab->add_option("--conv-filters", aargs.conv_filters);
  ab->add_option("--primary-types", aargs.primary_types);
  ab->add_option("--primary-dim", aargs.primary_dim);
  ab->add_option("--attr-dim", aargs.attr_dim);
  ab->add_option("--decoder-widths", aargs.decoder_widths)->expected(-1);

  // sweep
  auto* sw = app.add_subcommand("sweep", "emit perturbation-sweep reconstruction grids");
  std::string sw_ckpt, sw_sample, sw_out, sw_data;
  sw->add_option("--checkpoint", sw_ckpt)->required();
  sw->add_option("--sample", sw_sample)->required();
  sw->add_option("--out", sw_out)->required();
  sw->add_option("--data", sw_data, "dataset directory holding the sample")->required();

  // gradcheck
  app.add_subcommand("gradcheck", "run the finite-difference gradient suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) {
      data::generate_synthetic(gen_cfg, gen_out);
      std::printf("wrote %zu samples to %s\n", gen_cfg.count, gen_out.c_str());
      return 0;
    }
    if (tr->parsed())
      return targs.precision == "float64" ? run_train<double>(targs) : run_train<float>(targs);
    if (ev->parsed()) return run_evaluate<double>(ev_data, ev_ckpt, ev_report, ev_keep3);
    if (ab->parsed())
      return aargs.precision == "float64" ? run_ablate<double>(aargs, ab_seeds)
                                          : run_ablate<float>(aargs, ab_seeds);
    if (sw->parsed()) {
      auto net = model::load_checkpoint<double>(sw_ckpt);
      auto records = data::load_dataset(sw_data, false);
      for (const auto& rec : records) {
        if (rec.id != sw_sample) continue;
        auto files = train::emit_sweep_images(net, rec, sw_out);
        for (const auto& f : files) std::printf("wrote %s\n", f.string().c_str());
        return 0;
      }
      std::cerr << "sample " << sw_sample << " not found in " << sw_data << "\n";
      return 1;
    }
    return run_gradcheck();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

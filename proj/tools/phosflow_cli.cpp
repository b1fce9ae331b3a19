// Copyright 2026 The Phosflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end: dataset generation, training, evaluation and the
// latent-likelihood studies.

#include <omp.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>

#include "CLI11.hpp"
#include "phosflow/data.hpp"
#include "phosflow/errors.hpp"
#include "phosflow/image.hpp"
#include "phosflow/logging.hpp"
#include "phosflow/metrics.hpp"
#include "phosflow/pipeline.hpp"

namespace fs = std::filesystem;
using namespace phosflow;

namespace {

data::LabeledImageSet mnist_split(const fs::path& dir, bool train, std::size_t side, std::size_t limit) {
  const std::string stem = train ? "train" : "t10k";
  auto set = data::load_mnist(dir / (stem + "-images-idx3-ubyte"), dir / (stem + "-labels-idx1-ubyte"), limit);
  return side == 28 ? set : data::resize_images(set, side);
}

void check_res(std::size_t res) {
  if (res != 9 && res != 28) throw ParameterError("--res must be 9 or 28");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phosflow: stimulus optimization with invertible networks"};
  app.require_subcommand(1);
  int threads = 0;
  bool verbose = false, quiet = false;
  app.add_option("--threads", threads, "OpenMP worker count (0: runtime default)");
  app.add_flag("-v,--verbose", verbose, "Progress logging");
  app.add_flag("-q,--quiet", quiet, "Errors only");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate random stimulus/percept pairs (PFDS)");
  std::size_t gen_res = 28, gen_count = 100000;
  std::uint64_t gen_seed = 0;
  fs::path gen_out;
  gen->add_option("--res", gen_res, "Percept resolution (9 or 28)");
  gen->add_option("--count", gen_count, "Number of pairs");
  gen->add_option("--seed", gen_seed, "Master seed");
  gen->add_option("-o,--out", gen_out, "Output file")->required();

  // train
  auto* train = app.add_subcommand("train", "Train an encoder");
  fs::path config_path;
  std::string model;
  std::size_t res = 0, epochs = 0, batch = 0, max_steps = 0, count = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  std::string dataset, output;
  bool swap = false;
  train->add_option("-c,--config", config_path, "JSON experiment config");
  train->add_option("--model", model, "down | linear | nn | inn | cinn");
  train->add_option("--res", res, "Resolution (9 or 28)");
  train->add_option("--dataset", dataset, "PFDS file (generated in memory when absent)");
  train->add_option("--count", count, "Pairs to generate when no dataset file is given");
  train->add_option("--epochs", epochs, "Epochs");
  train->add_option("--batch", batch, "Batch size");
  train->add_option("--max-steps", max_steps, "Step cap overriding epochs");
  train->add_option("--lr", lr, "Adam learning rate");
  auto* seed_opt = train->add_option("--seed", seed, "Seed");
  train->add_option("--output", output, "Output directory");
  train->add_flag("--swap-direction", swap, "INN: stimulus -> percept as the forward map");

  // train-classifier
  auto* tcls = app.add_subcommand("train-classifier", "Train the MNIST classifier used for ACC");
  fs::path mnist_dir;
  std::size_t cls_res = 28, cls_epochs = 4;
  std::uint64_t cls_seed = 0;
  fs::path cls_out;
  tcls->add_option("--mnist", mnist_dir, "Directory with the MNIST IDX files")->required();
  tcls->add_option("--res", cls_res, "Resolution (9 or 28)");
  tcls->add_option("--epochs", cls_epochs, "Epochs");
  tcls->add_option("--seed", cls_seed, "Seed");
  tcls->add_option("-o,--out", cls_out, "Checkpoint path")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Score an encoder on MNIST test targets");
  fs::path ckpt, classifier_path, eval_out;
  std::size_t eval_count = 1000;
  eval->add_option("--checkpoint", ckpt, "Encoder checkpoint")->required();
  eval->add_option("--mnist", mnist_dir, "Directory with the MNIST IDX files")->required();
  eval->add_option("--classifier", classifier_path, "Classifier checkpoint")->required();
  eval->add_option("--count", eval_count, "Number of test images");
  eval->add_option("-o,--out", eval_out, "Output directory")->required();

  // optimize-latent
  auto* opt = app.add_subcommand("optimize-latent", "Likelihood ascent on z for the worst targets");
  pipeline::LatentOptions lopts;
  fs::path opt_out;
  opt->add_option("--checkpoint", ckpt, "cINN checkpoint")->required();
  opt->add_option("--mnist", mnist_dir, "Directory with the MNIST IDX files")->required();
  opt->add_option("--count", eval_count, "Test images to rank");
  opt->add_option("--worst-k", lopts.worst_k, "Samples to optimize");
  opt->add_option("--steps", lopts.steps, "Ascent steps");
  opt->add_option("--rate", lopts.rate, "Initial step rate");
  opt->add_option("-o,--out", opt_out, "CSV path")->required();

  // scan-likelihood
  auto* scan = app.add_subcommand("scan-likelihood", "Log-determinant vs MSE scatter data");
  fs::path scan_out, random_path;
  std::size_t random_count = 1000;
  scan->add_option("--checkpoint", ckpt, "cINN checkpoint")->required();
  scan->add_option("--mnist", mnist_dir, "Directory with the MNIST IDX files")->required();
  scan->add_option("--count", eval_count, "MNIST test images");
  scan->add_option("--random", random_path, "PFDS file with random samples");
  scan->add_option("--random-count", random_count, "Random samples");
  scan->add_option("-o,--out", scan_out, "CSV path")->required();

  // render
  auto* render = app.add_subcommand("render", "Render a stimulus to a PGM percept");
  std::size_t r_res = 28, r_index = 0;
  std::uint64_t r_seed = 0;
  fs::path r_stim, r_out;
  render->add_option("--res", r_res, "Resolution (9 or 28)");
  render->add_option("--stimulus", r_stim, "Text file with 81 amplitudes (row-major)");
  render->add_option("--seed", r_seed, "Master seed for a random stimulus");
  render->add_option("--index", r_index, "Sample index for a random stimulus");
  render->add_option("-o,--out", r_out, "PGM path")->required();

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) omp_set_num_threads(threads);
  log::set_level(quiet ? log::Level::kQuiet : (verbose ? log::Level::kDebug : log::Level::kInfo));

  try {
    if (*gen) {
      check_res(gen_res);
      const double norm = data::gen_pairs_to_file(gen_out, gen_count, pipeline::geometry_for(gen_res), gen_seed);
      log::info("wrote ", gen_count, " pairs to ", gen_out.string(), " (normalization ", norm, ")");
    } else if (*train) {
      pipeline::ExperimentConfig cfg;
      if (!config_path.empty()) cfg = pipeline::load_config(config_path);
      if (!model.empty()) cfg.model = pipeline::parse_model(model);
      if (res) cfg.resolution = res;
      if (!dataset.empty()) cfg.dataset = dataset;
      if (count) cfg.dataset_size = count;
      if (epochs) cfg.epochs = epochs;
      if (batch) cfg.batch = batch;
      if (max_steps) cfg.max_steps = max_steps;
      if (lr > 0.0) cfg.lr = lr;
      if (*seed_opt) cfg.seed = seed;
      if (!output.empty()) cfg.output_dir = output;
      if (swap) cfg.swap_direction = true;
      cfg.verbose = cfg.verbose || !quiet;
      cfg.validate();
      const auto ds = pipeline::obtain_dataset(cfg, pipeline::geometry_for(cfg.resolution));
      const auto r = pipeline::train_model(cfg, ds);
      log::info("checkpoint ", r.checkpoint.string());
    } else if (*tcls) {
      check_res(cls_res);
      metrics::ClassifierTraining t;
      t.epochs = cls_epochs;
      t.seed = cls_seed;
      t.verbose = !quiet;
      const auto c = metrics::train_classifier(mnist_split(mnist_dir, true, cls_res, 0), t);
      log::info("test accuracy ", c.accuracy(mnist_split(mnist_dir, false, cls_res, 0)));
      Checkpoint ck;
      c.save(ck);
      ck.save(cls_out);
    } else if (*eval) {
      auto enc = pipeline::Encoder::load(ckpt);
      const auto cls = metrics::Classifier::load(Checkpoint::load(classifier_path));
      const auto targets = mnist_split(mnist_dir, false, enc.resolution(), eval_count);
      const auto ev = pipeline::evaluate_model(enc, targets, cls, eval_out / "triptychs");
      metrics::write_table_csv(eval_out / "table.csv", {{pipeline::model_name(enc.kind()), enc.resolution(), ev.report}});
      metrics::write_per_sample_csv(eval_out / "per_sample.csv", ev.report);
      std::cout << pipeline::model_name(enc.kind()) << ' ' << enc.resolution() << "x" << enc.resolution()
                << " mae " << ev.report.mae << " mse " << ev.report.mse << " ssim " << ev.report.ssim << " psnr "
                << ev.report.psnr_db << " acc " << ev.report.acc << '\n';
    } else if (*opt) {
      auto enc = pipeline::Encoder::load(ckpt);
      const auto targets = mnist_split(mnist_dir, false, enc.resolution(), eval_count);
      const auto results = pipeline::optimize_latent(enc, targets, lopts);
      pipeline::write_latent_csv(opt_out, results);
      std::size_t improved = 0;
      for (const auto& r : results) improved += r.new_mse < r.old_mse;
      std::cout << improved << '/' << results.size() << " samples improved\n";
    } else if (*scan) {
      auto enc = pipeline::Encoder::load(ckpt);
      const auto targets = mnist_split(mnist_dir, false, enc.resolution(), eval_count);
      std::optional<data::PairDataset> random;
      if (!random_path.empty()) random = data::load_dataset(random_path, enc.geometry());
      const auto rows = pipeline::likelihood_mse_scan(enc, targets, random ? &*random : nullptr, random_count);
      pipeline::write_scan_csv(scan_out, rows);
      std::vector<double> ld, mse;
      for (const auto& r : rows)
        if (r.type == "mnist") ld.push_back(r.logdet), mse.push_back(r.mse);
      if (ld.size() >= 2) std::cout << "spearman(logdet, mse) on mnist: " << pipeline::spearman(ld, mse) << '\n';
    } else if (*render) {
      check_res(r_res);
      std::vector<float> stim;
      if (!r_stim.empty()) {
        std::ifstream is(r_stim);
        if (!is) throw FormatError("cannot open " + r_stim.string());
        stim.assign(std::istream_iterator<float>(is), std::istream_iterator<float>());
        if (stim.size() != phosim::kElectrodes) {
          throw ShapeError(r_stim.string() + " holds " + std::to_string(stim.size()) + " amplitudes, expected 81");
        }
      } else {
        stim = data::sample_stimulus(r_seed, r_index);
      }
      const auto geo = pipeline::geometry_for(r_res);
      const phosim::EffectTable<double> table(geo);
      const auto percept = table.render(std::vector<double>(stim.begin(), stim.end()));
      write_pgm(r_out, percept, r_res, r_res);
      log::info("wrote ", r_out.string());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

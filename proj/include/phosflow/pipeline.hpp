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

#ifndef PHOSFLOW_PIPELINE_HPP
#define PHOSFLOW_PIPELINE_HPP

// Training and evaluation orchestration for all five encoders.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "phosflow/baselines.hpp"
#include "phosflow/data.hpp"
#include "phosflow/flows.hpp"
#include "phosflow/losses.hpp"
#include "phosflow/metrics.hpp"
#include "phosflow/phosim.hpp"

namespace phosflow::pipeline {

enum class ModelKind { kDown = 0, kLinear = 1, kNN = 2, kINN = 3, kCINN = 4 };

std::string model_name(ModelKind kind);
ModelKind parse_model(const std::string& name);

struct ExperimentConfig {
  ModelKind model = ModelKind::kCINN;
  std::size_t resolution = 28;
  std::string dataset;             // PFDS path; empty: generate in memory
  std::size_t dataset_size = 100000;
  std::uint64_t seed = 0;
  std::size_t batch = 1024;
  std::size_t epochs = 20;
  std::size_t max_steps = 0;       // > 0 overrides epochs
  double lr = 1e-3;
  std::size_t flow_layers = 9;
  std::size_t flow_hidden = 512;
  double clamp = 2.0;
  std::vector<double> kernel_widths{0.1, 0.5, 2.0};
  double mmd_weight = 1.0;
  bool swap_direction = false;     // INN only: stimulus -> percept as the forward map
  std::size_t latent_steps = 200;
  double latent_rate = 0.05;
  std::size_t worst_k = 50;
  std::size_t eval_count = 1000;
  std::string output_dir = "runs";
  bool verbose = false;

  void validate() const;
  /// Output directory, prefixed by $PHOSFLOW_OUTPUT_ROOT when relative.
  std::filesystem::path output_root() const;
  /// Run directory for this model and resolution under output_root().
  std::filesystem::path run_dir() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

phosim::AxonMapGeometry geometry_for(std::size_t resolution);

/// Loads cfg.dataset (checked against the geometry) or generates it.
data::PairDataset obtain_dataset(const ExperimentConfig& cfg, const phosim::AxonMapGeometry& geo);

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<double> losses;
};

TrainResult train_cinn(const ExperimentConfig& cfg, const data::PairDataset& ds);
TrainResult train_inn_mmd(const ExperimentConfig& cfg, const data::PairDataset& ds);
TrainResult train_baseline(const ExperimentConfig& cfg, const data::PairDataset& ds);
TrainResult train_model(const ExperimentConfig& cfg, const data::PairDataset& ds);

flows::FlowConfig cinn_config(const ExperimentConfig& cfg);
flows::FlowConfig inn_config(const ExperimentConfig& cfg);

/// Any trained encoder, restored from its checkpoint.
class Encoder {
 public:
  static Encoder load(const Checkpoint& ck);
  static Encoder load(const std::filesystem::path& path) { return load(Checkpoint::load(path)); }

  ModelKind kind() const noexcept { return kind_; }
  std::size_t resolution() const noexcept { return resolution_; }
  double normalization() const noexcept { return normalization_; }
  const phosim::AxonMapGeometry& geometry() const { return geometry_; }
  bool swapped() const noexcept { return swapped_; }
  const flows::FlowModel<float>& flow() const;

  /// Targets (or normalized percepts) [count, res*res] -> stimuli [count, 81].
  std::vector<float> encode(std::span<const float> targets, std::size_t count);

  void save(Checkpoint& ck) const;

  using Model = std::variant<double, baselines::LinearBaseline, baselines::NNBaseline, flows::FlowModel<float>>;
  Encoder(ModelKind kind, std::size_t resolution, double normalization, const phosim::AxonMapGeometry& geo, Model model,
          bool swapped = false);

 private:
  ModelKind kind_;
  std::size_t resolution_;
  double normalization_;
  phosim::AxonMapGeometry geometry_;
  Model model_;
  bool swapped_ = false;
};

/// Renders stimuli and maps them to the target scale: percept / norm clipped to [0, 1].
std::vector<float> render_percepts(std::span<const float> stimuli, std::size_t count, const phosim::EffectTable<float>& table,
                                   double normalization);

struct Evaluation {
  metrics::MetricReport report;
  std::vector<float> stimuli;
  std::vector<float> percepts;
};

/// Encodes, renders and scores the targets; writes up to `triptychs`
/// (target, stimulus, percept) PGMs into `artifacts` when it is non-empty.
Evaluation evaluate_model(Encoder& encoder, const data::LabeledImageSet& targets, const metrics::Classifier& classifier,
                          const std::filesystem::path& artifacts = {}, std::size_t triptychs = 16);

/// Held-out MSE between predicted and true stimuli, feeding normalized percepts.
double heldout_stimulus_mse(Encoder& encoder, const data::PairDataset& ds);

struct LatentStatistics {
  std::vector<double> mean;
  std::vector<double> variance;
};
LatentStatistics latent_statistics(const flows::FlowModel<float>& cinn, const data::PairDataset& ds);

struct LatentResult {
  std::size_t index = 0;
  double old_mse = 0.0;
  double new_mse = 0.0;
  std::vector<double> loglik;  // accepted-step trace, starting at z = 0
  bool aborted = false;
};

struct LatentOptions {
  std::size_t worst_k = 50;
  std::size_t steps = 200;
  double rate = 0.05;
  std::size_t max_halvings = 30;
};

/// Log-likelihood of the stimulus generated from z under the condition:
/// log N(z) plus the forward log-determinant.
double generated_loglik(const flows::FlowModel<float>& cinn, std::span<const float> z, std::span<const float> condition);

/// Likelihood ascent on z for the worst_k targets by z = 0 MSE.
std::vector<LatentResult> optimize_latent(Encoder& encoder, const data::LabeledImageSet& targets,
                                          const LatentOptions& opts);
void write_latent_csv(const std::filesystem::path& path, const std::vector<LatentResult>& results);

struct ScanRow {
  std::string type;  // "mnist" or "random"
  std::size_t index = 0;
  double logdet = 0.0;
  double mse = 0.0;
};

/// z = 0 forward log-determinant and the resulting MSE for each sample.
std::vector<ScanRow> likelihood_mse_scan(Encoder& encoder, const data::LabeledImageSet& mnist,
                                         const data::PairDataset* random, std::size_t random_count);
void write_scan_csv(const std::filesystem::path& path, const std::vector<ScanRow>& rows);

double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace phosflow::pipeline

#endif  // PHOSFLOW_PIPELINE_HPP

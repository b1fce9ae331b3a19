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

#ifndef PHOSFLOW_METRICS_HPP
#define PHOSFLOW_METRICS_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "phosflow/checkpoint.hpp"
#include "phosflow/data.hpp"
#include "phosflow/nn.hpp"

namespace phosflow::metrics {

inline constexpr double kPsnrCap = 100.0;

/// Mean SSIM over all fully contained 7x7 windows, Gaussian weights
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, data range 1.
double ssim(std::span<const float> a, std::span<const float> b, std::size_t height, std::size_t width);
double psnr(std::span<const float> a, std::span<const float> b);
double mse(std::span<const float> a, std::span<const float> b);
double mae(std::span<const float> a, std::span<const float> b);

/// Two conv(3x3)+ELU stages (16 and 32 channels, each followed by 2x2
/// average pooling at 28x28), then 128 hidden units and 10 logits.
class Classifier {
 public:
  Classifier() = default;
  Classifier(std::size_t side, std::uint64_t seed);

  std::size_t side() const noexcept { return side_; }
  ad::Tensor<float> logits(const ad::Tensor<float>& images) const;  // [B, side*side] -> [B, 10]
  std::vector<std::uint8_t> predict(std::span<const float> images, std::size_t count) const;
  double accuracy(const data::LabeledImageSet& set) const;

  nn::ParameterList<float> parameters() const;
  void save(Checkpoint& ck) const;
  static Classifier load(const Checkpoint& ck);

 private:
  std::size_t side_ = 0;
  nn::Conv3x3<float> conv1_, conv2_;
  nn::Linear<float> fc1_, fc2_;
};

struct ClassifierTraining {
  std::size_t epochs = 4;
  std::size_t batch = 128;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool verbose = false;
};

Classifier train_classifier(const data::LabeledImageSet& train, const ClassifierTraining& opts);

struct MetricReport {
  double mae = 0.0;
  double mse = 0.0;
  double ssim = 0.0;
  double psnr_db = 0.0;
  double acc = 0.0;
  std::size_t count = 0;
  std::vector<double> per_mae, per_mse, per_ssim, per_psnr;
  std::vector<std::uint8_t> predicted;
  std::vector<std::uint8_t> correct;
};

/// percepts and targets are [count, height * width] on a [0, 1] scale.
MetricReport evaluate(std::span<const float> percepts, std::span<const float> targets,
                      std::span<const std::uint8_t> labels, std::size_t height, std::size_t width,
                      const Classifier& classifier);

struct TableRow {
  std::string model;
  std::size_t resolution = 0;
  MetricReport report;
};

/// One row per model and resolution, columns as in the paper's table.
void write_table_csv(const std::filesystem::path& path, const std::vector<TableRow>& rows);
void write_per_sample_csv(const std::filesystem::path& path, const MetricReport& report);

}  // namespace phosflow::metrics

#endif  // PHOSFLOW_METRICS_HPP

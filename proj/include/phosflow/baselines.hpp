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

#ifndef PHOSFLOW_BASELINES_HPP
#define PHOSFLOW_BASELINES_HPP

// Non-flow encoders mapping an image (percept or target) to a 9x9 stimulus.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "phosflow/checkpoint.hpp"
#include "phosflow/nn.hpp"
#include "phosflow/phosim.hpp"

namespace phosflow::baselines {

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch = 1024;
  std::size_t max_steps = 0;  // 0: run all epochs
  double lr = 1e-3;
  double lr_final = 0.0;      // > 0: geometric decay from lr to lr_final
  std::uint64_t seed = 0;
  bool verbose = false;
  std::function<void(std::size_t step, double loss)> on_step;
};

/// Rows of `inputs` (scaled by `input_scale`) regress onto rows of `targets`.
struct RegressionData {
  std::span<const float> inputs;
  std::size_t in_width = 0;
  float input_scale = 1.0f;
  std::span<const float> targets;  // [count, 81]
  std::size_t count = 0;
};

/// Effect-table render as a differentiable map: stimuli [B, 81] ->
/// normalized percepts [B, pixels] via matmul, per-pixel max and clamp.
class DifferentiableRenderer {
 public:
  DifferentiableRenderer(const phosim::AxonMapGeometry& geo, double normalization);
  ad::Tensor<float> operator()(const ad::Tensor<float>& stimuli) const;
  std::size_t pixels() const noexcept { return pixels_; }

 private:
  ad::Tensor<float> table_t_;  // [81, pixels * segments]
  std::size_t pixels_ = 0;
  std::size_t segments_ = 0;
  float inv_norm_ = 1.0f;
};

/// Area resize to 9x9 times the gain; images are [count, side * side].
std::vector<float> encode_down(std::span<const float> images, std::size_t count, std::size_t side, double gain);

/// Fits the gain by gradient descent on the rendered-percept MSE, using the
/// dataset's normalized percepts as targets.
double fit_down_gain(const RegressionData& data, std::size_t side, const DifferentiableRenderer& render,
                     const TrainOptions& opts);

class LinearBaseline {
 public:
  LinearBaseline() = default;
  LinearBaseline(std::size_t in_width, std::uint64_t seed);

  ad::Tensor<float> forward(const ad::Tensor<float>& x) const { return layer_(x); }
  std::vector<float> encode(std::span<const float> images, std::size_t count) const;
  std::size_t in_width() const { return layer_.in_features(); }
  std::size_t weight_count() const { return layer_.weight.size(); }
  nn::ParameterList<float> parameters() const;
  void save(Checkpoint& ck) const;
  static LinearBaseline load(const Checkpoint& ck);

 private:
  nn::Linear<float> layer_;
};

class NNBaseline {
 public:
  NNBaseline() = default;
  NNBaseline(std::size_t in_width, std::uint64_t seed);

  ad::Tensor<float> forward(const ad::Tensor<float>& x, bool training);
  std::vector<float> encode(std::span<const float> images, std::size_t count);
  std::size_t in_width() const { return input_.in_features(); }
  nn::ParameterList<float> parameters() const;
  void save(Checkpoint& ck) const;
  static NNBaseline load(const Checkpoint& ck);

 private:
  nn::Linear<float> input_;
  nn::Conv3x3<float> conv1_, conv2_, conv3_;
  nn::BatchNorm<float> bn1_, bn2_, bn3_;
  nn::Linear<float> output_;
};

LinearBaseline train_linear(const RegressionData& data, const TrainOptions& opts);
NNBaseline train_nn(const RegressionData& data, const TrainOptions& opts);

/// Shared minibatch loop: `loss(batch_inputs, batch_targets)` per step.
/// Returns the per-step loss trace.
std::vector<double> run_regression(const RegressionData& data, const TrainOptions& opts,
                                   const std::vector<ad::Tensor<float>>& params,
                                   const std::function<ad::Tensor<float>(const ad::Tensor<float>&,
                                                                         const ad::Tensor<float>&)>& loss);

}  // namespace phosflow::baselines

#endif  // PHOSFLOW_BASELINES_HPP

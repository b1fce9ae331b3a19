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

#ifndef PHOSFLOW_FLOWS_HPP
#define PHOSFLOW_FLOWS_HPP

// Invertible networks built from Glow-style affine coupling blocks.
//
// Each layer applies a fixed random permutation, a two-sided coupling block
// and an activation normalization. Splitting x = [x_a, x_b] (x_a takes the
// extra element for odd widths), one coupling computes
//
//   y_b = x_b * exp(c(s2)) + t2,   (s2, t2) = subnet2([x_a, cond])
//   y_a = x_a * exp(c(s1)) + t1,   (s1, t1) = subnet1([y_b, cond])
//
// with the soft clamp c(s) = alpha * 2/pi * atan(s / alpha). The per-sample
// log-determinant is the sum of all clamped log-scales plus the actnorm
// log-scales. A conditional model first maps the raw condition through a
// learnable affine projection and feeds the result to every subnet.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "phosflow/autodiff.hpp"
#include "phosflow/checkpoint.hpp"
#include "phosflow/nn.hpp"

namespace phosflow::flows {

struct FlowConfig {
  std::size_t dim = 81;              // total width D
  std::size_t out_dim = 81;          // leading outputs treated as y; K = dim - out_dim
  std::size_t layers = 9;
  std::size_t hidden = 512;
  double clamp = 2.0;
  std::size_t condition_input = 0;   // raw condition width; 0 = unconditional
  std::size_t condition_width = 81;  // projected condition width
  std::uint64_t seed = 0;

  bool conditional() const { return condition_input > 0; }
  std::size_t latent_dim() const { return dim - out_dim; }
};

template <typename T>
struct FlowResult {
  ad::Tensor<T> value;   // [B, D]
  ad::Tensor<T> logdet;  // [B]
};

/// Two ReLU-separated affine layers; output holds (s, t) side by side.
template <typename T>
struct Subnet {
  nn::Linear<T> hidden;
  nn::Linear<T> out;

  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const { return out(ad::relu(hidden(x))); }
};

template <typename T>
struct CouplingBlock {
  std::size_t len_a = 0;
  std::size_t len_b = 0;
  Subnet<T> subnet1;  // input [y_b | cond] -> scale/shift for the a side
  Subnet<T> subnet2;  // input [x_a | cond] -> scale/shift for the b side
  std::string name;   // used in numeric error messages
};

template <typename T>
CouplingBlock<T> make_coupling(std::size_t dim, std::size_t hidden, std::size_t cond_width, Rng& rng,
                               double out_scale);

/// `condition` is the projected condition or an undefined tensor.
template <typename T>
FlowResult<T> coupling_forward(const ad::Tensor<T>& x, const CouplingBlock<T>& block, double clamp,
                               const ad::Tensor<T>& condition);
template <typename T>
FlowResult<T> coupling_inverse(const ad::Tensor<T>& y, const CouplingBlock<T>& block, double clamp,
                               const ad::Tensor<T>& condition);

/// Appends zero columns up to `dim`; d_in > dim is a ContractError.
template <typename T>
ad::Tensor<T> pad_to_dim(const ad::Tensor<T>& x, std::size_t dim);
template <typename T>
ad::Tensor<T> truncate_to_dim(const ad::Tensor<T>& x, std::size_t dim);

template <typename T>
class FlowModel {
 public:
  explicit FlowModel(const FlowConfig& config);

  const FlowConfig& config() const noexcept { return config_; }

  FlowResult<T> forward(const ad::Tensor<T>& x, const ad::Tensor<T>& condition = {}) const;
  /// Returns the preimage and the log-determinant of the inverse map.
  FlowResult<T> inverse(const ad::Tensor<T>& y, const ad::Tensor<T>& condition = {}) const;

  /// Data-dependent actnorm initialization: standardizes every layer's output
  /// over `batch` (at least two samples).
  void actnorm_init(const ad::Tensor<T>& batch, const ad::Tensor<T>& condition = {});
  bool actnorm_initialized() const noexcept { return actnorm_ready_; }

  nn::ParameterList<T> parameters() const;
  std::size_t parameter_count() const { return parameters().scalar_count(); }
  std::span<const std::size_t> permutation(std::size_t layer) const { return layers_.at(layer).perm; }

  /// Overwrites every parameter with random values of the given magnitude.
  void randomize(std::uint64_t seed, double scale);

  void save(Checkpoint& ck, const std::string& prefix = "flow") const;
  static FlowModel load(const Checkpoint& ck, const std::string& prefix = "flow");

 private:
  struct Layer {
    std::vector<std::size_t> perm;
    std::vector<std::size_t> inverse_perm;
    CouplingBlock<T> coupling;
    ad::Tensor<T> actnorm_bias;       // [D]
    ad::Tensor<T> actnorm_log_scale;  // [D]
  };

  ad::Tensor<T> project_condition(const ad::Tensor<T>& condition, std::size_t batch) const;

  FlowConfig config_;
  std::vector<Layer> layers_;
  nn::Linear<T> condition_projection_;
  bool actnorm_ready_ = false;
};

}  // namespace phosflow::flows

#endif  // PHOSFLOW_FLOWS_HPP

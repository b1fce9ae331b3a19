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

#ifndef PHOSFLOW_OPTIM_HPP
#define PHOSFLOW_OPTIM_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "phosflow/autodiff.hpp"

namespace phosflow {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t t = 0;
};

/// One bias-corrected Adam update of `params` in place.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const AdamOptions& opt);

/// Adam over a fixed list of leaf tensors. Parameters that received no
/// gradient in a step are left untouched (their moments do not decay).
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<ad::Tensor<T>> params, AdamOptions options = {});

  void step();
  void zero_grad();
  void set_lr(double lr) { options_.lr = lr; }
  const AdamOptions& options() const { return options_; }

 private:
  std::vector<ad::Tensor<T>> params_;
  std::vector<AdamState<T>> states_;
  AdamOptions options_;
};

}  // namespace phosflow

#endif  // PHOSFLOW_OPTIM_HPP

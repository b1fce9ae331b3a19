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

#ifndef PHOSFLOW_LOSSES_HPP
#define PHOSFLOW_LOSSES_HPP

#include <vector>

#include "phosflow/autodiff.hpp"

namespace phosflow::losses {

/// Widths of the inverse multiquadric kernels k(u, v) = 1 / (1 + |u - v|^2 / s^2).
struct KernelBank {
  std::vector<double> widths{0.1, 0.5, 2.0};

  void validate() const;
};

/// Mean over the batch of n/2 log(2 pi) + |z|^2 / 2 - logdet.
template <typename T>
ad::Tensor<T> nll(const ad::Tensor<T>& z, const ad::Tensor<T>& logdet);

template <typename T>
ad::Tensor<T> mse(const ad::Tensor<T>& a, const ad::Tensor<T>& b);

/// Square root of the V-statistic estimate with the bank-averaged kernel.
/// A non-positive estimate returns a constant zero.
template <typename T>
ad::Tensor<T> mmd(const ad::Tensor<T>& a, const ad::Tensor<T>& b, const KernelBank& bank = {});

/// Squared estimate before clamping; used by permutation tests.
double mmd_estimate(const ad::Tensor<double>& a, const ad::Tensor<double>& b, const KernelBank& bank = {});

}  // namespace phosflow::losses

#endif  // PHOSFLOW_LOSSES_HPP

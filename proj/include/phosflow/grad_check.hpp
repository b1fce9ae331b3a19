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

#ifndef PHOSFLOW_GRAD_CHECK_HPP
#define PHOSFLOW_GRAD_CHECK_HPP

#include <functional>

#include "phosflow/autodiff.hpp"

namespace phosflow {

using ScalarFunction = std::function<ad::Tensor<double>(const ad::Tensor<double>&)>;

/// Max over elements of |analytic - central difference| / (|central difference| + 1e-12),
/// with the fourth-order central stencil.
/// `f` must return a single-element tensor, otherwise ContractError.
double grad_check(const ScalarFunction& f, const Array<double>& x, double eps = 1e-3);

}  // namespace phosflow

#endif  // PHOSFLOW_GRAD_CHECK_HPP

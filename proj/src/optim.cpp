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

#include "phosflow/optim.hpp"

#include <cmath>
#include <string>

#include "phosflow/grad_check.hpp"

namespace phosflow {

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const AdamOptions& opt) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params vs " + std::to_string(grads.size()) +
                     " grads");
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
    state.t = 0;
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T step = static_cast<T>(opt.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(opt.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    params[i] -= step * state.m[i] / (std::sqrt(state.v[i] * inv_c2) + eps);
  }
}

template <typename T>
Adam<T>::Adam(std::vector<ad::Tensor<T>> params, AdamOptions options)
    : params_(std::move(params)), states_(params_.size()), options_(options) {}

template <typename T>
void Adam<T>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Array<T>* g = params_[i].grad();
    if (!g) continue;
    adam_step<T>(params_[i].mutable_value().values(), g->values(), states_[i], options_);
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState<float>&, const AdamOptions&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState<double>&, const AdamOptions&);
template class Adam<float>;
template class Adam<double>;

double grad_check(const ScalarFunction& f, const Array<double>& x, double eps) {
  Array<double> analytic(x.shape(), 0.0);
  {
    ad::GradientTape<double> tape;
    auto xt = ad::Tensor<double>::parameter(x);
    auto y = f(xt);
    if (!y.defined() || y.size() != 1) {
      throw ContractError("grad_check: function output has shape " +
                          (y.defined() ? shape_str(y.shape()) : std::string("undefined")) + ", expected a scalar");
    }
    tape.backward(y);
    if (const auto* g = xt.grad()) analytic = *g;
  }
  ad::NoGrad<double> off;
  double worst = 0.0;
  Array<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = probe[i];
    auto at = [&](double h) {
      probe[i] = x0 + h;
      return f(ad::Tensor<double>(probe)).item();
    };
    // Fourth-order central stencil.
    const double numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
    probe[i] = x0;
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-12));
  }
  return worst;
}

}  // namespace phosflow

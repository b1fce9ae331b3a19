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

#include "phosflow/losses.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "phosflow/errors.hpp"

namespace phosflow::losses {
namespace {

template <typename T>
void require_finite(const ad::Tensor<T>& t, const char* what) {
  for (T v : t.value().values()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
  }
}

template <typename T>
ad::Tensor<T> mean_kernel(const ad::Tensor<T>& a, const ad::Tensor<T>& b, const KernelBank& bank) {
  const auto d2 = ad::pairwise_sqdist(a, b);
  const auto one = ad::Tensor<T>::scalar(T(1));
  ad::Tensor<T> acc;
  for (double w : bank.widths) {
    auto k = ad::div(one, ad::add_scalar(ad::mul_scalar(d2, static_cast<T>(1.0 / (w * w))), T(1)));
    acc = acc.defined() ? ad::add(acc, k) : k;
  }
  return ad::mul_scalar(ad::mean(acc), static_cast<T>(1.0 / static_cast<double>(bank.widths.size())));
}

template <typename T>
ad::Tensor<T> estimate(const ad::Tensor<T>& a, const ad::Tensor<T>& b, const KernelBank& bank) {
  bank.validate();
  if (a.shape().size() != 2 || a.shape() != b.shape()) {
    throw ShapeError("mmd: sample sets " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  if (a.dim(0) < 2) throw ContractError("mmd needs at least two samples per set");
  return ad::add(ad::sub(mean_kernel(a, a, bank), ad::mul_scalar(mean_kernel(a, b, bank), T(2))),
                 mean_kernel(b, b, bank));
}

}  // namespace

void KernelBank::validate() const {
  if (widths.empty()) throw ParameterError("kernel bank is empty");
  for (double w : widths) {
    if (!(w > 0.0)) throw ParameterError("kernel width must be positive, got " + std::to_string(w));
  }
}

template <typename T>
ad::Tensor<T> nll(const ad::Tensor<T>& z, const ad::Tensor<T>& logdet) {
  if (z.shape().size() != 2 || logdet.shape() != Shape{z.dim(0)}) {
    throw ShapeError("nll: z " + shape_str(z.shape()) + " and logdet " + shape_str(logdet.shape()) + " do not align");
  }
  require_finite(z, "latent in nll");
  require_finite(logdet, "log-determinant in nll");
  const double n = static_cast<double>(z.dim(1));
  auto per = ad::sub(ad::mul_scalar(ad::sum_axis(ad::square(z), 1), T(0.5)), logdet);
  return ad::add_scalar(ad::mean(per), static_cast<T>(0.5 * n * std::log(2.0 * std::numbers::pi)));
}

template <typename T>
ad::Tensor<T> mse(const ad::Tensor<T>& a, const ad::Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  return ad::mean(ad::square(ad::sub(a, b)));
}

template <typename T>
ad::Tensor<T> mmd(const ad::Tensor<T>& a, const ad::Tensor<T>& b, const KernelBank& bank) {
  auto est = estimate(a, b, bank);
  if (!(est.item() > T(0))) return ad::Tensor<T>::scalar(T(0));
  return ad::sqrt(est);
}

double mmd_estimate(const ad::Tensor<double>& a, const ad::Tensor<double>& b, const KernelBank& bank) {
  ad::NoGrad<double> guard;
  return estimate(a, b, bank).item();
}

template ad::Tensor<float> nll(const ad::Tensor<float>&, const ad::Tensor<float>&);
template ad::Tensor<double> nll(const ad::Tensor<double>&, const ad::Tensor<double>&);
template ad::Tensor<float> mse(const ad::Tensor<float>&, const ad::Tensor<float>&);
template ad::Tensor<double> mse(const ad::Tensor<double>&, const ad::Tensor<double>&);
template ad::Tensor<float> mmd(const ad::Tensor<float>&, const ad::Tensor<float>&, const KernelBank&);
template ad::Tensor<double> mmd(const ad::Tensor<double>&, const ad::Tensor<double>&, const KernelBank&);

}  // namespace phosflow::losses

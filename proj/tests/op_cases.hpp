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

#ifndef PHOSFLOW_TESTS_OP_CASES_HPP
#define PHOSFLOW_TESTS_OP_CASES_HPP

// Per-op gradient cases shared by the unit suite and the acceptance run.

#include <functional>
#include <string>
#include <vector>

#include "phosflow/autodiff.hpp"
#include "phosflow/grad_check.hpp"
#include "support.hpp"

namespace phosflow::testing {

using ad::Tensor;

using Op = std::function<Tensor<double>(const Tensor<double>&)>;

// Weighted sum of op(x) against fixed random weights, so every output
// element carries a distinct gradient.
inline double check_op(const Op& op, const Shape& shape, std::uint64_t seed, double lo, double hi, double eps) {
  const auto x = random_array(shape, seed, lo, hi);
  Shape out_shape;
  {
    ad::NoGrad<double> off;
    out_shape = op(Tensor<double>(x)).shape();
  }
  const Tensor<double> w(random_array(out_shape, seed + 7777, 0.5, 1.5));
  return grad_check([&](const Tensor<double>& t) { return ad::sum(ad::mul(op(t), w)); }, x, eps);
}

struct Case {
  std::string name;
  Op op;
  Shape shape;
  double lo = -1.0;
  double hi = 1.0;
  double eps = 1e-3;  // kinked ops use a smaller step
};

inline std::vector<Case> op_cases() {
  const Tensor<double> c34(random_array({3, 4}, 11));
  const Tensor<double> c4(random_array({4}, 12));
  const Tensor<double> pos34(random_array({3, 4}, 13, 0.5, 2.0));
  const Tensor<double> m45(random_array({4, 5}, 14));
  const Tensor<double> m23(random_array({2, 3}, 15));
  const Tensor<double> img(random_array({2, 3, 4, 4}, 16));
  const Tensor<double> kern(random_array({5, 3, 3, 3}, 17, -0.3, 0.3));
  const Tensor<double> kb(random_array({5}, 18));
  const Tensor<double> pts(random_array({6, 4}, 19));
  const Tensor<double> g3(random_array({3}, 20, 0.5, 1.5));
  const Tensor<double> b3(random_array({3}, 21));
  const std::vector<std::size_t> idx{3, 0, 2, 1};
  return {
      {"add", [=](auto x) { return x + c34; }, {3, 4}},
      {"add broadcast rhs", [=](auto x) { return c34 + x; }, {4}},
      {"add scalar operand", [=](auto x) { return c34 + x; }, {}},
      {"sub", [=](auto x) { return c34 - x; }, {3, 4}},
      {"sub broadcast", [=](auto x) { return x - c4; }, {3, 4}},
      {"mul", [=](auto x) { return x * c34; }, {3, 4}},
      {"mul broadcast rhs", [=](auto x) { return c34 * x; }, {4}},
      {"div numerator", [=](auto x) { return x / pos34; }, {3, 4}},
      {"div denominator", [=](auto x) { return c34 / x; }, {3, 4}, 0.5, 2.0},
      {"add_scalar", [](auto x) { return ad::add_scalar(x, 2.5); }, {3, 4}},
      {"mul_scalar", [](auto x) { return ad::mul_scalar(x, -1.5); }, {3, 4}},
      {"neg", [](auto x) { return -x; }, {3, 4}},
      {"exp", [](auto x) { return ad::exp(x); }, {3, 4}},
      {"log", [](auto x) { return ad::log(x); }, {3, 4}, 0.5, 2.0},
      {"atan", [](auto x) { return ad::atan(x); }, {3, 4}, -3.0, 3.0},
      {"square", [](auto x) { return ad::square(x); }, {3, 4}},
      {"sqrt", [](auto x) { return ad::sqrt(x); }, {3, 4}, 0.5, 2.0},
      {"relu", [](auto x) { return ad::relu(x); }, {3, 4}, -1.0, 1.0, 1e-6},
      {"elu", [](auto x) { return ad::elu(x); }, {3, 4}, -1.0, 1.0, 1e-6},
      {"clamp_at_zero", [](auto x) { return ad::clamp_at_zero(x); }, {3, 4}, -1.0, 1.0, 1e-6},
      {"sum", [](auto x) { return ad::sum(x); }, {3, 4}},
      {"mean", [](auto x) { return ad::mean(x); }, {3, 4}},
      {"sum_axis 0", [](auto x) { return ad::sum_axis(x, 0); }, {2, 3, 4}},
      {"sum_axis 1", [](auto x) { return ad::sum_axis(x, 1); }, {2, 3, 4}},
      {"mean_axis 2", [](auto x) { return ad::mean_axis(x, 2); }, {2, 3, 4}},
      {"max_last", [](auto x) { return ad::max_last(x); }, {3, 5}, -1.0, 1.0, 1e-6},
      {"reshape", [](auto x) { return ad::reshape(x, {4, 3}); }, {3, 4}},
      {"slice", [](auto x) { return ad::slice(x, 1, 1, 3); }, {3, 4}},
      {"concat", [=](auto x) { return ad::concat<double>({c34, x, x}, 1); }, {3, 2}},
      {"gather_last", [=](auto x) { return ad::gather_last(x, std::span<const std::size_t>(idx)); }, {3, 4}},
      {"transpose", [](auto x) { return ad::transpose(x); }, {3, 4}},
      {"matmul lhs", [=](auto x) { return ad::matmul(x, m45); }, {3, 4}},
      {"matmul rhs", [=](auto x) { return ad::matmul(m23, x); }, {3, 4}},
      {"conv2d input", [=](auto x) { return ad::conv2d(x, kern, kb); }, {2, 3, 4, 4}},
      {"conv2d weight", [=](auto w) { return ad::conv2d(img, w, kb); }, {5, 3, 3, 3}},
      {"conv2d bias", [=](auto b) { return ad::conv2d(img, kern, b); }, {5}},
      {"avg_pool2", [](auto x) { return ad::avg_pool2(x); }, {2, 3, 4, 6}},
      {"log_softmax", [](auto x) { return ad::log_softmax(x); }, {3, 5}, -3.0, 3.0},
      {"pairwise_sqdist lhs", [=](auto x) { return ad::pairwise_sqdist(x, pts); }, {5, 4}},
      {"pairwise_sqdist rhs", [=](auto x) { return ad::pairwise_sqdist(pts, x); }, {5, 4}},
      {"batch_norm input",
       [=](auto x) {
         ad::BatchNormState<double> st{Array<double>({3}), Array<double>({3}, 1.0)};
         return ad::batch_norm(x, g3, b3, st, true);
       },
       {4, 3, 2, 2}},
      {"batch_norm gamma",
       [=](auto g) {
         ad::BatchNormState<double> st{Array<double>({3}), Array<double>({3}, 1.0)};
         return ad::batch_norm(img.detach(), g, b3, st, true);
       },
       {3}},
      {"batch_norm beta",
       [=](auto b) {
         ad::BatchNormState<double> st{Array<double>({3}), Array<double>({3}, 1.0)};
         return ad::batch_norm(img.detach(), g3, b, st, true);
       },
       {3}},
      {"batch_norm inference",
       [=](auto x) {
         ad::BatchNormState<double> st{Array<double>::from({3}, {0.1, -0.2, 0.3}), Array<double>::from({3}, {0.5, 2.0, 1.5})};
         return ad::batch_norm(x, g3, b3, st, false);
       },
       {2, 3, 2, 2}},
  };
}

}  // namespace phosflow::testing

#endif  // PHOSFLOW_TESTS_OP_CASES_HPP

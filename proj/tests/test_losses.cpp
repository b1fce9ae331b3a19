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

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "phosflow/errors.hpp"
#include "phosflow/grad_check.hpp"
#include "phosflow/losses.hpp"
#include "support.hpp"

using namespace phosflow;
using namespace phosflow::losses;
using ad::Tensor;

namespace {

Tensor<double> normal_samples(std::size_t m, std::size_t n, double shift, std::uint64_t seed) {
  Rng rng(seed);
  Array<double> a({m, n});
  for (auto& v : a.values()) v = rng.normal() + shift;
  return Tensor<double>(a);
}

}  // namespace

TEST_CASE("nll closed forms") {
  const Tensor<double> z2(Array<double>({3, 2}));
  const Tensor<double> ld(Array<double>({3}));
  CHECK(nll(z2, ld).item() == doctest::Approx(std::log(2 * std::numbers::pi)).epsilon(1e-14));
  CHECK(nll(z2, ld).item() == doctest::Approx(1.8379).epsilon(1e-4));
  const Tensor<double> z81(Array<double>({2, 81}));
  CHECK(nll(z81, Tensor<double>(Array<double>({2}))).item() == doctest::Approx(40.5 * std::log(2 * std::numbers::pi)).epsilon(1e-14));

  const Tensor<double> z(testing::random_array({4, 5}, 1));
  const auto base = nll(z, Tensor<double>(testing::random_array({4}, 2))).item();
  auto shifted = testing::random_array({4}, 2);
  for (auto& v : shifted.values()) v += 0.375;
  CHECK(base - nll(z, Tensor<double>(shifted)).item() == doctest::Approx(0.375).epsilon(1e-12));
}

TEST_CASE("nll gradient in z is z over the batch") {
  const auto z = testing::random_array({4, 3}, 3);
  const Tensor<double> ld(testing::random_array({4}, 4));
  ad::GradientTape<double> tape;
  auto zt = Tensor<double>::parameter(z);
  tape.backward(nll(zt, ld));
  for (std::size_t i = 0; i < z.size(); ++i) CHECK((*zt.grad())[i] == doctest::Approx(z[i] / 4.0).epsilon(1e-14));
  CHECK(grad_check([&](const Tensor<double>& t) { return nll(t, ld); }, z) < 1e-5);
  CHECK(grad_check([&](const Tensor<double>& t) { return nll(Tensor<double>(z), t); }, testing::random_array({4}, 5)) < 1e-5);
}

TEST_CASE("nll rejects non-finite input") {
  Array<double> z({2, 2});
  z[1] = std::nan("");
  CHECK_THROWS_AS(nll(Tensor<double>(z), Tensor<double>(Array<double>({2}))), NumericError);
}

TEST_CASE("mse values") {
  const Tensor<double> a(Array<double>::from({2}, {0, 0}));
  const Tensor<double> b(Array<double>::from({2}, {1, 1}));
  CHECK(mse(a, b).item() == 1.0);
  CHECK(mse(a, a).item() == 0.0);
  CHECK_THROWS_AS(mse(a, Tensor<double>(Array<double>({3}))), ShapeError);

  const auto x = testing::random_array({10000}, 6), y = testing::random_array({10000}, 7);
  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mean += (x[i] - y[i]) * (x[i] - y[i]);
  mean /= 10000.0;
  double corr = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) corr += (x[i] - y[i]) * (x[i] - y[i]) - mean;
  mean += corr / 10000.0;
  CHECK(std::abs(mse(Tensor<double>(x), Tensor<double>(y)).item() - mean) < 1e-7);
  const auto u = testing::random_array({4, 6}, 8, 0.5, 1.0);
  const Tensor<double> v(testing::random_array({4, 6}, 9, -1.0, 0.0));
  CHECK(grad_check([&](const Tensor<double>& t) { return mse(t, v); }, u) < 1e-5);
}

TEST_CASE("mmd basic properties") {
  const auto a = normal_samples(64, 3, 0.0, 1);
  const auto b = normal_samples(64, 3, 0.5, 2);
  const Tensor<double> a_copy(a.value());
  CHECK(mmd(a, a_copy).item() == 0.0);
  CHECK(mmd(a, b).item() > 0.0);
  CHECK(std::abs(mmd(a, b).item() - mmd(b, a).item()) < 1e-7);
  CHECK_THROWS_AS(mmd(Tensor<double>(Array<double>({1, 3})), Tensor<double>(Array<double>({1, 3}))), ContractError);
  CHECK_THROWS_AS(mmd(a, normal_samples(32, 3, 0.0, 3)), ShapeError);
  KernelBank bad;
  bad.widths = {0.5, -1.0};
  CHECK_THROWS_AS(mmd(a, b, bad), ParameterError);
}

TEST_CASE("mmd hand-computed singleton value") {
  // The V-statistic of a point repeated twice equals that of the point alone.
  const double sigma = 0.5;
  KernelBank one;
  one.widths = {sigma};
  const Tensor<double> a(Array<double>({2, 1}, 0.0));
  const Tensor<double> b(Array<double>({2, 1}, sigma));
  CHECK(mmd_estimate(a, b, one) == doctest::Approx(2.0 - 2.0 / 2.0).epsilon(1e-14));
  CHECK(mmd(a, b, one).item() == doctest::Approx(1.0).epsilon(1e-14));
  const Tensor<double> c(Array<double>({2, 1}, 2.0 * sigma));
  CHECK(mmd_estimate(a, c, one) == doctest::Approx(2.0 - 2.0 / 5.0).epsilon(1e-14));
}

TEST_CASE("mmd separates shifted gaussians") {
  const auto base = normal_samples(512, 1, 0.0, 10);
  const double same = mmd(base, normal_samples(512, 1, 0.0, 11)).item();
  const double far = mmd(base, normal_samples(512, 1, 3.0, 12)).item();
  INFO("same ", same, " far ", far);
  CHECK(far > 5.0 * same);
}

TEST_CASE("same-distribution mmd sits inside the permutation null") {
  const auto a = normal_samples(512, 2, 0.0, 20);
  const auto b = normal_samples(512, 2, 0.0, 21);
  const double observed = mmd_estimate(a, b);
  std::vector<double> pooled(a.value().storage());
  pooled.insert(pooled.end(), b.value().storage().begin(), b.value().storage().end());
  Rng rng(22);
  std::vector<double> null;
  std::vector<std::size_t> idx(1024);
  for (int rep = 0; rep < 200; ++rep) {
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
    Array<double> pa({512, 2}), pb({512, 2});
    for (std::size_t i = 0; i < 512; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        pa[i * 2 + j] = pooled[idx[i] * 2 + j];
        pb[i * 2 + j] = pooled[idx[512 + i] * 2 + j];
      }
    null.push_back(mmd_estimate(Tensor<double>(pa), Tensor<double>(pb)));
  }
  std::sort(null.begin(), null.end());
  CHECK(observed < null[189]);
}

TEST_CASE("mmd gradient") {
  const auto a = normal_samples(6, 3, 0.0, 30);
  const auto b = normal_samples(6, 3, 1.0, 31);
  CHECK(grad_check([&](const Tensor<double>& t) { return mmd(t, b); }, a.value()) < 1e-5);
  CHECK(grad_check([&](const Tensor<double>& t) { return mmd(a, t); }, b.value()) < 1e-5);
}

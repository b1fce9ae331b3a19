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

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "doctest.h"
#include "phosflow/errors.hpp"
#include "phosflow/flows.hpp"
#include "support.hpp"

using namespace phosflow;
using namespace phosflow::flows;
using ad::Tensor;

namespace {

FlowConfig config(std::size_t dim, std::size_t layers, std::size_t hidden, std::uint64_t seed,
                  std::size_t cond = 0) {
  FlowConfig c;
  c.dim = dim;
  c.out_dim = dim;
  c.layers = layers;
  c.hidden = hidden;
  c.seed = seed;
  c.condition_input = cond;
  return c;
}

// log|det| by Gaussian elimination with partial pivoting.
double log_abs_det(std::vector<double> a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (piv != c)
      for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
    const double d = a[c * n + c];
    acc += std::log(std::abs(d));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / d;
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
    }
  }
  return acc;
}

// Central-difference Jacobian of a batch-1 map R^n -> R^n.
template <typename F>
std::vector<double> numeric_jacobian(F f, const std::vector<double>& x, double eps = 1e-6) {
  const std::size_t n = x.size();
  std::vector<double> j(n * n);
  for (std::size_t c = 0; c < n; ++c) {
    auto xp = x, xm = x;
    xp[c] += eps;
    xm[c] -= eps;
    const auto fp = f(xp), fm = f(xm);
    for (std::size_t r = 0; r < n; ++r) j[r * n + c] = (fp[r] - fm[r]) / (2 * eps);
  }
  return j;
}

Tensor<double> row(const std::vector<double>& x) { return Tensor<double>(Array<double>({1, x.size()}, x)); }

template <typename T>
void zero_out_layers(FlowModel<T>& m) {
  const auto params = m.parameters();
  for (const auto& [name, t] : params.items()) {
    if (name.find(".out.") != std::string::npos) {
      auto copy = t;
      copy.mutable_value().fill(T(0));
    }
  }
}

template <typename T>
double roundtrip_error(const FlowModel<T>& m, std::size_t n, std::uint64_t seed, std::size_t cond) {
  const Tensor<T> x(testing::random_array<T>({n, m.config().dim}, seed, -2.0, 2.0));
  Tensor<T> c;
  if (cond) c = Tensor<T>(testing::random_array<T>({n, cond}, seed + 1, 0.0, 1.0));
  ad::NoGrad<T> off;
  const auto y = m.forward(x, c);
  const auto back = m.inverse(y.value, c);
  return testing::max_abs_diff(back.value.value(), x.value());
}

}  // namespace

TEST_CASE("coupling with zero subnet output is the identity") {
  Rng rng(1);
  auto blk = make_coupling<double>(7, 16, 0, rng, 0.0);
  blk.subnet1.out.bias.mutable_value().fill(0.0);
  blk.subnet2.out.bias.mutable_value().fill(0.0);
  const Tensor<double> x(testing::random_array({5, 7}, 2));
  const auto r = coupling_forward(x, blk, 2.0, {});
  CHECK(r.value.value() == x.value());
  for (double v : r.logdet.value().values()) CHECK(v == 0.0);
  CHECK(coupling_inverse(x, blk, 2.0, {}).value.value() == x.value());
}

TEST_CASE("constant log-scale on one side contributes width times the clamped value") {
  Rng rng(2);
  auto blk = make_coupling<double>(9, 16, 0, rng, 0.0);
  blk.subnet1.out.bias.mutable_value().fill(0.0);
  auto& b2 = blk.subnet2.out.bias.mutable_value();
  b2.fill(0.0);
  const double raw = 0.8, alpha = 2.0;
  for (std::size_t j = 0; j < blk.len_b; ++j) b2[j] = raw;
  const double sigma0 = alpha * 2.0 / std::numbers::pi * std::atan(raw / alpha);
  const auto r = coupling_forward(Tensor<double>(testing::random_array({3, 9}, 4)), blk, alpha, {});
  CHECK(blk.len_a == 5);
  CHECK(blk.len_b == 4);
  for (double v : r.logdet.value().values()) CHECK(v == doctest::Approx(4 * sigma0).epsilon(1e-12));
}

TEST_CASE("coupling log-determinant matches the numerical Jacobian") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto blk = make_coupling<double>(8, 32, 0, rng, 1.0);
    const auto x = testing::random_array({8}, seed + 50).storage();
    auto f = [&](const std::vector<double>& v) { return coupling_forward(row(v), blk, 2.0, {}).value.value().storage(); };
    const double num = log_abs_det(numeric_jacobian(f, x), 8);
    const double ana = coupling_forward(row(x), blk, 2.0, {}).logdet.item();
    CHECK(std::abs(ana - num) / std::abs(num) < 1e-3);
  }
}

TEST_CASE("model log-determinant matches the numerical Jacobian") {
  for (std::size_t dim : {4u, 6u, 8u}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      FlowModel<double> m(config(dim, 3, 24, seed));
      m.randomize(seed + 1000, 1.0);
      const auto x = testing::random_array({dim}, seed + 77).storage();
      auto f = [&](const std::vector<double>& v) { return m.forward(row(v)).value.value().storage(); };
      const double num = log_abs_det(numeric_jacobian(f, x), dim);
      const double ana = m.forward(row(x)).logdet.item();
      INFO("dim ", dim, " seed ", seed, " analytic ", ana, " numeric ", num);
      CHECK(std::abs(ana - num) / std::abs(num) < 1e-3);
    }
  }
}

TEST_CASE("inverse log-determinant negates the forward one") {
  FlowModel<double> m(config(10, 4, 16, 3));
  m.randomize(4, 1.0);
  const Tensor<double> x(testing::random_array({6, 10}, 5));
  const auto f = m.forward(x);
  const auto b = m.inverse(f.value);
  for (std::size_t i = 0; i < 6; ++i) CHECK(b.logdet.value()[i] == doctest::Approx(-f.logdet.value()[i]).epsilon(1e-10));
}

TEST_CASE("round trips at both precisions") {
  FlowModel<float> mf(config(81, 9, 512, 11));
  mf.randomize(12, 0.5);
  CHECK(roundtrip_error(mf, 1024, 13, 0) < 1e-4);
  FlowModel<double> md(config(81, 9, 512, 11));
  md.randomize(12, 0.5);
  CHECK(roundtrip_error(md, 1024, 13, 0) < 1e-10);

  SUBCASE("from the latent side") {
    const Tensor<float> z(testing::random_array<float>({256, 81}, 14, -2.0, 2.0));
    ad::NoGrad<float> off;
    const auto x = mf.inverse(z);
    CHECK(testing::max_abs_diff(mf.forward(x.value).value.value(), z.value()) < 1e-4);
  }
}

TEST_CASE("conditional round trip and sensitivity to the condition") {
  FlowModel<double> m(config(81, 4, 64, 21, 784));
  m.randomize(22, 1.0);
  CHECK(roundtrip_error(m, 64, 23, 784) < 1e-10);
  const Tensor<double> z(Array<double>({4, 81}, 0.3));
  const Tensor<double> c1(testing::random_array({4, 784}, 24, 0.0, 1.0));
  const Tensor<double> c2(testing::random_array({4, 784}, 25, 0.0, 1.0));
  CHECK(testing::max_abs_diff(m.inverse(z, c1).value.value(), m.inverse(z, c2).value.value()) > 1e-3);
  CHECK_THROWS_AS(m.forward(z), ContractError);
  FlowModel<double> u(config(8, 2, 8, 1));
  CHECK_THROWS_AS(u.forward(Tensor<double>(Array<double>({2, 8})), c1), ContractError);
}

TEST_CASE("untrained model is close to the composed permutation") {
  FlowModel<double> m(config(81, 9, 512, 31));
  const auto x = testing::random_array({16, 81}, 32);
  const auto y = m.forward(Tensor<double>(x));
  Array<double> p = x;
  for (std::size_t l = 0; l < 9; ++l) {
    Array<double> q(p.shape());
    const auto perm = m.permutation(l);
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 81; ++j) q[i * 81 + j] = p[i * 81 + perm[j]];
    p = q;
  }
  CHECK(testing::max_abs_diff(y.value.value(), p) < 0.05);
  for (double v : y.logdet.value().values()) CHECK(std::abs(v) < 0.1);
  CHECK(y.value.shape() == Shape{16, 81});
}

TEST_CASE("permutations are bijections") {
  FlowModel<float> m(config(81, 9, 8, 41));
  for (std::size_t l = 0; l < 9; ++l) {
    std::vector<int> seen(81, 0);
    for (auto i : m.permutation(l)) seen.at(i)++;
    for (int s : seen) CHECK(s == 1);
  }
}

TEST_CASE("actnorm data-dependent initialization") {
  SUBCASE("post-init statistics are standardized") {
    FlowModel<double> m(config(12, 3, 16, 51));
    m.randomize(52, 0.5);
    const Tensor<double> x(testing::random_array({256, 12}, 53, -3.0, 1.0));
    m.actnorm_init(x);
    CHECK(m.actnorm_initialized());
    const auto y = m.forward(x).value.value();
    for (std::size_t j = 0; j < 12; ++j) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < 256; ++i) mean += y[i * 12 + j];
      mean /= 256;
      for (std::size_t i = 0; i < 256; ++i) var += std::pow(y[i * 12 + j] - mean, 2);
      var /= 256;
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
  SUBCASE("scales follow the input spread") {
    FlowModel<double> m(config(6, 1, 8, 54));
    zero_out_layers(m);
    auto x = testing::random_array({4000, 6}, 55);
    Rng rng(56);
    for (std::size_t i = 0; i < 4000; ++i)
      for (std::size_t j = 0; j < 6; ++j) x[i * 6 + j] = (j == 2 ? 2.0 : 1.0) * rng.normal();
    m.actnorm_init(Tensor<double>(x));
    const auto perm = m.permutation(0);
    Array<double> logs;
    const auto params = m.parameters();
    for (const auto& [name, t] : params.items())
      if (name == "layer0.actnorm.log_scale") logs = t.value();
    for (std::size_t j = 0; j < 6; ++j) {
      const double expected = perm[j] == 2 ? 0.5 : 1.0;
      CHECK(std::exp(logs[j]) == doctest::Approx(expected).epsilon(0.05));
    }
  }
  SUBCASE("zero-variance dimension is floored") {
    FlowModel<double> m(config(4, 1, 8, 57));
    zero_out_layers(m);
    Array<double> x({8, 4}, 1.0);
    CHECK_NOTHROW(m.actnorm_init(Tensor<double>(x)));
    for (double v : m.forward(Tensor<double>(x)).value.value().values()) CHECK(std::isfinite(v));
  }
  SUBCASE("single-sample batch is rejected") {
    FlowModel<double> m(config(4, 1, 8, 58));
    CHECK_THROWS_AS(m.actnorm_init(Tensor<double>(Array<double>({1, 4}))), ContractError);
  }
}

TEST_CASE("padding and truncation") {
  const Tensor<double> x(testing::random_array({3, 81}, 61));
  CHECK(pad_to_dim(x, 81).value() == x.value());
  const auto p = pad_to_dim(x, 784);
  CHECK(p.shape() == Shape{3, 784});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 81; j < 784; ++j) CHECK(p.value()[i * 784 + j] == 0.0);
  CHECK(truncate_to_dim(p, 81).value() == x.value());
  CHECK_THROWS_AS(pad_to_dim(p, 81), ContractError);
}

TEST_CASE("parameter count scaling direction") {
  const auto cinn81 = FlowModel<float>(config(81, 9, 512, 1, 81)).parameter_count();
  const auto cinn784 = FlowModel<float>(config(81, 9, 512, 1, 784)).parameter_count();
  const auto inn81 = FlowModel<float>(config(81, 9, 512, 1)).parameter_count();
  const auto inn784 = FlowModel<float>(config(784, 9, 512, 1)).parameter_count();
  CHECK(double(cinn784) / double(cinn81) < 1.5);
  CHECK(double(inn784) / double(inn81) > 5.0);
  CHECK(cinn784 - cinn81 == (784 - 81) * 81);
}

TEST_CASE("checkpoint round trip reproduces the model") {
  FlowModel<float> m(config(20, 3, 16, 71, 10));
  m.randomize(72, 1.0);
  Checkpoint ck;
  m.save(ck, "enc");
  const auto back = FlowModel<float>::load(Checkpoint::from_bytes(ck.to_bytes()), "enc");
  CHECK(back.actnorm_initialized());
  for (std::size_t l = 0; l < 3; ++l) {
    const auto a = m.permutation(l), b = back.permutation(l);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  const Tensor<float> x(testing::random_array<float>({5, 20}, 73));
  const Tensor<float> c(testing::random_array<float>({5, 10}, 74));
  CHECK(m.forward(x, c).value.value() == back.forward(x, c).value.value());
}

TEST_CASE("non-finite subnet output names the layer") {
  FlowModel<double> m(config(6, 2, 8, 81));
  const auto params = m.parameters();
  for (const auto& [name, t] : params.items()) {
    if (name == "layer1.s2.out.bias") {
      auto copy = t;
      copy.mutable_value()[0] = std::nan("");
    }
  }
  try {
    (void)m.forward(Tensor<double>(Array<double>({2, 6}, 0.5)));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

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
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "phosflow/errors.hpp"
#include "phosflow/metrics.hpp"
#include "support.hpp"

using namespace phosflow;
using namespace phosflow::metrics;

namespace {

// Direct two-pass SSIM over valid 7x7 windows.
double ssim_oracle(const std::vector<float>& a, const std::vector<float>& b, int h, int w) {
  double g[7][7], tot = 0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) tot += g[i][j] = std::exp(-((i - 3) * (i - 3) + (j - 3) * (j - 3)) / 4.5);
  double acc = 0;
  int windows = 0;
  for (int i = 0; i + 7 <= h; ++i)
    for (int j = 0; j + 7 <= w; ++j) {
      double mx = 0, my = 0;
      for (int u = 0; u < 7; ++u)
        for (int v = 0; v < 7; ++v) {
          mx += g[u][v] / tot * a[(i + u) * w + j + v];
          my += g[u][v] / tot * b[(i + u) * w + j + v];
        }
      double sx = 0, sy = 0, sxy = 0;
      for (int u = 0; u < 7; ++u)
        for (int v = 0; v < 7; ++v) {
          const double dx = a[(i + u) * w + j + v] - mx, dy = b[(i + u) * w + j + v] - my;
          sx += g[u][v] / tot * dx * dx;
          sy += g[u][v] / tot * dy * dy;
          sxy += g[u][v] / tot * dx * dy;
        }
      const double c1 = 1e-4, c2 = 9e-4;
      acc += (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2));
      ++windows;
    }
  return acc / windows;
}

std::vector<float> noise(std::size_t n, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  return testing::random_array<float>({n}, seed, lo, hi).storage();
}

}  // namespace

TEST_CASE("ssim reference cases") {
  const auto x = noise(784, 1);
  CHECK(ssim(x, x, 28, 28) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<float> half(784), inv(784);
  for (int i = 0; i < 28; ++i)
    for (int j = 0; j < 28; ++j) {
      half[i * 28 + j] = j < 14 ? 0.0f : 1.0f;
      inv[i * 28 + j] = 1.0f - half[i * 28 + j];
    }
  CHECK(ssim(half, inv, 28, 28) < 0.1);

  for (std::uint64_t s = 0; s < 50; ++s) {
    const int side = s % 2 ? 9 : 28;
    const auto a = noise(side * side, 100 + s);
    auto b = a;
    const auto n = noise(side * side, 200 + s, -0.3, 0.3);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = std::clamp(b[i] + n[i], 0.0f, 1.0f);
    const double got = ssim(a, b, side, side);
    CHECK(std::abs(got - ssim_oracle(a, b, side, side)) < 1e-4);
    CHECK(std::abs(got - ssim(b, a, side, side)) < 1e-12);
  }
  CHECK_THROWS_AS(ssim(x, noise(783, 2), 28, 28), ShapeError);
}

TEST_CASE("psnr closed forms") {
  std::vector<float> a(100, 0.5f), b(100, 0.6f), c(100, 1.5f);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK(psnr(a, a) == 100.0);
  CHECK(psnr(a, c) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(mse(a, b) == doctest::Approx(0.01).epsilon(1e-5));
  CHECK(mae(a, b) == doctest::Approx(0.1).epsilon(1e-5));
}

TEST_CASE("classifier contract") {
  for (std::size_t side : {9u, 28u}) {
    Classifier c(side, 3);
    const auto img = noise(side * side * 4, 5);
    const auto p = c.predict(img, 4);
    REQUIRE(p.size() == 4);
    for (auto l : p) CHECK(l <= 9);
    Checkpoint ck;
    c.save(ck);
    CHECK(Classifier::load(Checkpoint::from_bytes(ck.to_bytes())).predict(img, 4) == p);
  }
  CHECK_THROWS_AS(Classifier(10, 1), ParameterError);
}

TEST_CASE("classifier learns a separable toy problem") {
  data::LabeledImageSet set;
  set.count = 600;
  set.height = set.width = 9;
  set.images.resize(600 * 81);
  set.labels.resize(600);
  Rng rng(8);
  for (std::size_t i = 0; i < 600; ++i) {
    const auto label = static_cast<std::uint8_t>(i % 3);
    set.labels[i] = label;
    for (std::size_t p = 0; p < 81; ++p) {
      const bool on = (label == 0 && p / 9 < 3) || (label == 1 && p % 9 < 3) || (label == 2 && p / 9 > 5);
      set.images[i * 81 + p] = static_cast<float>((on ? 0.8 : 0.1) + rng.uniform(-0.1, 0.1));
    }
  }
  ClassifierTraining opts;
  opts.epochs = 3;
  opts.batch = 32;
  const auto c = train_classifier(set, opts);
  CHECK(c.accuracy(set) > 0.95);
}

TEST_CASE("evaluate aggregates") {
  const std::size_t n = 40;
  Classifier c(9, 1);
  const auto targets = noise(n * 81, 11);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint8_t>(i % 10);

  const auto same = evaluate(targets, targets, labels, 9, 9, c);
  CHECK(same.mae == 0.0);
  CHECK(same.mse == 0.0);
  CHECK(same.ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(same.psnr_db == 100.0);
  const auto pred = c.predict(targets, n);
  double clean = 0;
  for (std::size_t i = 0; i < n; ++i) clean += pred[i] == labels[i];
  CHECK(same.acc == clean / n);

  const auto percepts = noise(n * 81, 12);
  const auto r = evaluate(percepts, targets, labels, 9, 9, c);
  CHECK(r.mse > 0.0);
  CHECK(r.count == n);
  double m = 0;
  for (double v : r.per_mse) m += v;
  CHECK(r.mse == doctest::Approx(m / n).epsilon(1e-12));

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[17]);
  std::vector<float> sp(n * 81), st(n * 81);
  std::vector<std::uint8_t> sl(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(percepts.begin() + perm[i] * 81, 81, sp.begin() + i * 81);
    std::copy_n(targets.begin() + perm[i] * 81, 81, st.begin() + i * 81);
    sl[i] = labels[perm[i]];
  }
  const auto shuffled = evaluate(sp, st, sl, 9, 9, c);
  CHECK(shuffled.mae == r.mae);
  CHECK(shuffled.mse == r.mse);
  CHECK(shuffled.ssim == r.ssim);
  CHECK(shuffled.psnr_db == r.psnr_db);
  CHECK(shuffled.acc == r.acc);

  CHECK_THROWS_AS(evaluate(std::span<const float>(percepts).first(80 * 9), targets, labels, 9, 9, c), ShapeError);
}

TEST_CASE("metric csv layout") {
  const auto dir = testing::scratch_dir("metrics_csv");
  MetricReport r;
  r.mse = 0.25;
  r.count = 2;
  r.per_mae = r.per_mse = r.per_ssim = r.per_psnr = {0.1, 0.2};
  r.predicted = {1, 2};
  r.correct = {1, 0};
  write_table_csv(dir / "t.csv", {{"cinn", 28, r}});
  write_per_sample_csv(dir / "p.csv", r);
  std::ifstream t(dir / "t.csv"), p(dir / "p.csv");
  std::string head, row;
  std::getline(t, head);
  std::getline(t, row);
  CHECK(head == "model,resolution,mae,mse,ssim,psnr_db,acc,samples");
  CHECK(row.rfind("cinn,28x28,", 0) == 0);
  int lines = 0;
  for (std::string l; std::getline(p, l);) ++lines;
  CHECK(lines == 3);
}

TEST_CASE("ssim stays in [-1, 1] and can go negative for nonnegative images") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = testing::random_array<float>({81}, seed, 0, 1).storage();
    const auto b = testing::random_array<float>({81}, seed + 100, 0, 1).storage();
    const double s = ssim(a, b, 9, 9);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
  std::vector<float> x(81), y(81);
  for (std::size_t i = 0; i < 81; ++i) {
    x[i] = static_cast<float>((i % 9 + i / 9) % 2);
    y[i] = 1.0f - x[i];
  }
  CHECK(ssim(x, y, 9, 9) < 0.0);
}

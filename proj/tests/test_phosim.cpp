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
#include <numeric>
#include <vector>

#include "doctest.h"
#include "phosflow/errors.hpp"
#include "phosflow/image.hpp"
#include "phosflow/kernels.hpp"
#include "phosflow/phosim.hpp"
#include "support.hpp"

using namespace phosflow;
using namespace phosflow::phosim;

namespace {

AxonMapGeometry geometry(std::size_t res, double curvature = 0.5) {
  GeometryParams p;
  p.resolution = res;
  p.axon.curvature = curvature;
  return AxonMapGeometry::build(p);
}

std::vector<double> sparse_stimulus(std::uint64_t seed) {
  Rng rng(seed);
  const double frac = rng.uniform();
  std::vector<double> s(kElectrodes);
  for (auto& v : s) v = rng.uniform() < frac ? rng.uniform(-3, 3) : 0.0;
  return s;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("geometry sizes") {
  const auto g9 = geometry(9);
  CHECK(g9.electrodes().size() == 81);
  CHECK(g9.pixel_count() == 81);
  CHECK(g9.rho() == 400.0);
  CHECK(g9.lambda() == 1550.0);
  CHECK(geometry(28).pixel_count() == 784);
  for (std::size_t p = 0; p < g9.pixel_count(); ++p) {
    CHECK(g9.trajectory(p)[0].x == g9.pixels()[p].x);
    CHECK(g9.arclength(p)[0] == 0.0);
  }
  const auto e = g9.electrodes();
  CHECK(e[1].x - e[0].x == doctest::Approx(575.0));
  CHECK(e[0].y - e[9].y == doctest::Approx(575.0));
}

TEST_CASE("geometry parameter validation") {
  GeometryParams p;
  p.grid_spacing_um = 0.0;
  CHECK_THROWS_AS(AxonMapGeometry::build(p), ParameterError);
  p = {};
  p.field_extent_um = -1.0;
  CHECK_THROWS_AS(AxonMapGeometry::build(p), ParameterError);
  p = {};
  p.rho_um = 0.0;
  CHECK_THROWS_AS(AxonMapGeometry::build(p), ParameterError);
  p = {};
  p.resolution = 10;
  CHECK_THROWS_AS(AxonMapGeometry::build(p), ParameterError);
}

TEST_CASE("zero curvature gives straight radial axons") {
  const auto g = geometry(9, 0.0);
  const auto& ax = g.params().axon;
  for (std::size_t p = 0; p < g.pixel_count(); ++p) {
    const auto t = g.trajectory(p);
    const double ux = t[0].x - ax.optic_disc_x_um, uy = t[0].y - ax.optic_disc_y_um;
    const double len = std::hypot(ux, uy);
    for (const auto& q : t) {
      const double vx = q.x - ax.optic_disc_x_um, vy = q.y - ax.optic_disc_y_um;
      CHECK(std::abs(ux * vy - uy * vx) / len < 1e-6);
      CHECK(ux * vx + uy * vy >= 0.0);
    }
  }
}

TEST_CASE("mirrored pixels have mirrored trajectories") {
  for (std::size_t res : {9u, 28u}) {
    const auto g = geometry(res);
    for (std::size_t r = 0; r < res; ++r)
      for (std::size_t c = 0; c < res; ++c) {
        const auto a = g.trajectory(r * res + c);
        const auto b = g.trajectory((res - 1 - r) * res + c);
        for (std::size_t k = 0; k < a.size(); ++k) {
          CHECK(a[k].x == doctest::Approx(b[k].x).epsilon(1e-9));
          CHECK(a[k].y == doctest::Approx(-b[k].y).epsilon(1e-9));
        }
      }
  }
}

TEST_CASE("arclength is monotone and bounded by the cutoff") {
  const auto g = geometry(28);
  for (std::size_t p = 0; p < g.pixel_count(); ++p) {
    const auto arc = g.arclength(p);
    for (std::size_t k = 1; k < arc.size(); ++k) CHECK(arc[k] >= arc[k - 1]);
    CHECK(arc.back() <= 3.0 * g.lambda() + 1e-9);
  }
}

TEST_CASE("render closed-form cases") {
  const auto g = geometry(9);
  const std::vector<double> zero(81, 0.0);
  for (double v : render_direct(zero, g)) CHECK(v == 0.0);

  std::vector<double> one(81, 0.0);
  one[40] = 1.0;
  const auto out = render_direct(one, g);
  CHECK(out[40] == 1.0);
  for (double v : out) CHECK(v <= 1.0);

  Rng rng(3);
  std::vector<double> neg(81);
  for (auto& v : neg) v = -rng.uniform(0.01, 3.0);
  for (double v : render_direct(neg, g)) CHECK(v == 0.0);

  CHECK_THROWS_AS(render_direct(std::vector<double>(80, 0.0), g), ShapeError);
}

TEST_CASE("effect table matches direct evaluation") {
  for (std::size_t res : {9u, 28u}) {
    const auto g = geometry(res);
    const EffectTable<double> table(g);
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto stim = sparse_stimulus(s);
      const auto direct = render_direct(stim, g);
      const auto tab = table.render(stim);
      for (std::size_t i = 0; i < direct.size(); ++i)
        worst = std::max(worst, std::abs(direct[i] - tab[i]) / (std::abs(direct[i]) + 1e-12));
    }
    INFO("res ", res, " worst ", worst);
    CHECK(worst < 1e-6);
    for (double v : table.render(std::vector<double>(81, 0.0))) CHECK(v == 0.0);
  }
}

TEST_CASE("pre-clamp response is linear") {
  const EffectTable<double> table(geometry(28));
  const auto x = sparse_stimulus(10), y = sparse_stimulus(11);
  const double a = 1.7, b = -0.6;
  std::vector<double> z(81);
  for (std::size_t i = 0; i < 81; ++i) z[i] = a * x[i] + b * y[i];
  const auto px = table.render_preclamp(x), py = table.render_preclamp(y), pz = table.render_preclamp(z);
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < pz.size(); ++i) scale = std::max(scale, std::abs(pz[i]));
  for (std::size_t i = 0; i < pz.size(); ++i) worst = std::max(worst, std::abs(pz[i] - (a * px[i] + b * py[i])) / scale);
  CHECK(worst < 1e-5);

  std::vector<double> pos(81), dbl(81);
  for (std::size_t i = 0; i < 81; ++i) {
    pos[i] = std::abs(x[i]);
    dbl[i] = 2.0 * pos[i];
  }
  const auto p1 = table.render_preclamp(pos), p2 = table.render_preclamp(dbl);
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p2[i] == doctest::Approx(2.0 * p1[i]).epsilon(1e-12));
}

TEST_CASE("batch render agrees with per-sample render and ignores thread count") {
  const EffectTable<float> table(geometry(28));
  const std::size_t n = 300;
  std::vector<float> stim(n * 81);
  for (std::size_t s = 0; s < n; ++s) {
    const auto v = sparse_stimulus(100 + s);
    for (std::size_t e = 0; e < 81; ++e) stim[s * 81 + e] = static_cast<float>(v[e]);
  }
  std::vector<float> ref(n * 784), one(n * 784), many(n * 784);
  reference::render_batch<float>(table, stim, n, ref);
  const int saved = kernels::max_threads();
  kernels::set_num_threads(1);
  table.render_batch(stim, n, one);
  kernels::set_num_threads(8);
  table.render_batch(stim, n, many);
  kernels::set_num_threads(saved);
  CHECK(one == many);
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, double(std::abs(ref[i] - one[i])));
  CHECK(worst < 1e-5);
}

TEST_CASE("28x28 percepts area-averaged to 9x9 track the native 9x9 render") {
  const auto g9 = geometry(9), g28 = geometry(28);
  const EffectTable<double> t9(g9), t28(g28);
  std::vector<double> a, b;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto stim = sparse_stimulus(500 + s);
    const auto hi = t28.render(stim);
    const auto lo = resize_area(hi, 28, 28, 9, 9);
    const auto nat = t9.render(stim);
    a.insert(a.end(), lo.begin(), lo.end());
    b.insert(b.end(), nat.begin(), nat.end());
  }
  const double r = pearson(a, b);
  INFO("pearson r = ", r);
  CHECK(r > 0.95);
}

TEST_CASE("fingerprint and serialization") {
  const auto g = geometry(9);
  const auto back = AxonMapGeometry::deserialize(g.serialize());
  CHECK(back.fingerprint() == g.fingerprint());
  GeometryParams p;
  p.rho_um = 401.0;
  CHECK(AxonMapGeometry::build(p).fingerprint() != g.fingerprint());
  CHECK(geometry(28).fingerprint() != g.fingerprint());
  CHECK_THROWS_AS(AxonMapGeometry::deserialize(std::vector<double>(3, 0.0)), FormatError);
}

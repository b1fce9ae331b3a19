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

#include "phosflow/phosim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstring>
#include <numbers>
#include <string>

#include <openssl/evp.h>

#include "phosflow/errors.hpp"
#include "phosflow/kernels.hpp"

namespace phosflow::phosim {

namespace {

constexpr double kFormatTag = 1.0;

double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  while (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

std::vector<Point> grid_points(std::size_t side, double span) {
  std::vector<Point> pts;
  pts.reserve(side * side);
  const double half = span / 2.0;
  const double step = side > 1 ? span / static_cast<double>(side - 1) : 0.0;
  // Row-major with row 0 at the top (largest y).
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c)
      pts.push_back({-half + static_cast<double>(c) * step, half - static_cast<double>(r) * step});
  return pts;
}

}  // namespace

AxonMapGeometry AxonMapGeometry::build(const GeometryParams& params) {
  if (!(params.grid_spacing_um > 0.0) || !(params.field_extent_um > 0.0)) {
    throw ParameterError("grid spacing and field extent must be positive");
  }
  if (!(params.rho_um > 0.0) || !(params.lambda_um > 0.0)) throw ParameterError("rho and lambda must be positive");
  if (params.resolution != 9 && params.resolution != 28) {
    throw ParameterError("resolution must be 9 or 28, got " + std::to_string(params.resolution));
  }
  if (params.axon.segments < 1) throw ParameterError("axon trajectories need at least one point");
  if (params.axon.curvature < 0.0) throw ParameterError("axon curvature must be non-negative");

  AxonMapGeometry g;
  g.params_ = params;
  if (g.params_.axon.max_arc_um <= 0.0) g.params_.axon.max_arc_um = 3.0 * params.lambda_um;
  const AxonParams& ax = g.params_.axon;

  g.electrodes_ = grid_points(kGridSide, params.grid_spacing_um * static_cast<double>(kGridSide - 1));
  g.pixels_ = grid_points(params.resolution, params.field_extent_um);

  const std::size_t q = ax.segments;
  const double b = ax.curvature;
  const double stretch = std::sqrt(1.0 + b * b);
  g.segments_.resize(g.pixels_.size() * q);
  g.arc_.resize(g.pixels_.size() * q);
  for (std::size_t p = 0; p < g.pixels_.size(); ++p) {
    const Point soma = g.pixels_[p];
    const double dx = soma.x - ax.optic_disc_x_um;
    const double dy = soma.y - ax.optic_disc_y_um;
    const double r_soma = std::hypot(dx, dy);
    const double theta_soma = std::atan2(dy, dx);
    // Angle from the optic-disc -> fovea axis; its sign picks the hemifield
    // so that mirrored somas get mirrored bundles.
    const double phi = wrap_angle(theta_soma - std::numbers::pi);
    const double side = phi > 0.0 ? 1.0 : (phi < 0.0 ? -1.0 : 0.0);
    const double r_end = std::max(ax.optic_disc_radius_um, r_soma - ax.max_arc_um / stretch);
    const double dr = (q > 1 && r_soma > r_end) ? (r_soma - r_end) / static_cast<double>(q - 1) : 0.0;
    for (std::size_t k = 0; k < q; ++k) {
      const std::size_t i = p * q + k;
      if (k == 0 || dr == 0.0) {
        g.segments_[i] = soma;
        g.arc_[i] = 0.0;
        continue;
      }
      const double r = r_soma - static_cast<double>(k) * dr;
      const double theta = theta_soma + side * b * std::log(r_soma / r);
      g.segments_[i] = {ax.optic_disc_x_um + r * std::cos(theta), ax.optic_disc_y_um + r * std::sin(theta)};
      g.arc_[i] = stretch * (r_soma - r);
    }
  }
  return g;
}

std::span<const Point> AxonMapGeometry::trajectory(std::size_t p) const {
  const std::size_t q = segments_per_pixel();
  return std::span<const Point>(segments_).subspan(p * q, q);
}

std::span<const double> AxonMapGeometry::arclength(std::size_t p) const {
  const std::size_t q = segments_per_pixel();
  return std::span<const double>(arc_).subspan(p * q, q);
}

std::vector<double> AxonMapGeometry::serialize() const {
  const auto& a = params_.axon;
  return {kFormatTag,
          params_.grid_spacing_um,
          params_.field_extent_um,
          static_cast<double>(params_.resolution),
          params_.rho_um,
          params_.lambda_um,
          a.curvature,
          a.optic_disc_x_um,
          a.optic_disc_y_um,
          a.optic_disc_radius_um,
          static_cast<double>(a.segments),
          a.max_arc_um};
}

AxonMapGeometry AxonMapGeometry::deserialize(std::span<const double> v) {
  if (v.size() != 12 || v[0] != kFormatTag) throw FormatError("unrecognized geometry record");
  GeometryParams p;
  p.grid_spacing_um = v[1];
  p.field_extent_um = v[2];
  p.resolution = static_cast<std::size_t>(v[3]);
  p.rho_um = v[4];
  p.lambda_um = v[5];
  p.axon.curvature = v[6];
  p.axon.optic_disc_x_um = v[7];
  p.axon.optic_disc_y_um = v[8];
  p.axon.optic_disc_radius_um = v[9];
  p.axon.segments = static_cast<std::size_t>(v[10]);
  p.axon.max_arc_um = v[11];
  return build(p);
}

Fingerprint AxonMapGeometry::fingerprint() const {
  const auto values = serialize();
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &values[i], 8);
    for (int k = 0; k < 8; ++k) bytes[i * 8 + k] = static_cast<unsigned char>(bits >> (8 * k));
  }
  Fingerprint out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size()) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  return out;
}

std::vector<double> render_direct(std::span<const double> stimulus, const AxonMapGeometry& geo) {
  if (stimulus.size() != geo.electrodes().size()) {
    throw ShapeError("render: stimulus has " + std::to_string(stimulus.size()) + " amplitudes, geometry has " +
                     std::to_string(geo.electrodes().size()) + " electrodes");
  }
  const double two_rho2 = 2.0 * geo.rho() * geo.rho();
  const double two_lam2 = 2.0 * geo.lambda() * geo.lambda();
  const auto electrodes = geo.electrodes();
  std::vector<double> out(geo.pixel_count());
  for (std::size_t p = 0; p < geo.pixel_count(); ++p) {
    const auto traj = geo.trajectory(p);
    const auto arc = geo.arclength(p);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < traj.size(); ++k) {
      double drive = 0.0;
      for (std::size_t e = 0; e < electrodes.size(); ++e) {
        const double dx = traj[k].x - electrodes[e].x;
        const double dy = traj[k].y - electrodes[e].y;
        drive += stimulus[e] * std::exp(-(dx * dx + dy * dy) / two_rho2);
      }
      best = std::max(best, drive * std::exp(-arc[k] * arc[k] / two_lam2));
    }
    out[p] = std::max(0.0, best);
  }
  return out;
}

template <typename T>
EffectTable<T>::EffectTable(const AxonMapGeometry& geo)
    : pixels_(geo.pixel_count()), segments_(geo.segments_per_pixel()) {
  const double two_rho2 = 2.0 * geo.rho() * geo.rho();
  const double two_lam2 = 2.0 * geo.lambda() * geo.lambda();
  const auto electrodes = geo.electrodes();
  weights_.resize(rows() * kElectrodes);
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < pixels_; ++p) {
    const auto traj = geo.trajectory(p);
    const auto arc = geo.arclength(p);
    for (std::size_t k = 0; k < segments_; ++k) {
      const double decay = std::exp(-arc[k] * arc[k] / two_lam2);
      T* row = weights_.data() + (p * segments_ + k) * kElectrodes;
      for (std::size_t e = 0; e < kElectrodes; ++e) {
        const double dx = traj[k].x - electrodes[e].x;
        const double dy = traj[k].y - electrodes[e].y;
        row[e] = static_cast<T>(std::exp(-(dx * dx + dy * dy) / two_rho2) * decay);
      }
    }
  }
}

template <typename T>
std::vector<T> EffectTable<T>::render_preclamp(std::span<const T> stimulus) const {
  if (stimulus.size() != kElectrodes) throw ShapeError("render: stimulus must have 81 amplitudes, got " + std::to_string(stimulus.size()));
  std::vector<T> out(rows());
  for (std::size_t r = 0; r < rows(); ++r) {
    const T* w = weights_.data() + r * kElectrodes;
    T acc = T(0);
    for (std::size_t e = 0; e < kElectrodes; ++e) acc += w[e] * stimulus[e];
    out[r] = acc;
  }
  return out;
}

template <typename T>
std::vector<T> EffectTable<T>::render(std::span<const T> stimulus) const {
  const auto pre = render_preclamp(stimulus);
  std::vector<T> out(pixels_);
  for (std::size_t p = 0; p < pixels_; ++p) {
    const T* seg = pre.data() + p * segments_;
    out[p] = std::max(T(0), *std::max_element(seg, seg + segments_));
  }
  return out;
}

template <typename T>
void EffectTable<T>::render_batch(std::span<const T> stimuli, std::size_t count, std::span<T> percepts) const {
  if (stimuli.size() != count * kElectrodes || percepts.size() != count * pixels_) {
    throw ShapeError("render_batch: buffers do not match " + std::to_string(count) + " samples");
  }
  constexpr std::size_t kChunk = 128;
  const std::size_t n = rows();
  std::vector<T> pre(std::min(count, kChunk) * n);
  for (std::size_t s0 = 0; s0 < count; s0 += kChunk) {
    const std::size_t cs = std::min(kChunk, count - s0);
    kernels::gemm<T>(false, true, cs, n, kElectrodes, stimuli.data() + s0 * kElectrodes, kElectrodes,
                     weights_.data(), kElectrodes, pre.data(), n, false);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < cs * pixels_; ++i) {
      const T* seg = pre.data() + i * segments_;
      percepts[s0 * pixels_ + i] = std::max(T(0), *std::max_element(seg, seg + segments_));
    }
  }
}

namespace reference {

template <typename T>
void render_batch(const EffectTable<T>& table, std::span<const T> stimuli, std::size_t count, std::span<T> percepts) {
  const std::size_t px = table.pixel_count();
  for (std::size_t s = 0; s < count; ++s) {
    const auto out = table.render(stimuli.subspan(s * kElectrodes, kElectrodes));
    std::copy(out.begin(), out.end(), percepts.begin() + static_cast<std::ptrdiff_t>(s * px));
  }
}

template void render_batch<float>(const EffectTable<float>&, std::span<const float>, std::size_t, std::span<float>);
template void render_batch<double>(const EffectTable<double>&, std::span<const double>, std::size_t, std::span<double>);

}  // namespace reference

template class EffectTable<float>;
template class EffectTable<double>;

}  // namespace phosflow::phosim

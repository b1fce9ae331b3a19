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

#ifndef PHOSFLOW_PHOSIM_HPP
#define PHOSFLOW_PHOSIM_HPP

// Axon map phosphene simulator for a 9x9 epiretinal electrode grid.
//
// Every pixel of the percept is the soma of a ganglion cell whose axon runs
// toward the optic disc along a log-spiral bundle. A stimulus drives each
// axon segment with a Gaussian of the segment-electrode distance (scale rho);
// the segment's effect on the soma decays with arclength (scale lambda).
// Signed electrode currents add per segment, the brightest segment sets the
// pixel intensity, and negative totals clamp to zero.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "phosflow/array.hpp"

namespace phosflow::phosim {

inline constexpr std::size_t kGridSide = 9;
inline constexpr std::size_t kElectrodes = kGridSide * kGridSide;

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct AxonParams {
  double curvature = 0.5;          // log-spiral pitch; 0 gives straight radial axons
  double optic_disc_x_um = 4000.0;
  double optic_disc_y_um = 0.0;
  double optic_disc_radius_um = 900.0;
  std::size_t segments = 41;       // points per trajectory, soma included
  double max_arc_um = 0.0;         // 0 selects 3 * lambda
};

struct GeometryParams {
  double grid_spacing_um = 575.0;
  double field_extent_um = 4600.0;  // distance between the outermost pixel centres
  std::size_t resolution = 9;       // pixels per side: 9 or 28
  double rho_um = 400.0;
  double lambda_um = 1550.0;
  AxonParams axon{};
};

using Fingerprint = std::array<std::uint8_t, 32>;

/// Immutable electrode/pixel layout with per-pixel axon trajectories.
class AxonMapGeometry {
 public:
  static AxonMapGeometry build(const GeometryParams& params);

  const GeometryParams& params() const noexcept { return params_; }
  std::size_t resolution() const noexcept { return params_.resolution; }
  std::size_t pixel_count() const noexcept { return pixels_.size(); }
  std::size_t segments_per_pixel() const noexcept { return params_.axon.segments; }
  double rho() const noexcept { return params_.rho_um; }
  double lambda() const noexcept { return params_.lambda_um; }

  std::span<const Point> electrodes() const noexcept { return electrodes_; }
  std::span<const Point> pixels() const noexcept { return pixels_; }
  /// Trajectory of pixel p; element 0 is the soma (the pixel itself).
  std::span<const Point> trajectory(std::size_t p) const;
  /// Arclength from the soma for each trajectory point of pixel p.
  std::span<const double> arclength(std::size_t p) const;

  /// SHA-256 over the canonical geometry description.
  Fingerprint fingerprint() const;
  /// Parameters flattened for embedding in checkpoints.
  std::vector<double> serialize() const;
  static AxonMapGeometry deserialize(std::span<const double> values);

 private:
  GeometryParams params_;
  std::vector<Point> electrodes_;
  std::vector<Point> pixels_;
  std::vector<Point> segments_;  // pixel-major, segments_per_pixel each
  std::vector<double> arc_;
};

/// Direct per-pixel evaluation, the reference the table must reproduce.
std::vector<double> render_direct(std::span<const double> stimulus, const AxonMapGeometry& geo);

/// Per-segment electrode weights: row (p * Q + q), column e holds
/// exp(-|seg - e|^2 / 2 rho^2) * exp(-arc^2 / 2 lambda^2).
template <typename T>
class EffectTable {
 public:
  explicit EffectTable(const AxonMapGeometry& geo);

  std::size_t pixel_count() const noexcept { return pixels_; }
  std::size_t segments_per_pixel() const noexcept { return segments_; }
  std::size_t rows() const noexcept { return pixels_ * segments_; }
  /// Row-major [rows, 81].
  const std::vector<T>& weights() const noexcept { return weights_; }

  /// Segment contributions before the max/clamp stage, length rows().
  std::vector<T> render_preclamp(std::span<const T> stimulus) const;
  std::vector<T> render(std::span<const T> stimulus) const;
  /// stimuli [count, 81] -> percepts [count, pixels]; OpenMP over samples.
  void render_batch(std::span<const T> stimuli, std::size_t count, std::span<T> percepts) const;

 private:
  std::size_t pixels_;
  std::size_t segments_;
  std::vector<T> weights_;
};

namespace reference {
/// Serial per-sample loop over the same table.
template <typename T>
void render_batch(const EffectTable<T>& table, std::span<const T> stimuli, std::size_t count, std::span<T> percepts);
}  // namespace reference

}  // namespace phosflow::phosim

#endif  // PHOSFLOW_PHOSIM_HPP

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

#ifndef PHOSFLOW_IMAGE_HPP
#define PHOSFLOW_IMAGE_HPP

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace phosflow {

/// Area-interpolation resize of a row-major single-channel image. Each output
/// pixel is the overlap-weighted mean of the source pixels it covers, so
/// fractional ratios such as 28 -> 9 are handled exactly.
std::vector<double> resize_area(std::span<const double> src, std::size_t src_h, std::size_t src_w,
                                std::size_t dst_h, std::size_t dst_w);

/// Nearest-neighbour resize; used to blow up 9x9 stimulus grids for display.
std::vector<double> resize_nearest(std::span<const double> src, std::size_t src_h, std::size_t src_w,
                                   std::size_t dst_h, std::size_t dst_w);

/// Writes an 8-bit binary PGM (P5). Values are min-max scaled to 0..255 over
/// [lo, hi]; pass lo == hi to scale over the image's own range. A constant
/// image maps to 0.
void write_pgm(const std::filesystem::path& path, std::span<const double> pixels, std::size_t height,
               std::size_t width, double lo = 0.0, double hi = 0.0);

/// Places images side by side with a 1-pixel black gutter (all must share a height).
std::vector<double> hstack(const std::vector<std::vector<double>>& images, std::size_t height,
                           const std::vector<std::size_t>& widths, std::size_t& out_width);

}  // namespace phosflow

#endif  // PHOSFLOW_IMAGE_HPP

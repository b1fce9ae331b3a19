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

#include "phosflow/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "phosflow/errors.hpp"

namespace phosflow {

namespace {

struct Span1d {
  std::size_t first;
  std::vector<double> weights;  // overlap of source cells first, first+1, ...
};

std::vector<Span1d> area_weights(std::size_t src, std::size_t dst) {
  std::vector<Span1d> out(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double lo = static_cast<double>(i) * scale;
    const double hi = static_cast<double>(i + 1) * scale;
    const auto first = static_cast<std::size_t>(std::floor(lo));
    out[i].first = first;
    for (std::size_t s = first; s < src && static_cast<double>(s) < hi; ++s) {
      const double overlap = std::min(hi, static_cast<double>(s + 1)) - std::max(lo, static_cast<double>(s));
      out[i].weights.push_back(std::max(0.0, overlap) / scale);
    }
  }
  return out;
}

}  // namespace

std::vector<double> resize_area(std::span<const double> src, std::size_t src_h, std::size_t src_w,
                                std::size_t dst_h, std::size_t dst_w) {
  if (src.size() != src_h * src_w) throw ShapeError("resize_area: buffer does not match " + std::to_string(src_h) + "x" + std::to_string(src_w));
  if (dst_h == 0 || dst_w == 0 || src_h == 0 || src_w == 0) throw ParameterError("resize_area: empty extent");
  if (src_h == dst_h && src_w == dst_w) return {src.begin(), src.end()};
  const auto wy = area_weights(src_h, dst_h);
  const auto wx = area_weights(src_w, dst_w);
  std::vector<double> out(dst_h * dst_w, 0.0);
  for (std::size_t i = 0; i < dst_h; ++i)
    for (std::size_t j = 0; j < dst_w; ++j) {
      double acc = 0.0;
      for (std::size_t a = 0; a < wy[i].weights.size(); ++a)
        for (std::size_t b = 0; b < wx[j].weights.size(); ++b)
          acc += wy[i].weights[a] * wx[j].weights[b] * src[(wy[i].first + a) * src_w + wx[j].first + b];
      out[i * dst_w + j] = acc;
    }
  return out;
}

void write_pgm(const std::filesystem::path& path, std::span<const double> pixels, std::size_t height,
               std::size_t width, double lo, double hi) {
  if (pixels.size() != height * width) throw ShapeError("write_pgm: buffer does not match image size");
  if (lo == hi && !pixels.empty()) {
    lo = *std::min_element(pixels.begin(), pixels.end());
    hi = *std::max_element(pixels.begin(), pixels.end());
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << "P5\n" << width << ' ' << height << "\n255\n";
  const double range = hi - lo;
  for (double v : pixels) {
    double t = range > 0.0 ? (v - lo) / range : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
}

std::vector<double> resize_nearest(std::span<const double> src, std::size_t src_h, std::size_t src_w,
                                   std::size_t dst_h, std::size_t dst_w) {
  if (src.size() != src_h * src_w) throw ShapeError("resize_nearest: buffer does not match " + std::to_string(src_h) + "x" + std::to_string(src_w));
  if (dst_h == 0 || dst_w == 0 || src_h == 0 || src_w == 0) throw ParameterError("resize_nearest: empty extent");
  std::vector<double> out(dst_h * dst_w);
  for (std::size_t y = 0; y < dst_h; ++y) {
    const std::size_t sy = std::min(src_h - 1, (2 * y + 1) * src_h / (2 * dst_h));
    for (std::size_t x = 0; x < dst_w; ++x) {
      const std::size_t sx = std::min(src_w - 1, (2 * x + 1) * src_w / (2 * dst_w));
      out[y * dst_w + x] = src[sy * src_w + sx];
    }
  }
  return out;
}

std::vector<double> hstack(const std::vector<std::vector<double>>& images, std::size_t height,
                           const std::vector<std::size_t>& widths, std::size_t& out_width) {
  out_width = 0;
  for (std::size_t k = 0; k < images.size(); ++k) out_width += widths[k] + (k ? 1 : 0);
  std::vector<double> out(height * out_width, 0.0);
  std::size_t x0 = 0;
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (images[k].size() != height * widths[k]) throw ShapeError("hstack: image " + std::to_string(k) + " has wrong size");
    for (std::size_t y = 0; y < height; ++y)
      std::copy_n(images[k].begin() + static_cast<std::ptrdiff_t>(y * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(y * out_width + x0));
    x0 += widths[k] + 1;
  }
  return out;
}

}  // namespace phosflow

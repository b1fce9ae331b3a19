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

#ifndef PHOSFLOW_DATA_HPP
#define PHOSFLOW_DATA_HPP

// Random stimulus/percept pairs, MNIST ingestion and the "PFDS" container.
//
//   magic "PFDS" | version u32 | height u16 | width u16 | count u64 |
//   seed u64 | normalization f64 | geometry fingerprint (32 bytes) |
//   stimuli f32 [count x 81] | percepts f32 [count x height x width]
//
// Percepts are stored as rendered; consumers divide by `normalization`.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "phosflow/phosim.hpp"

namespace phosflow::data {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kHeaderBytes = 68;
inline constexpr std::size_t kShardSize = 8192;
inline constexpr double kAmplitudeLimit = 3.0;
inline constexpr double kNormalizationQuantile = 0.999;

struct PairDataset {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  double normalization = 1.0;
  phosim::Fingerprint fingerprint{};
  std::vector<float> stimuli;   // [count, 81]
  std::vector<float> percepts;  // [count, height * width]

  std::size_t pixels() const { return height * width; }
  std::span<const float> stimulus(std::size_t i) const { return {stimuli.data() + i * phosim::kElectrodes, phosim::kElectrodes}; }
  std::span<const float> percept(std::size_t i) const { return {percepts.data() + i * pixels(), pixels()}; }
};

/// Stimulus for sample `index` of the stream rooted at `master_seed`: an
/// activation fraction ~ U(0,1), round(fraction * 81) electrodes chosen
/// without replacement, amplitudes ~ U(-3, 3), the rest zero.
std::vector<float> sample_stimulus(std::uint64_t master_seed, std::uint64_t index);

/// Nearest-rank quantile (rank ceil(q * n)) of non-negative values.
double nonnegative_quantile(std::span<const float> values, double q);

/// In-memory generation with the normalization taken over the percepts.
PairDataset gen_pairs(std::size_t n, const phosim::AxonMapGeometry& geo, std::uint64_t master_seed);

/// Streams generation to `path` in shards; memory stays O(shard). Returns
/// the normalization constant written to the header.
double gen_pairs_to_file(const std::filesystem::path& path, std::size_t n, const phosim::AxonMapGeometry& geo,
                         std::uint64_t master_seed);

void save_dataset(const std::filesystem::path& path, const PairDataset& ds);
/// With `expected`, a fingerprint mismatch raises StaleDataError.
PairDataset load_dataset(const std::filesystem::path& path,
                         const std::optional<phosim::AxonMapGeometry>& expected = std::nullopt);

struct LabeledImageSet {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> images;  // [count, height * width], raw byte / 255
  std::vector<std::uint8_t> labels;

  std::size_t pixels() const { return height * width; }
  std::span<const float> image(std::size_t i) const { return {images.data() + i * pixels(), pixels()}; }
};

/// Parses big-endian IDX image (magic 2051) and label (magic 2049) files.
/// `limit` > 0 keeps only the first `limit` items.
LabeledImageSet load_mnist(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                           std::size_t limit = 0);

/// Area-interpolation resize of every image to side x side.
LabeledImageSet resize_images(const LabeledImageSet& set, std::size_t side);

}  // namespace phosflow::data

#endif  // PHOSFLOW_DATA_HPP

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

#include "phosflow/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>

#include "phosflow/checkpoint.hpp"
#include "phosflow/errors.hpp"
#include "phosflow/image.hpp"
#include "phosflow/rng.hpp"

static_assert(std::endian::native == std::endian::little, "PFDS blocks are written in host order");

namespace phosflow::data {
namespace {

constexpr std::size_t kNormOffset = 28;
constexpr std::size_t kE = phosim::kElectrodes;

struct Header {
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint64_t count = 0;
  std::uint64_t seed = 0;
  double normalization = 1.0;
  phosim::Fingerprint fingerprint{};
};

template <typename V>
void put(std::vector<std::uint8_t>& out, V v) {
  std::uint8_t b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  out.insert(out.end(), b, b + sizeof(V));
}

std::vector<std::uint8_t> encode_header(const Header& h) {
  std::vector<std::uint8_t> out{'P', 'F', 'D', 'S'};
  put(out, kDatasetVersion);
  put(out, h.height);
  put(out, h.width);
  put(out, h.count);
  put(out, h.seed);
  put(out, h.normalization);
  out.insert(out.end(), h.fingerprint.begin(), h.fingerprint.end());
  return out;
}

template <typename V>
V take(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  V v;
  std::memcpy(&v, b.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

Header decode_header(const std::vector<std::uint8_t>& b, const std::filesystem::path& path) {
  if (b.size() < kHeaderBytes) {
    throw FormatError(path.string() + ": truncated header, file ends at byte offset " + std::to_string(b.size()));
  }
  if (std::memcmp(b.data(), "PFDS", 4) != 0) throw FormatError(path.string() + ": not a PFDS dataset (bad magic at byte offset 0)");
  std::size_t pos = 4;
  const auto version = take<std::uint32_t>(b, pos);
  if (version != kDatasetVersion) {
    throw FormatError(path.string() + ": dataset format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kDatasetVersion) + "); regenerate it with `phosflow gen-data`");
  }
  Header h;
  h.height = take<std::uint16_t>(b, pos);
  h.width = take<std::uint16_t>(b, pos);
  h.count = take<std::uint64_t>(b, pos);
  h.seed = take<std::uint64_t>(b, pos);
  h.normalization = take<double>(b, pos);
  std::memcpy(h.fingerprint.data(), b.data() + pos, 32);
  return h;
}

std::string hex(const phosim::Fingerprint& f) {
  static const char* d = "0123456789abcdef";
  std::string s;
  for (auto b : f) {
    s += d[b >> 4];
    s += d[b & 15];
  }
  return s.substr(0, 16);
}

// Renders a shard of stimuli (f32) through the f64 table.
void render_shard(const phosim::EffectTable<double>& table, std::span<const float> stim, std::size_t count,
                  std::span<float> out) {
  std::vector<double> s(stim.begin(), stim.end());
  std::vector<double> p(count * table.pixel_count());
  table.render_batch(s, count, p);
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = static_cast<float>(p[i]);
}

void fill_stimuli(std::uint64_t seed, std::size_t begin, std::size_t count, std::span<float> out) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = sample_stimulus(seed, begin + i);
    std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(i * kE));
  }
}

std::uint32_t bits_of(float v) { return std::bit_cast<std::uint32_t>(v); }

double finish_normalization(double q) { return q > 0.0 ? q : 1.0; }

}  // namespace

std::vector<float> sample_stimulus(std::uint64_t master_seed, std::uint64_t index) {
  Rng rng(derive_seed(master_seed, index));
  const double fraction = rng.uniform();
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(kE)));
  std::array<std::size_t, kE> idx;
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<float> s(kE, 0.0f);
  for (std::size_t j = 0; j < k; ++j) {
    std::swap(idx[j], idx[j + rng.below(kE - j)]);
    s[idx[j]] = static_cast<float>(rng.uniform(-kAmplitudeLimit, kAmplitudeLimit));
  }
  return s;
}

double nonnegative_quantile(std::span<const float> values, double q) {
  if (values.empty()) throw ContractError("quantile of an empty set");
  std::vector<float> v(values.begin(), values.end());
  const auto rank = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))), 1, v.size());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rank - 1), v.end());
  return v[rank - 1];
}

PairDataset gen_pairs(std::size_t n, const phosim::AxonMapGeometry& geo, std::uint64_t master_seed) {
  if (n < 1) throw ParameterError("gen_pairs: n must be >= 1");
  const phosim::EffectTable<double> table(geo);
  PairDataset ds;
  ds.count = n;
  ds.height = ds.width = geo.resolution();
  ds.seed = master_seed;
  ds.fingerprint = geo.fingerprint();
  ds.stimuli.resize(n * kE);
  ds.percepts.resize(n * ds.pixels());
  for (std::size_t s0 = 0; s0 < n; s0 += kShardSize) {
    const std::size_t cs = std::min(kShardSize, n - s0);
    std::span<float> stim(ds.stimuli.data() + s0 * kE, cs * kE);
    fill_stimuli(master_seed, s0, cs, stim);
    render_shard(table, stim, cs, std::span<float>(ds.percepts.data() + s0 * ds.pixels(), cs * ds.pixels()));
  }
  ds.normalization = finish_normalization(nonnegative_quantile(ds.percepts, kNormalizationQuantile));
  return ds;
}

double gen_pairs_to_file(const std::filesystem::path& path, std::size_t n, const phosim::AxonMapGeometry& geo,
                         std::uint64_t master_seed) {
  if (n < 1) throw ParameterError("gen_pairs: n must be >= 1");
  const phosim::EffectTable<double> table(geo);
  const std::size_t px = geo.pixel_count();
  Header h;
  h.height = h.width = static_cast<std::uint16_t>(geo.resolution());
  h.count = n;
  h.seed = master_seed;
  h.fingerprint = geo.fingerprint();
  const std::size_t percept_offset = kHeaderBytes + n * kE * sizeof(float);

  std::vector<std::uint64_t> hist(1u << 16, 0);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const auto head = encode_header(h);
    out.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
    std::vector<float> stim, perc;
    for (std::size_t s0 = 0; s0 < n; s0 += kShardSize) {
      const std::size_t cs = std::min(kShardSize, n - s0);
      stim.assign(cs * kE, 0.0f);
      perc.assign(cs * px, 0.0f);
      fill_stimuli(master_seed, s0, cs, stim);
      render_shard(table, stim, cs, perc);
      for (float v : perc) ++hist[bits_of(v) >> 16];
      out.seekp(static_cast<std::streamoff>(kHeaderBytes + s0 * kE * sizeof(float)));
      out.write(reinterpret_cast<const char*>(stim.data()), static_cast<std::streamsize>(stim.size() * sizeof(float)));
      out.seekp(static_cast<std::streamoff>(percept_offset + s0 * px * sizeof(float)));
      out.write(reinterpret_cast<const char*>(perc.data()), static_cast<std::streamsize>(perc.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }

  // Exact nearest-rank quantile: locate the bucket of the target rank, then
  // re-read the percept block and select inside that bucket.
  const std::size_t total = n * px;
  const auto rank = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(kNormalizationQuantile * static_cast<double>(total))), 1, total);
  std::size_t bucket = 0, below = 0;
  while (below + hist[bucket] < rank) below += hist[bucket++];
  std::vector<float> inside;
  inside.reserve(hist[bucket]);
  {
    std::ifstream in(path, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(percept_offset));
    std::vector<float> chunk(kShardSize * px);
    for (std::size_t done = 0; done < total;) {
      const std::size_t m = std::min(chunk.size(), total - done);
      in.read(reinterpret_cast<char*>(chunk.data()), static_cast<std::streamsize>(m * sizeof(float)));
      if (!in) throw FormatError("re-reading " + path.string() + " failed at percept " + std::to_string(done));
      for (std::size_t i = 0; i < m; ++i)
        if ((bits_of(chunk[i]) >> 16) == bucket) inside.push_back(chunk[i]);
      done += m;
    }
  }
  const std::size_t k = rank - below - 1;
  std::nth_element(inside.begin(), inside.begin() + static_cast<std::ptrdiff_t>(k), inside.end());
  const double norm = finish_normalization(inside[k]);

  std::fstream patch(path, std::ios::binary | std::ios::in | std::ios::out);
  patch.seekp(static_cast<std::streamoff>(kNormOffset));
  patch.write(reinterpret_cast<const char*>(&norm), sizeof(norm));
  if (!patch) throw std::runtime_error("cannot finalize " + path.string());
  return norm;
}

void save_dataset(const std::filesystem::path& path, const PairDataset& ds) {
  if (ds.stimuli.size() != ds.count * kE || ds.percepts.size() != ds.count * ds.pixels()) {
    throw ShapeError("save_dataset: blocks do not match count " + std::to_string(ds.count));
  }
  Header h;
  h.height = static_cast<std::uint16_t>(ds.height);
  h.width = static_cast<std::uint16_t>(ds.width);
  h.count = ds.count;
  h.seed = ds.seed;
  h.normalization = ds.normalization;
  h.fingerprint = ds.fingerprint;
  auto bytes = encode_header(h);
  const auto* s = reinterpret_cast<const std::uint8_t*>(ds.stimuli.data());
  const auto* p = reinterpret_cast<const std::uint8_t*>(ds.percepts.data());
  bytes.insert(bytes.end(), s, s + ds.stimuli.size() * sizeof(float));
  bytes.insert(bytes.end(), p, p + ds.percepts.size() * sizeof(float));
  write_file_bytes(path, bytes);
}

PairDataset load_dataset(const std::filesystem::path& path, const std::optional<phosim::AxonMapGeometry>& expected) {
  const auto bytes = read_file_bytes(path);
  const Header h = decode_header(bytes, path);
  PairDataset ds;
  ds.count = h.count;
  ds.height = h.height;
  ds.width = h.width;
  ds.seed = h.seed;
  ds.normalization = h.normalization;
  ds.fingerprint = h.fingerprint;
  const std::size_t need = kHeaderBytes + ds.count * (kE + ds.pixels()) * sizeof(float);
  if (bytes.size() < need) {
    throw FormatError(path.string() + ": truncated payload, expected " + std::to_string(need) +
                      " bytes, file ends at byte offset " + std::to_string(bytes.size()));
  }
  if (bytes.size() > need) {
    throw FormatError(path.string() + ": unexpected trailing data at byte offset " + std::to_string(need));
  }
  if (expected) {
    const auto want = expected->fingerprint();
    if (want != ds.fingerprint || expected->resolution() != ds.height) {
      throw StaleDataError(path.string() + ": dataset was generated for geometry " + hex(ds.fingerprint) +
                           ", requested geometry is " + hex(want) + "; regenerate the dataset");
    }
  }
  ds.stimuli.resize(ds.count * kE);
  ds.percepts.resize(ds.count * ds.pixels());
  std::memcpy(ds.stimuli.data(), bytes.data() + kHeaderBytes, ds.stimuli.size() * sizeof(float));
  std::memcpy(ds.percepts.data(), bytes.data() + kHeaderBytes + ds.stimuli.size() * sizeof(float),
              ds.percepts.size() * sizeof(float));
  return ds;
}

namespace {

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t pos, const std::filesystem::path& path) {
  if (pos + 4 > b.size()) {
    throw FormatError(path.string() + ": truncated IDX header, file ends at byte offset " + std::to_string(b.size()));
  }
  return (std::uint32_t{b[pos]} << 24) | (std::uint32_t{b[pos + 1]} << 16) | (std::uint32_t{b[pos + 2]} << 8) |
         std::uint32_t{b[pos + 3]};
}

void expect_magic(std::uint32_t got, std::uint32_t want, const std::filesystem::path& path) {
  if (got != want) {
    throw FormatError(path.string() + ": IDX magic at byte offset 0 is " + std::to_string(got) + ", expected " +
                      std::to_string(want));
  }
}

}  // namespace

LabeledImageSet load_mnist(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                           std::size_t limit) {
  const auto img = read_file_bytes(images_path);
  const auto lab = read_file_bytes(labels_path);
  expect_magic(be32(img, 0, images_path), 2051, images_path);
  expect_magic(be32(lab, 0, labels_path), 2049, labels_path);
  const std::size_t n = be32(img, 4, images_path);
  const std::size_t rows = be32(img, 8, images_path);
  const std::size_t cols = be32(img, 12, images_path);
  const std::size_t nl = be32(lab, 4, labels_path);
  if (n != nl) {
    throw FormatError("IDX item counts differ: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  }
  const std::size_t px = rows * cols;
  if (img.size() < 16 + n * px) {
    throw FormatError(images_path.string() + ": truncated pixel data, expected " + std::to_string(16 + n * px) +
                      " bytes, file ends at byte offset " + std::to_string(img.size()));
  }
  if (lab.size() < 8 + n) {
    throw FormatError(labels_path.string() + ": truncated label data, expected " + std::to_string(8 + n) +
                      " bytes, file ends at byte offset " + std::to_string(lab.size()));
  }
  LabeledImageSet set;
  set.count = limit > 0 ? std::min(limit, n) : n;
  set.height = rows;
  set.width = cols;
  set.images.resize(set.count * px);
  set.labels.resize(set.count);
  for (std::size_t i = 0; i < set.count * px; ++i) set.images[i] = static_cast<float>(img[16 + i] / 255.0);
  for (std::size_t i = 0; i < set.count; ++i) {
    set.labels[i] = lab[8 + i];
    if (set.labels[i] > 9) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(set.labels[i]) + " at byte offset " +
                        std::to_string(8 + i) + " is outside 0-9");
    }
  }
  return set;
}

LabeledImageSet resize_images(const LabeledImageSet& set, std::size_t side) {
  if (side == set.height && side == set.width) return set;
  LabeledImageSet out;
  out.count = set.count;
  out.height = out.width = side;
  out.labels = set.labels;
  out.images.resize(set.count * side * side);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < set.count; ++i) {
    const auto src = set.image(i);
    const std::vector<double> d(src.begin(), src.end());
    const auto r = resize_area(d, set.height, set.width, side, side);
    for (std::size_t j = 0; j < r.size(); ++j) out.images[i * side * side + j] = static_cast<float>(r[j]);
  }
  return out;
}

}  // namespace phosflow::data

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
#include <string>
#include <vector>

#include "doctest.h"
#include "phosflow/checkpoint.hpp"
#include "phosflow/data.hpp"
#include "phosflow/errors.hpp"
#include "phosflow/kernels.hpp"
#include "support.hpp"

using namespace phosflow;
using namespace phosflow::data;

namespace {

phosim::AxonMapGeometry geometry(std::size_t res) {
  phosim::GeometryParams p;
  p.resolution = res;
  return phosim::AxonMapGeometry::build(p);
}

void write_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace

TEST_CASE("stimulus sampling") {
  std::size_t zero_index = 0;
  bool found = false;
  for (std::size_t i = 0; i < 10000 && !found; ++i) {
    const auto s = sample_stimulus(5, i);
    if (std::all_of(s.begin(), s.end(), [](float v) { return v == 0.0f; })) {
      zero_index = i;
      found = true;
    }
  }
  REQUIRE(found);
  const auto g = geometry(9);
  const phosim::EffectTable<double> t(g);
  const auto s = sample_stimulus(5, zero_index);
  for (double v : t.render(std::vector<double>(s.begin(), s.end()))) CHECK(v == 0.0);

  CHECK(sample_stimulus(9, 3) == sample_stimulus(9, 3));
  CHECK(sample_stimulus(9, 3) != sample_stimulus(9, 4));
  CHECK(sample_stimulus(9, 3) != sample_stimulus(10, 3));
}

TEST_CASE("active amplitudes pass a KS test against U(-3, 3)") {
  std::vector<double> amps;
  for (std::size_t i = 0; amps.size() < 100000; ++i)
    for (float v : sample_stimulus(77, i))
      if (v != 0.0f) amps.push_back(v);
  amps.resize(100000);
  std::sort(amps.begin(), amps.end());
  const double n = static_cast<double>(amps.size());
  double d = 0.0;
  for (std::size_t i = 0; i < amps.size(); ++i) {
    const double cdf = (amps[i] + 3.0) / 6.0;
    d = std::max({d, std::abs((i + 1) / n - cdf), std::abs(cdf - i / n)});
  }
  // Kolmogorov distribution: P(sqrt(n) D > 1.6276) = 0.01.
  INFO("sqrt(n) D = ", d * std::sqrt(n));
  CHECK(d * std::sqrt(n) < 1.6276);
  CHECK(amps.front() >= -3.0);
  CHECK(amps.back() <= 3.0);
}

TEST_CASE("activation count follows round(U(0,1) * 81)") {
  std::vector<int> hist(82, 0);
  const int n = 82000;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_stimulus(3, i);
    hist[std::count_if(s.begin(), s.end(), [](float v) { return v != 0.0f; })]++;
  }
  // Interior counts have probability 1/81, the two ends 1/162.
  CHECK(std::abs(hist[0] - n / 162.0) < 5 * std::sqrt(n / 162.0));
  CHECK(std::abs(hist[40] - n / 81.0) < 5 * std::sqrt(n / 81.0));
  CHECK(std::abs(hist[81] - n / 162.0) < 5 * std::sqrt(n / 162.0));
}

TEST_CASE("generated pairs are consistent with the simulator") {
  const auto g = geometry(28);
  const auto ds = gen_pairs(1000, g, 123);
  CHECK(ds.count == 1000);
  CHECK(ds.pixels() == 784);
  CHECK(ds.fingerprint == g.fingerprint());
  for (float v : ds.stimuli) CHECK((v >= -3.0f && v <= 3.0f));
  double worst = 0.0;
  for (std::size_t i = 0; i < ds.count; ++i) {
    const auto st = ds.stimulus(i);
    const auto direct = phosim::render_direct(std::vector<double>(st.begin(), st.end()), g);
    const auto p = ds.percept(i);
    for (std::size_t j = 0; j < direct.size(); ++j) {
      CHECK(p[j] >= 0.0f);
      worst = std::max(worst, std::abs(p[j] - direct[j]) / std::max(1.0, std::abs(direct[j])));
    }
  }
  CHECK(worst < 1e-6);

  std::vector<float> all(ds.percepts);
  std::sort(all.begin(), all.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.999 * all.size()));
  CHECK(ds.normalization == all[rank - 1]);
  CHECK_THROWS_AS(gen_pairs(0, g, 1), ParameterError);
}

TEST_CASE("streamed generation is byte-identical to in-memory generation and thread-invariant") {
  const auto dir = testing::scratch_dir("data_gen");
  const auto g = geometry(9);
  const std::size_t n = kShardSize * 2 + 517;
  const int saved = kernels::max_threads();
  kernels::set_num_threads(1);
  const double norm1 = gen_pairs_to_file(dir / "t1.pfds", n, g, 99);
  kernels::set_num_threads(8);
  gen_pairs_to_file(dir / "t8.pfds", n, g, 99);
  const auto mem = gen_pairs(n, g, 99);
  kernels::set_num_threads(saved);
  save_dataset(dir / "mem.pfds", mem);
  const auto b1 = read_file_bytes(dir / "t1.pfds");
  CHECK(b1 == read_file_bytes(dir / "t8.pfds"));
  CHECK(b1 == read_file_bytes(dir / "mem.pfds"));
  CHECK(norm1 == mem.normalization);
}

TEST_CASE("dataset container") {
  const auto dir = testing::scratch_dir("data_io");
  const auto g = geometry(9);
  const auto ds = gen_pairs(50, g, 7);
  save_dataset(dir / "a.pfds", ds);
  const auto back = load_dataset(dir / "a.pfds", g);
  CHECK(back.stimuli == ds.stimuli);
  CHECK(back.percepts == ds.percepts);
  CHECK(back.normalization == ds.normalization);
  CHECK(back.seed == 7);
  CHECK(back.height == 9);

  auto bytes = read_file_bytes(dir / "a.pfds");
  CHECK(bytes.size() == kHeaderBytes + 50 * (81 + 81) * 4);

  SUBCASE("truncated payload") {
    bytes.resize(bytes.size() - 10);
    write_file_bytes(dir / "b.pfds", bytes);
    CHECK_THROWS_AS(load_dataset(dir / "b.pfds"), FormatError);
  }
  SUBCASE("version bump") {
    bytes[4] = 9;
    write_file_bytes(dir / "b.pfds", bytes);
    try {
      load_dataset(dir / "b.pfds");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("regenerate") != std::string::npos);
    }
  }
  SUBCASE("stale geometry") {
    phosim::GeometryParams p;
    p.lambda_um = 1000.0;
    CHECK_THROWS_AS(load_dataset(dir / "a.pfds", phosim::AxonMapGeometry::build(p)), StaleDataError);
    CHECK_THROWS_AS(load_dataset(dir / "a.pfds", geometry(28)), StaleDataError);
  }
}

TEST_CASE("IDX parsing on synthetic files") {
  const auto dir = testing::scratch_dir("idx");
  std::vector<std::uint8_t> img, lab;
  write_be32(img, 2051);
  write_be32(img, 2);
  write_be32(img, 2);
  write_be32(img, 3);
  for (std::uint8_t v : {0, 255, 51, 102, 1, 2, 3, 4, 5, 6, 7, 8}) img.push_back(v);
  write_be32(lab, 2049);
  write_be32(lab, 2);
  lab.push_back(7);
  lab.push_back(0);
  write_file_bytes(dir / "img", img);
  write_file_bytes(dir / "lab", lab);

  const auto set = load_mnist(dir / "img", dir / "lab");
  CHECK(set.count == 2);
  CHECK(set.height == 2);
  CHECK(set.width == 3);
  CHECK(set.images[0] == 0.0f);
  CHECK(set.images[1] == 1.0f);
  CHECK(set.images[2] == static_cast<float>(51 / 255.0));
  CHECK(set.labels == std::vector<std::uint8_t>{7, 0});
  CHECK(load_mnist(dir / "img", dir / "lab", 1).count == 1);

  SUBCASE("magic mismatch names both values") {
    try {
      load_mnist(dir / "lab", dir / "lab");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("2049") != std::string::npos);
      CHECK(msg.find("2051") != std::string::npos);
    }
  }
  SUBCASE("truncated pixels") {
    img.pop_back();
    write_file_bytes(dir / "img2", img);
    try {
      load_mnist(dir / "img2", dir / "lab");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("byte offset 27") != std::string::npos);
    }
  }
}

TEST_CASE("image resize keeps constants") {
  LabeledImageSet s;
  s.count = 1;
  s.height = s.width = 28;
  s.images.assign(784, 0.4f);
  s.labels = {3};
  const auto r = resize_images(s, 9);
  CHECK(r.pixels() == 81);
  for (float v : r.images) CHECK(v == doctest::Approx(0.4f).epsilon(1e-6));
}

#ifdef PHOSFLOW_MNIST_DIR
TEST_CASE("MNIST test split matches reference checksums") {
  const std::filesystem::path dir = PHOSFLOW_MNIST_DIR;
  const auto set = load_mnist(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  CHECK(set.count == 10000);
  CHECK(set.labels.size() == 10000);
  double sum = 0.0;
  for (float v : set.images) sum += std::round(v * 255.0);
  CHECK(sum == 264923200.0);
  long labels = 0;
  for (auto l : set.labels) labels += l;
  CHECK(labels == 44434);
}
#endif

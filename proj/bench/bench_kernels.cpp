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

// Serial reference kernels against the packed/OpenMP ones.

#include <benchmark/benchmark.h>
#include <omp.h>

#include <vector>

#include "phosflow/data.hpp"
#include "phosflow/kernels.hpp"
#include "phosflow/phosim.hpp"
#include "phosflow/rng.hpp"

using namespace phosflow;

namespace {

std::vector<float> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

void BM_GemmReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    kernels::reference::gemm<float>(false, false, n, n, n, a.data(), n, b.data(), n, c.data(), n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

void BM_GemmPacked(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  omp_set_num_threads(static_cast<int>(state.range(1)));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    kernels::gemm<float>(false, false, n, n, n, a.data(), n, b.data(), n, c.data(), n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

const phosim::EffectTable<float>& table28() {
  static const phosim::EffectTable<float> t([] {
    phosim::GeometryParams p;
    p.resolution = 28;
    return phosim::AxonMapGeometry::build(p);
  }());
  return t;
}

std::vector<float> stimuli(std::size_t count) {
  std::vector<float> s;
  for (std::size_t i = 0; i < count; ++i) {
    const auto v = data::sample_stimulus(3, i);
    s.insert(s.end(), v.begin(), v.end());
  }
  return s;
}

void BM_RenderReference(benchmark::State& state) {
  const auto count = static_cast<std::size_t>(state.range(0));
  const auto& t = table28();
  const auto s = stimuli(count);
  std::vector<float> out(count * t.pixel_count());
  for (auto _ : state) {
    phosim::reference::render_batch<float>(t, s, count, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * count));
}

void BM_RenderBatch(benchmark::State& state) {
  const auto count = static_cast<std::size_t>(state.range(0));
  omp_set_num_threads(static_cast<int>(state.range(1)));
  const auto& t = table28();
  const auto s = stimuli(count);
  std::vector<float> out(count * t.pixel_count());
  for (auto _ : state) {
    t.render_batch(s, count, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * count));
}

}  // namespace

BENCHMARK(BM_GemmReference)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GemmPacked)->ArgsProduct({{128, 256, 512}, {1, 2, 4, 8}})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_RenderReference)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RenderBatch)->ArgsProduct({{256}, {1, 2, 4, 8}})->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();

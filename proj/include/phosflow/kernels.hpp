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

#ifndef PHOSFLOW_KERNELS_HPP
#define PHOSFLOW_KERNELS_HPP

// Dense compute kernels. Every kernel in `kernels` has a serial counterpart
// in `kernels::reference` that the tests and the benchmark compare against.
// Parallel kernels partition output rows statically and never split a
// reduction across threads, so results do not depend on the thread count.

#include <algorithm>
#include <cstddef>
#include <vector>

#include <omp.h>

namespace phosflow::kernels {

void set_num_threads(int n);
int max_threads();

namespace reference {

/// C = op(A) * op(B) (+ C when accumulate). op(X) is X or X^T.
/// A is M x K after op, B is K x N after op, all row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + acc : acc;
    }
  }
}

}  // namespace reference

namespace detail {

template <typename T>
struct Tile {
  using Vec [[gnu::vector_size(64)]] = T;
  static constexpr std::size_t kLanes = 64 / sizeof(T);
  static constexpr std::size_t kVecs = 2;
  static constexpr std::size_t kRows = 8;
  static constexpr std::size_t kCols = kLanes * kVecs;
};

template <typename T>
void pack_b(bool trans_b, std::size_t n, std::size_t k, const T* b, std::size_t ldb,
            std::vector<T>& out) {
  constexpr std::size_t nr = Tile<T>::kCols;
  const std::size_t panels = (n + nr - 1) / nr;
  out.assign(panels * k * nr, T(0));
#pragma omp parallel for schedule(static) if (panels * k * nr > (1u << 16))
  for (std::size_t pj = 0; pj < panels; ++pj) {
    T* dst = out.data() + pj * k * nr;
    const std::size_t j0 = pj * nr;
    const std::size_t w = std::min(nr, n - j0);
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t j = 0; j < w; ++j) {
        dst[p * nr + j] = trans_b ? b[(j0 + j) * ldb + p] : b[p * ldb + j0 + j];
      }
    }
  }
}

template <typename T>
void pack_a(bool trans_a, std::size_t rows, std::size_t i0, std::size_t k, const T* a,
            std::size_t lda, T* dst) {
  constexpr std::size_t mr = Tile<T>::kRows;
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t r = 0; r < mr; ++r) {
      T v = T(0);
      if (r < rows) v = trans_a ? a[p * lda + i0 + r] : a[(i0 + r) * lda + p];
      dst[p * mr + r] = v;
    }
  }
}

template <typename T>
inline void micro_kernel(std::size_t k, const T* __restrict ap, const T* __restrict bp,
                         T (&acc)[Tile<T>::kRows][Tile<T>::kCols]) {
  using Tl = Tile<T>;
  using Vec = typename Tl::Vec;
  constexpr std::size_t mr = Tl::kRows;
  constexpr std::size_t nv = Tl::kVecs;
  Vec sum[mr][nv];
  for (std::size_t r = 0; r < mr; ++r)
    for (std::size_t v = 0; v < nv; ++v) sum[r][v] = Vec{};
  for (std::size_t p = 0; p < k; ++p) {
    Vec bv[nv];
    for (std::size_t v = 0; v < nv; ++v)
      __builtin_memcpy(&bv[v], bp + p * Tl::kCols + v * Tl::kLanes, sizeof(Vec));
    const T* acol = ap + p * mr;
    for (std::size_t r = 0; r < mr; ++r) {
      const T av = acol[r];
      for (std::size_t v = 0; v < nv; ++v) sum[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < mr; ++r)
    for (std::size_t v = 0; v < nv; ++v)
      __builtin_memcpy(&acc[r][v * Tl::kLanes], &sum[r][v], sizeof(Vec));
}

}  // namespace detail

/// Packed, register-tiled GEMM. Same contract as reference::gemm.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  using Tl = detail::Tile<T>;
  constexpr std::size_t mr = Tl::kRows;
  constexpr std::size_t nr = Tl::kCols;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
    return;
  }
  std::vector<T> bpack;
  detail::pack_b(trans_b, n, k, b, ldb, bpack);
  const std::size_t row_blocks = (m + mr - 1) / mr;
  const std::size_t panels = (n + nr - 1) / nr;
  const bool big = m * n * k > (1u << 18);
#pragma omp parallel if (big)
  {
    std::vector<T> apack(k * mr);
    alignas(64) T acc[mr][nr];
#pragma omp for schedule(static)
    for (std::size_t bi = 0; bi < row_blocks; ++bi) {
      const std::size_t i0 = bi * mr;
      const std::size_t rows = std::min(mr, m - i0);
      detail::pack_a(trans_a, rows, i0, k, a, lda, apack.data());
      for (std::size_t pj = 0; pj < panels; ++pj) {
        const std::size_t j0 = pj * nr;
        const std::size_t w = std::min(nr, n - j0);
        detail::micro_kernel<T>(k, apack.data(), bpack.data() + pj * k * nr, acc);
        for (std::size_t r = 0; r < rows; ++r) {
          T* crow = c + (i0 + r) * ldc + j0;
          if (accumulate) {
            for (std::size_t j = 0; j < w; ++j) crow[j] += acc[r][j];
          } else {
            for (std::size_t j = 0; j < w; ++j) crow[j] = acc[r][j];
          }
        }
      }
    }
  }
}

}  // namespace phosflow::kernels

#endif  // PHOSFLOW_KERNELS_HPP

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

#include "phosflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "phosflow/kernels.hpp"

namespace phosflow {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace kernels {
void set_num_threads(int n) { omp_set_num_threads(std::max(1, n)); }
int max_threads() { return omp_get_max_threads(); }
}  // namespace kernels

}  // namespace phosflow

namespace phosflow::ad {

namespace {

constexpr std::size_t kParallelMin = 1u << 15;

template <typename T>
GradientTape<T>*& active_tape() {
  thread_local GradientTape<T>* tape = nullptr;
  return tape;
}

template <typename T>
T* grad_buffer(Node<T>& n) {
  if (n.grad.empty() && n.value.size() != 0) n.grad = Array<T>(n.value.shape(), T(0));
  return n.grad.data();
}

// Creates the result node; `make_backward` is only invoked when the op is
// actually recorded, so inference pays nothing for closures.
template <typename T, typename F>
Tensor<T> emit(Array<T> value, std::initializer_list<const Tensor<T>*> inputs, F&& make_backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (auto* tape = active_tape<T>()) {
    bool needed = false;
    for (const auto* in : inputs) needed = needed || in->requires_grad();
    if (needed) {
      node->requires_grad = true;
      node->backward = make_backward();
      tape->record(node);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

void require(bool ok, const char* op, const Shape& a, const Shape& b) {
  if (!ok) throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not conform");
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  const std::size_t na = shape_size(a), nb = shape_size(b);
  if (nb == 1) return a;
  if (na == 1) return b;
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
  };
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  require(false, op, a, b);
  return {};
}

// Shared driver for binary elementwise ops. `f(x, y)` computes the value,
// `da(x, y, out, g)` / `db(...)` the partial contributions.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  const Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
  Array<T> out(out_shape);
  const std::size_t n = out.size();
  const std::size_t na = a.size(), nb = b.size();
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  if (na == n && nb == n) {
#pragma omp parallel for simd if (n > kParallelMin)
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i % na], pb[i % nb]);
  }
  auto an = a.node(), bn = b.node();
  return emit<T>(std::move(out), {&a, &b}, [=]() {
    return [=](const Node<T>& self) {
      const T* g = self.grad.data();
      const T* o = self.value.data();
      const T* xa = an->value.data();
      const T* xb = bn->value.data();
      if (an->requires_grad) {
        T* ga = grad_buffer(*an);
        if (na == n) {
#pragma omp parallel for simd if (n > kParallelMin)
          for (std::size_t i = 0; i < n; ++i) ga[i] += da(xa[i], xb[i % nb], o[i], g[i]);
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[i % na] += da(xa[i % na], xb[i % nb], o[i], g[i]);
        }
      }
      if (bn->requires_grad) {
        T* gb = grad_buffer(*bn);
        if (nb == n) {
#pragma omp parallel for simd if (n > kParallelMin)
          for (std::size_t i = 0; i < n; ++i) gb[i] += db(xa[i % na], xb[i], o[i], g[i]);
        } else {
          for (std::size_t i = 0; i < n; ++i) gb[i % nb] += db(xa[i % na], xb[i % nb], o[i], g[i]);
        }
      }
    };
  });
}

// Unary elementwise op; `d(x, out, g)` is the input gradient.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, F f, D d) {
  Array<T> out(a.shape());
  const std::size_t n = out.size();
  const T* pa = a.value().data();
  T* po = out.data();
#pragma omp parallel for simd if (n > kParallelMin)
  for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  auto an = a.node();
  return emit<T>(std::move(out), {&a}, [=]() {
    return [=](const Node<T>& self) {
      T* ga = grad_buffer(*an);
      const T* x = an->value.data();
      const T* o = self.value.data();
      const T* g = self.grad.data();
#pragma omp parallel for simd if (n > kParallelMin)
      for (std::size_t i = 0; i < n; ++i) ga[i] += d(x[i], o[i], g[i]);
    };
  });
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---------------------------------------------------------------- Node/Tensor

template <typename T>
void Node<T>::accumulate(const Array<T>& g) {
  if (g.size() != value.size()) throw ShapeError("gradient " + shape_str(g.shape()) + " for value " + shape_str(value.shape()));
  accumulate(g.data());
}

template <typename T>
void Node<T>::accumulate(const T* g) {
  T* dst = grad_buffer(*this);
  const std::size_t n = value.size();
  for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

template <typename T>
Tensor<T>::Tensor(Array<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
const Array<T>* Tensor<T>::grad() const {
  if (!node_ || node_->grad.empty()) return nullptr;
  return &node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad = Array<T>();
}

template <typename T>
GradientTape<T>::GradientTape() : previous_(active_tape<T>()) {
  active_tape<T>() = this;
}

template <typename T>
GradientTape<T>::~GradientTape() {
  active_tape<T>() = previous_;
}

template <typename T>
GradientTape<T>* GradientTape<T>::active() {
  return active_tape<T>();
}

template <typename T>
void GradientTape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw ContractError("GradientTape::backward called twice without reset()");
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("GradientTape::backward needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  consumed_ = true;
  if (!loss.requires_grad()) return;
  const T one = T(1);
  loss.node()->accumulate(&one);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
}

template <typename T>
void GradientTape<T>::reset() {
  nodes_.clear();
  consumed_ = false;
}

template <typename T>
NoGrad<T>::NoGrad() : saved_(active_tape<T>()) {
  active_tape<T>() = nullptr;
}

template <typename T>
NoGrad<T>::~NoGrad() {
  active_tape<T>() = saved_;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("add", a, b, [](T x, T y) { return x + y; },
                   [](T, T, T, T g) { return g; }, [](T, T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("sub", a, b, [](T x, T y) { return x - y; },
                   [](T, T, T, T g) { return g; }, [](T, T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("mul", a, b, [](T x, T y) { return x * y; },
                   [](T, T y, T, T g) { return g * y; }, [](T x, T, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("div", a, b, [](T x, T y) { return x / y; },
                   [](T, T y, T, T g) { return g / y; },
                   [](T, T y, T o, T g) { return -g * o / y; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x + s; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x * s; }, [s](T, T, T g) { return g * s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return -x; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T o, T g) { return g * o; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <typename T>
Tensor<T> atan(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return std::atan(x); }, [](T x, T, T g) { return g / (T(1) + x * x); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return x * x; }, [](T x, T, T g) { return T(2) * x * g; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return std::sqrt(x); }, [](T, T o, T g) { return g * T(0.5) / o; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> elu(const Tensor<T>& a, T alpha) {
  return unary<T>(a, [alpha](T x) { return x > T(0) ? x : alpha * std::expm1(x); },
                  [alpha](T x, T o, T g) { return x > T(0) ? g : g * (o + alpha); });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.value().values()) acc += v;
  auto an = a.node();
  return emit<T>(Array<T>::scalar(static_cast<T>(acc)), {&a}, [=]() {
    return [=](const Node<T>& self) {
      T* ga = grad_buffer(*an);
      const T g = self.grad[0];
      for (std::size_t i = 0; i < an->value.size(); ++i) ga[i] += g;
    };
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Array<T> out(out_shape);
  const T* x = a.value().data();
  T* o = out.data();
  for (std::size_t p = 0; p < s.outer; ++p)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t q = 0; q < s.inner; ++q) o[p * s.inner + q] += x[(p * s.n + k) * s.inner + q];
  auto an = a.node();
  return emit<T>(std::move(out), {&a}, [=]() {
    return [=](const Node<T>& self) {
      T* ga = grad_buffer(*an);
      const T* g = self.grad.data();
      for (std::size_t p = 0; p < s.outer; ++p)
        for (std::size_t k = 0; k < s.n; ++k)
          for (std::size_t q = 0; q < s.inner; ++q) ga[(p * s.n + k) * s.inner + q] += g[p * s.inner + q];
    };
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  const std::size_t n = a.shape().at(axis);
  if (n == 0) throw ShapeError("mean over empty axis");
  return mul_scalar(sum_axis(a, axis), T(1) / static_cast<T>(n));
}

template <typename T>
Tensor<T> max_last(const Tensor<T>& a) {
  if (a.shape().empty() || a.shape().back() == 0) throw ShapeError("max_last on " + shape_str(a.shape()));
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Array<T> out(out_shape);
  std::vector<std::size_t> arg(rows);
  const T* x = a.value().data();
#pragma omp parallel for if (a.size() > kParallelMin)
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x + r * n;
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (row[j] > row[best]) best = j;
    arg[r] = best;
    out[r] = row[best];
  }
  auto an = a.node();
  return emit<T>(std::move(out), {&a}, [&]() {
    return [an, n, arg = std::move(arg)](const Node<T>& self) {
      T* ga = grad_buffer(*an);
      const T* g = self.grad.data();
      for (std::size_t r = 0; r < arg.size(); ++r) ga[r * n + arg[r]] += g[r];
    };
  });
}

// ---------------------------------------------------------------- structure

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  Array<T> out = a.value().reshaped(std::move(shape));
  auto an = a.node();
  return emit<T>(std::move(out), {&a}, [=]() {
    return [=](const Node<T>& self) { an->accumulate(self.grad.data()); };
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_at(a.shape(), axis);
  if (begin > end || end > s.n) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") of axis " +
                     std::to_string(axis) + " in " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = w;
  Array<T> out(out_shape);
  const T* x = a.value().data();
  T* o = out.data();
  for (std::size_t p = 0; p < s.outer; ++p)
    std::copy_n(x + (p * s.n + begin) * s.inner, w * s.inner, o + p * w * s.inner);
  auto an = a.node();
  return emit<T>(std::move(out), {&a}, [=]() {
    return [=](const Node<T>& self) {
      T* ga = grad_buffer(*an);
      const T* g = self.grad.data();
      for (std::size_t p = 0; p < s.outer; ++p) {
        T* dst = ga + (p * s.n + begin) * s.inner;
        const T* src = g + p * w * s.inner;
        for (std::size_t i = 0; i < w * s.inner; ++i) dst[i] += src[i];
      }
    };
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    require(ok, "concat", ref, s);
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit so = split_at(out_shape, axis);
  Array<T> out(out_shape);
  std::vector<std::size_t> widths, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis];
    const T* x = p.value().data();
    for (std::size_t q = 0; q < so.outer; ++q)
      std::copy_n(x + q * w * so.inner, w * so.inner, out.data() + (q * total + off) * so.inner);
    widths.push_back(w);
    offsets.push_back(off);
    off += w;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  bool any = false;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    any = any || p.requires_grad();
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  auto* tape = active_tape<T>();
  if (tape && any) {
    node->requires_grad = true;
    node->backward = [=](const Node<T>& self) {
      const T* g = self.grad.data();
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (!nodes[k]->requires_grad) continue;
        T* gp = grad_buffer(*nodes[k]);
        const std::size_t w = widths[k];
        for (std::size_t q = 0; q < so.outer; ++q) {
          const T* src = g + (q * total + offsets[k]) * so.inner;
          T* dst = gp + q * w * so.inner;
          for (std::size_t i = 0; i < w * so.inner; ++i) dst[i] += src[i];
        }
      }
    };
    tape->record(node);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
Tensor<T> gather_last(const Tensor<T>& a, std::span<const std::size_t> index) {
  if (a.shape().empty()) throw ShapeError("gather_last on a scalar");
  const std::size_t n = a.shape().back();
  for (auto i : index)
    if (i >= n) throw ShapeError("gather_last index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  const std::size_t m = index.size();
  const std::size_t rows = a.size() / std::max<std::size_t>(n, 1);
  Shape out_shape = a.shape();
  out_shape.back() = m;
  Array<T> out(out_shape);
  const T* x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = x[r * n + index[j]];
  auto an = a.node();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return emit<T>(std::move(out), {&a}, [&]() {
    return [an, n, m, rows, idx = std::move(idx)](const Node<T>& self) {
      T* ga = grad_buffer(*an);
      const T* g = self.grad.data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) ga[r * n + idx[j]] += g[r * m + j];
    };
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Array<T> out(Shape{c, r});
  const T* x = a.value().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  auto an = a.node();
  return emit<T>(std::move(out), {&a}, [=]() {
    return [=](const Node<T>& self) {
      T* ga = grad_buffer(*an);
      const T* g = self.grad.data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    };
  });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0), "matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array<T> out(Shape{m, n});
  kernels::gemm<T>(false, false, m, n, k, a.value().data(), k, b.value().data(), n, out.data(), n, false);
  auto an = a.node(), bn = b.node();
  return emit<T>(std::move(out), {&a, &b}, [=]() {
    return [=](const Node<T>& self) {
      const T* g = self.grad.data();
      if (an->requires_grad) {
        // dA = G * B^T
        kernels::gemm<T>(false, true, m, k, n, g, n, bn->value.data(), n, grad_buffer(*an), k, true);
      }
      if (bn->requires_grad) {
        // dB = A^T * G
        kernels::gemm<T>(true, false, k, n, m, an->value.data(), k, g, n, grad_buffer(*bn), n, true);
      }
    };
  });
}

namespace {

// rows = samples [b0, b0+cb) x pixels; cols = C*9 patch entries.
template <typename T>
void im2col3(const T* x, std::size_t b0, std::size_t cb, std::size_t c, std::size_t h, std::size_t w, T* cols) {
  const std::size_t hw = h * w, c9 = c * 9;
#pragma omp parallel for schedule(static) if (cb * hw * c9 > kParallelMin)
  for (std::size_t r = 0; r < cb * hw; ++r) {
    const std::size_t b = b0 + r / hw;
    const std::size_t y = (r % hw) / w, xx = r % w;
    T* dst = cols + r * c9;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* img = x + (b * c + ch) * hw;
      for (int ky = 0; ky < 3; ++ky) {
        const long yy = static_cast<long>(y) + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const long xs = static_cast<long>(xx) + kx - 1;
          const bool inside = yy >= 0 && yy < static_cast<long>(h) && xs >= 0 && xs < static_cast<long>(w);
          *dst++ = inside ? img[yy * static_cast<long>(w) + xs] : T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im3(const T* cols, std::size_t b0, std::size_t cb, std::size_t c, std::size_t h, std::size_t w, T* dx) {
  const std::size_t hw = h * w, c9 = c * 9;
#pragma omp parallel for schedule(static) if (cb * hw * c9 > kParallelMin)
  for (std::size_t bl = 0; bl < cb; ++bl) {
    const std::size_t b = b0 + bl;
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t y = p / w, xx = p % w;
      const T* src = cols + (bl * hw + p) * c9;
      for (std::size_t ch = 0; ch < c; ++ch) {
        T* img = dx + (b * c + ch) * hw;
        for (int ky = 0; ky < 3; ++ky) {
          const long yy = static_cast<long>(y) + ky - 1;
          for (int kx = 0; kx < 3; ++kx, ++src) {
            const long xs = static_cast<long>(xx) + kx - 1;
            if (yy >= 0 && yy < static_cast<long>(h) && xs >= 0 && xs < static_cast<long>(w))
              img[yy * static_cast<long>(w) + xs] += *src;
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == 3 && ws[3] == 3, "conv2d", xs, ws);
  require(bias.shape() == Shape{ws[0]}, "conv2d bias", ws, bias.shape());
  const std::size_t nb = xs[0], c = xs[1], h = xs[2], w = xs[3], o = ws[0];
  const std::size_t hw = h * w, c9 = c * 9;
  const std::size_t chunk = std::max<std::size_t>(1, (std::size_t{1} << 22) / std::max<std::size_t>(1, hw * c9));
  Array<T> out(Shape{nb, o, h, w});
  {
    std::vector<T> cols, rows;
    for (std::size_t b0 = 0; b0 < nb; b0 += chunk) {
      const std::size_t cb = std::min(chunk, nb - b0);
      cols.resize(cb * hw * c9);
      rows.resize(cb * hw * o);
      im2col3(x.value().data(), b0, cb, c, h, w, cols.data());
      kernels::gemm<T>(false, true, cb * hw, o, c9, cols.data(), c9, weight.value().data(), c9, rows.data(), o, false);
      const T* bv = bias.value().data();
      for (std::size_t bl = 0; bl < cb; ++bl)
        for (std::size_t ch = 0; ch < o; ++ch) {
          T* dst = out.data() + ((b0 + bl) * o + ch) * hw;
          for (std::size_t p = 0; p < hw; ++p) dst[p] = rows[(bl * hw + p) * o + ch] + bv[ch];
        }
    }
  }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return emit<T>(std::move(out), {&x, &weight, &bias}, [=]() {
    return [=](const Node<T>& self) {
      const T* g = self.grad.data();
      if (bn->requires_grad) {
        T* gb = grad_buffer(*bn);
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t ch = 0; ch < o; ++ch) {
            const T* src = g + (b * o + ch) * hw;
            T acc = T(0);
            for (std::size_t p = 0; p < hw; ++p) acc += src[p];
            gb[ch] += acc;
          }
      }
      if (!xn->requires_grad && !wn->requires_grad) return;
      std::vector<T> cols, grows, dcols;
      for (std::size_t b0 = 0; b0 < nb; b0 += chunk) {
        const std::size_t cb = std::min(chunk, nb - b0);
        grows.resize(cb * hw * o);
        for (std::size_t bl = 0; bl < cb; ++bl)
          for (std::size_t ch = 0; ch < o; ++ch) {
            const T* src = g + ((b0 + bl) * o + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) grows[(bl * hw + p) * o + ch] = src[p];
          }
        if (wn->requires_grad) {
          cols.resize(cb * hw * c9);
          im2col3(xn->value.data(), b0, cb, c, h, w, cols.data());
          kernels::gemm<T>(true, false, o, c9, cb * hw, grows.data(), o, cols.data(), c9, grad_buffer(*wn), c9, true);
        }
        if (xn->requires_grad) {
          dcols.resize(cb * hw * c9);
          kernels::gemm<T>(false, false, cb * hw, c9, o, grows.data(), o, wn->value.data(), c9, dcols.data(), c9, false);
          col2im3(dcols.data(), b0, cb, c, h, w, grad_buffer(*xn));
        }
      }
    };
  });
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("avg_pool2 needs [B,C,H,W] with even H,W, got " + shape_str(s));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  Array<T> out(Shape{s[0], s[1], oh, ow});
  const T* xv = x.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const T* src = xv + p * h * w + 2 * i * w + 2 * j;
        out[(p * oh + i) * ow + j] = T(0.25) * (src[0] + src[1] + src[w] + src[w + 1]);
      }
  auto xn = x.node();
  return emit<T>(std::move(out), {&x}, [=]() {
    return [=](const Node<T>& self) {
      T* gx = grad_buffer(*xn);
      const T* g = self.grad.data();
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const T v = T(0.25) * g[(p * oh + i) * ow + j];
            T* dst = gx + p * h * w + 2 * i * w + 2 * j;
            dst[0] += v;
            dst[1] += v;
            dst[w] += v;
            dst[w + 1] += v;
          }
    };
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  if (a.shape().empty()) throw ShapeError("log_softmax on a scalar");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Array<T> out(a.shape());
  const T* x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x + r * n;
    const T mx = *std::max_element(row, row + n);
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - lse;
  }
  auto an = a.node();
  return emit<T>(std::move(out), {&a}, [=]() {
    return [=](const Node<T>& self) {
      T* ga = grad_buffer(*an);
      const T* g = self.grad.data();
      const T* o = self.value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        T gs = T(0);
        for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r * n + j] - std::exp(o[r * n + j]) * gs;
      }
    };
  });
}

template <typename T>
Tensor<T> pairwise_sqdist(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(1), "pairwise_sqdist", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = b.dim(0), n = a.dim(1);
  const T* av = a.value().data();
  const T* bv = b.value().data();
  std::vector<T> ra(m), rb(k);
  for (std::size_t i = 0; i < m; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * av[i * n + j];
    ra[i] = s;
  }
  for (std::size_t i = 0; i < k; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += bv[i * n + j] * bv[i * n + j];
    rb[i] = s;
  }
  Array<T> out(Shape{m, k});
  kernels::gemm<T>(false, true, m, k, n, av, n, bv, n, out.data(), k, false);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = std::max(T(0), ra[i] + rb[j] - T(2) * out[i * k + j]);
  auto an = a.node(), bn = b.node();
  return emit<T>(std::move(out), {&a, &b}, [=]() {
    return [=](const Node<T>& self) {
      const T* g = self.grad.data();
      const T* xa = an->value.data();
      const T* xb = bn->value.data();
      if (an->requires_grad) {
        // dA = 2 (diag(G 1) A - G B)
        T* ga = grad_buffer(*an);
        std::vector<T> gb(m * n);
        kernels::gemm<T>(false, false, m, n, k, g, k, xb, n, gb.data(), n, false);
        for (std::size_t i = 0; i < m; ++i) {
          T rs = T(0);
          for (std::size_t j = 0; j < k; ++j) rs += g[i * k + j];
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += T(2) * rs * xa[i * n + j] - T(2) * gb[i * n + j];
        }
      }
      if (bn->requires_grad) {
        // dB = 2 (diag(G^T 1) B - G^T A)
        T* gbuf = grad_buffer(*bn);
        std::vector<T> ga(k * n);
        kernels::gemm<T>(true, false, k, n, m, g, k, xa, n, ga.data(), n, false);
        for (std::size_t j = 0; j < k; ++j) {
          T cs = T(0);
          for (std::size_t i = 0; i < m; ++i) cs += g[i * k + j];
          for (std::size_t t = 0; t < n; ++t) gbuf[j * n + t] += T(2) * cs * xb[j * n + t] - T(2) * ga[j * n + t];
        }
      }
    };
  });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                     bool training) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("batch_norm needs at least [B,F], got " + shape_str(s));
  const std::size_t nb = s[0], c = s[1];
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, "batch_norm affine", s, gamma.shape());
  if (state.running_mean.size() != c) {
    state.running_mean = Array<T>(Shape{c}, T(0));
    state.running_var = Array<T>(Shape{c}, T(1));
  }
  const std::size_t count = nb * inner;
  if (training && count < 2) throw ContractError("batch_norm training mode needs more than one value per channel");
  const T* xv = x.value().data();
  std::vector<T> mu(c), invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double m = 0.0, v = 0.0;
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t p = 0; p < inner; ++p) m += xv[(b * c + ch) * inner + p];
      m /= static_cast<double>(count);
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t p = 0; p < inner; ++p) {
          const double d = xv[(b * c + ch) * inner + p] - m;
          v += d * d;
        }
      const double var = v / static_cast<double>(count);
      mu[ch] = static_cast<T>(m);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      const double unbiased = v / static_cast<double>(count - 1);
      state.running_mean[ch] = (T(1) - state.momentum) * state.running_mean[ch] + state.momentum * static_cast<T>(m);
      state.running_var[ch] = (T(1) - state.momentum) * state.running_var[ch] + state.momentum * static_cast<T>(unbiased);
    } else {
      mu[ch] = state.running_mean[ch];
      invstd[ch] = T(1) / std::sqrt(state.running_var[ch] + state.eps);
    }
  }
  Array<T> out(s);
  Array<T> xhat(s);
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = (b * c + ch) * inner + p;
        xhat[i] = (xv[i] - mu[ch]) * invstd[ch];
        out[i] = gv[ch] * xhat[i] + bv[ch];
      }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return emit<T>(std::move(out), {&x, &gamma, &beta}, [&]() {
    return [=, xhat = std::move(xhat)](const Node<T>& self) {
      const T* g = self.grad.data();
      std::vector<T> sg(c, T(0)), sgx(c, T(0));
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < inner; ++p) {
            const std::size_t i = (b * c + ch) * inner + p;
            sg[ch] += g[i];
            sgx[ch] += g[i] * xhat[i];
          }
      if (gn->requires_grad) {
        T* gg = grad_buffer(*gn);
        for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sgx[ch];
      }
      if (bn->requires_grad) {
        T* gb = grad_buffer(*bn);
        for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sg[ch];
      }
      if (!xn->requires_grad) return;
      T* gx = grad_buffer(*xn);
      const T* gam = gn->value.data();
      const T inv_n = T(1) / static_cast<T>(count);
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < inner; ++p) {
            const std::size_t i = (b * c + ch) * inner + p;
            if (training) {
              gx[i] += gam[ch] * invstd[ch] * (g[i] - inv_n * sg[ch] - xhat[i] * inv_n * sgx[ch]);
            } else {
              gx[i] += gam[ch] * invstd[ch] * g[i];
            }
          }
    };
  });
}

// ---------------------------------------------------------------- instantiation

#define PHOSFLOW_INSTANTIATE(T)                                                                          \
  template struct Node<T>;                                                                               \
  template class Tensor<T>;                                                                              \
  template class GradientTape<T>;                                                                        \
  template class NoGrad<T>;                                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                    \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                                    \
  template Tensor<T> neg(const Tensor<T>&);                                                              \
  template Tensor<T> exp(const Tensor<T>&);                                                              \
  template Tensor<T> log(const Tensor<T>&);                                                              \
  template Tensor<T> atan(const Tensor<T>&);                                                             \
  template Tensor<T> square(const Tensor<T>&);                                                           \
  template Tensor<T> sqrt(const Tensor<T>&);                                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> elu(const Tensor<T>&, T);                                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                              \
  template Tensor<T> mean(const Tensor<T>&);                                                             \
  template Tensor<T> sum_axis(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> max_last(const Tensor<T>&);                                                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                 \
  template Tensor<T> gather_last(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> transpose(const Tensor<T>&);                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                                        \
  template Tensor<T> log_softmax(const Tensor<T>&);                                                      \
  template Tensor<T> pairwise_sqdist(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&, bool);

PHOSFLOW_INSTANTIATE(float)
PHOSFLOW_INSTANTIATE(double)

#undef PHOSFLOW_INSTANTIATE

}  // namespace phosflow::ad

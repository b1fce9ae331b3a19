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

#ifndef PHOSFLOW_AUTODIFF_HPP
#define PHOSFLOW_AUTODIFF_HPP

// Reverse-mode automatic differentiation over dense arrays.
//
// A Tensor is a shared handle to a graph node. Operations record themselves
// on the GradientTape that is active on the calling thread, but only when at
// least one input requires a gradient; without an active tape every op is a
// plain forward evaluation. Gradients accumulate additively into leaves.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "phosflow/array.hpp"

namespace phosflow::ad {

template <typename T>
struct Node {
  Array<T> value;
  Array<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::function<void(const Node&)> backward;

  void accumulate(const Array<T>& g);
  void accumulate(const T* g);  // g holds value.size() elements
  bool has_grad() const { return !grad.empty() || value.size() == 0; }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Array<T> value, bool requires_grad = false);
  static Tensor parameter(Array<T> value) { return Tensor(std::move(value), true); }
  static Tensor constant(Array<T> value) { return Tensor(std::move(value), false); }
  static Tensor scalar(T v) { return Tensor(Array<T>::scalar(v)); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Array<T>& value() const { return node_->value; }
  // In-place access for optimizers and initializers; leaves only.
  Array<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value.item(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  // Null when no gradient reached this tensor.
  const Array<T>* grad() const;
  void zero_grad();

  Tensor detach() const { return Tensor(node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }
  static Tensor from_node(std::shared_ptr<Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class GradientTape {
 public:
  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  /// Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse.
  /// Throws ContractError for a non-scalar loss or a second call before reset().
  void backward(const Tensor<T>& loss);
  void reset();
  std::size_t size() const noexcept { return nodes_.size(); }

  void record(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }
  static GradientTape* active();

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  GradientTape* previous_ = nullptr;
  bool consumed_ = false;
};

/// Disables recording on this thread for its lifetime.
template <typename T>
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  GradientTape<T>* saved_;
};

// ---- elementwise (broadcast: equal shapes, size-1 operand, or shape suffix)
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> atan(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> elu(const Tensor<T>& a, T alpha = T(1));
template <typename T> Tensor<T> clamp_at_zero(const Tensor<T>& a) { return relu(a); }

// ---- reductions
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis);
/// Maximum over the last axis; the gradient routes to the first maximizer.
template <typename T> Tensor<T> max_last(const Tensor<T>& a);

// ---- structure
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
/// out[..., j] = a[..., index[j]]
template <typename T> Tensor<T> gather_last(const Tensor<T>& a, std::span<const std::size_t> index);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

// ---- linear algebra and layers
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x [B,C,H,W], weight [O,C,3,3], bias [O]; stride 1, zero padding keeps H x W.
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
/// 2x2 average pooling, stride 2 (H, W even).
template <typename T> Tensor<T> avg_pool2(const Tensor<T>& x);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a);
/// out[i,j] = ||a_i - b_j||^2 for a [m,n], b [k,n].
template <typename T> Tensor<T> pairwise_sqdist(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct BatchNormState {
  Array<T> running_mean;
  Array<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};
/// Normalizes over every axis except axis 1 (features/channels).
/// Training mode uses batch statistics and updates the running estimates;
/// inference mode is the affine map gamma * (x - mean) / sqrt(var + eps) + beta.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }

}  // namespace phosflow::ad

#endif  // PHOSFLOW_AUTODIFF_HPP

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

#ifndef PHOSFLOW_NN_HPP
#define PHOSFLOW_NN_HPP

// Small layer toolkit shared by the flows, the baselines and the classifier.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "phosflow/autodiff.hpp"
#include "phosflow/checkpoint.hpp"
#include "phosflow/rng.hpp"

namespace phosflow::nn {

/// Ordered, named handles onto a model's trainable tensors.
template <typename T>
class ParameterList {
 public:
  void add(std::string name, const ad::Tensor<T>& t) { items_.emplace_back(std::move(name), t); }

  std::vector<ad::Tensor<T>> tensors() const {
    std::vector<ad::Tensor<T>> out;
    for (const auto& [n, t] : items_) out.push_back(t);
    return out;
  }
  const std::vector<std::pair<std::string, ad::Tensor<T>>>& items() const { return items_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }

  void save_to(Checkpoint& ck) const {
    for (const auto& [name, t] : items_) ck.put(name, t.value());
  }
  void load_from(const Checkpoint& ck) {
    for (auto& [name, t] : items_) {
      Array<T> v = ck.template get<T>(name);
      if (v.shape() != t.shape()) {
        throw FormatError("checkpoint entry '" + name + "' has shape " + shape_str(v.shape()) + ", model expects " +
                          shape_str(t.shape()));
      }
      t.mutable_value() = std::move(v);
    }
  }

 private:
  std::vector<std::pair<std::string, ad::Tensor<T>>> items_;
};

template <typename T>
Array<T> uniform_array(Shape shape, double bound, Rng& rng) {
  Array<T> a(std::move(shape));
  for (auto& v : a.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return a;
}

/// y = x W + b with W [in, out].
template <typename T>
struct Linear {
  ad::Tensor<T> weight;
  ad::Tensor<T> bias;  // undefined when constructed without bias

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true, double scale = 1.0) {
    const double bound = scale / std::sqrt(static_cast<double>(std::max<std::size_t>(in, 1)));
    weight = ad::Tensor<T>::parameter(uniform_array<T>({in, out}, bound, rng));
    if (with_bias) bias = ad::Tensor<T>::parameter(uniform_array<T>({out}, bound, rng));
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const {
    auto y = ad::matmul(x, weight);
    return bias.defined() ? ad::add(y, bias) : y;
  }

  void collect(const std::string& prefix, ParameterList<T>& params) const {
    params.add(prefix + ".weight", weight);
    if (bias.defined()) params.add(prefix + ".bias", bias);
  }
};

template <typename T>
struct Conv3x3 {
  ad::Tensor<T> weight;  // [out, in, 3, 3]
  ad::Tensor<T> bias;

  Conv3x3() = default;
  Conv3x3(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * 9));
    weight = ad::Tensor<T>::parameter(uniform_array<T>({out, in, 3, 3}, bound, rng));
    bias = ad::Tensor<T>::parameter(uniform_array<T>({out}, bound, rng));
  }

  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const { return ad::conv2d(x, weight, bias); }

  void collect(const std::string& prefix, ParameterList<T>& params) const {
    params.add(prefix + ".weight", weight);
    params.add(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNorm {
  ad::Tensor<T> gamma;
  ad::Tensor<T> beta;
  ad::BatchNormState<T> state;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t features)
      : gamma(ad::Tensor<T>::parameter(Array<T>({features}, T(1)))),
        beta(ad::Tensor<T>::parameter(Array<T>({features}, T(0)))) {
    state.running_mean = Array<T>({features}, T(0));
    state.running_var = Array<T>({features}, T(1));
  }

  ad::Tensor<T> operator()(const ad::Tensor<T>& x, bool training) { return ad::batch_norm(x, gamma, beta, state, training); }

  void collect(const std::string& prefix, ParameterList<T>& params) const {
    params.add(prefix + ".gamma", gamma);
    params.add(prefix + ".beta", beta);
  }
  void save_buffers(const std::string& prefix, Checkpoint& ck) const {
    ck.put(prefix + ".running_mean", state.running_mean);
    ck.put(prefix + ".running_var", state.running_var);
  }
  void load_buffers(const std::string& prefix, const Checkpoint& ck) {
    state.running_mean = ck.template get<T>(prefix + ".running_mean");
    state.running_var = ck.template get<T>(prefix + ".running_var");
  }
};

/// Copies rows [begin, end) of a row-major [n, width] buffer into a tensor.
template <typename T, typename U>
ad::Tensor<T> rows_tensor(const std::vector<U>& data, std::size_t width, std::size_t begin, std::size_t end) {
  Array<T> a({end - begin, width});
  for (std::size_t i = 0; i < (end - begin) * width; ++i) a[i] = static_cast<T>(data[begin * width + i]);
  return ad::Tensor<T>(std::move(a));
}

/// Gathers the listed rows of a row-major [n, width] buffer into a tensor.
template <typename T, typename U>
ad::Tensor<T> gather_rows(const std::vector<U>& data, std::size_t width, const std::vector<std::size_t>& rows) {
  Array<T> a({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < width; ++j) a[r * width + j] = static_cast<T>(data[rows[r] * width + j]);
  return ad::Tensor<T>(std::move(a));
}

}  // namespace phosflow::nn

#endif  // PHOSFLOW_NN_HPP

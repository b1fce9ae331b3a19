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

#include "phosflow/flows.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "phosflow/errors.hpp"
#include "phosflow/logging.hpp"

namespace phosflow::flows {
namespace {

template <typename T>
ad::Tensor<T> soft_clamp(const ad::Tensor<T>& s, double alpha) {
  const T k = static_cast<T>(alpha * 2.0 / std::numbers::pi);
  return ad::mul_scalar(ad::atan(ad::mul_scalar(s, static_cast<T>(1.0 / alpha))), k);
}

template <typename T>
void require_finite(const ad::Tensor<T>& t, const std::string& where) {
  for (T v : t.value().values()) {
    if (!std::isfinite(v)) throw NumericError("non-finite subnet output in " + where);
  }
}

template <typename T>
ad::Tensor<T> with_condition(const ad::Tensor<T>& x, const ad::Tensor<T>& c) {
  return c.defined() ? ad::concat<T>({x, c}, 1) : x;
}

struct Halves {
  std::size_t a;
  std::size_t b;
};

Halves split(std::size_t dim) { return {(dim + 1) / 2, dim / 2}; }

}  // namespace

template <typename T>
CouplingBlock<T> make_coupling(std::size_t dim, std::size_t hidden, std::size_t cond_width, Rng& rng,
                               double out_scale) {
  if (dim < 2) throw ParameterError("coupling block needs width >= 2, got " + std::to_string(dim));
  const auto [la, lb] = split(dim);
  CouplingBlock<T> blk;
  blk.len_a = la;
  blk.len_b = lb;
  blk.subnet2 = {nn::Linear<T>(la + cond_width, hidden, rng), nn::Linear<T>(hidden, 2 * lb, rng, true, out_scale)};
  blk.subnet1 = {nn::Linear<T>(lb + cond_width, hidden, rng), nn::Linear<T>(hidden, 2 * la, rng, true, out_scale)};
  return blk;
}

template <typename T>
FlowResult<T> coupling_forward(const ad::Tensor<T>& x, const CouplingBlock<T>& block, double clamp,
                               const ad::Tensor<T>& condition) {
  const std::size_t la = block.len_a, lb = block.len_b;
  if (x.shape().size() != 2 || x.dim(1) != la + lb) {
    throw ShapeError("coupling_forward: input " + shape_str(x.shape()) + " does not match block width " +
                     std::to_string(la + lb));
  }
  auto xa = ad::slice(x, 1, 0, la);
  auto xb = ad::slice(x, 1, la, la + lb);

  auto h2 = block.subnet2(with_condition(xa, condition));
  require_finite(h2, block.name + " (second half)");
  auto s2 = soft_clamp(ad::slice(h2, 1, 0, lb), clamp);
  auto yb = ad::add(ad::mul(xb, ad::exp(s2)), ad::slice(h2, 1, lb, 2 * lb));

  auto h1 = block.subnet1(with_condition(yb, condition));
  require_finite(h1, block.name + " (first half)");
  auto s1 = soft_clamp(ad::slice(h1, 1, 0, la), clamp);
  auto ya = ad::add(ad::mul(xa, ad::exp(s1)), ad::slice(h1, 1, la, 2 * la));

  return {ad::concat<T>({ya, yb}, 1), ad::add(ad::sum_axis(s1, 1), ad::sum_axis(s2, 1))};
}

template <typename T>
FlowResult<T> coupling_inverse(const ad::Tensor<T>& y, const CouplingBlock<T>& block, double clamp,
                               const ad::Tensor<T>& condition) {
  const std::size_t la = block.len_a, lb = block.len_b;
  if (y.shape().size() != 2 || y.dim(1) != la + lb) {
    throw ShapeError("coupling_inverse: input " + shape_str(y.shape()) + " does not match block width " +
                     std::to_string(la + lb));
  }
  auto ya = ad::slice(y, 1, 0, la);
  auto yb = ad::slice(y, 1, la, la + lb);

  auto h1 = block.subnet1(with_condition(yb, condition));
  require_finite(h1, block.name + " (first half)");
  auto s1 = soft_clamp(ad::slice(h1, 1, 0, la), clamp);
  auto xa = ad::mul(ad::sub(ya, ad::slice(h1, 1, la, 2 * la)), ad::exp(ad::neg(s1)));

  auto h2 = block.subnet2(with_condition(xa, condition));
  require_finite(h2, block.name + " (second half)");
  auto s2 = soft_clamp(ad::slice(h2, 1, 0, lb), clamp);
  auto xb = ad::mul(ad::sub(yb, ad::slice(h2, 1, lb, 2 * lb)), ad::exp(ad::neg(s2)));

  return {ad::concat<T>({xa, xb}, 1), ad::neg(ad::add(ad::sum_axis(s1, 1), ad::sum_axis(s2, 1)))};
}

template <typename T>
ad::Tensor<T> pad_to_dim(const ad::Tensor<T>& x, std::size_t dim) {
  const std::size_t d = x.dim(x.shape().size() - 1);
  if (d > dim) throw ContractError("pad_to_dim: width " + std::to_string(d) + " exceeds target " + std::to_string(dim));
  if (d == dim) return x;
  Shape zs = x.shape();
  zs.back() = dim - d;
  return ad::concat<T>({x, ad::Tensor<T>(Array<T>(zs))}, x.shape().size() - 1);
}

template <typename T>
ad::Tensor<T> truncate_to_dim(const ad::Tensor<T>& x, std::size_t dim) {
  const std::size_t axis = x.shape().size() - 1;
  if (x.dim(axis) < dim) {
    throw ContractError("truncate_to_dim: width " + std::to_string(x.dim(axis)) + " is below " + std::to_string(dim));
  }
  return x.dim(axis) == dim ? x : ad::slice(x, axis, 0, dim);
}

template <typename T>
FlowModel<T>::FlowModel(const FlowConfig& config) : config_(config) {
  if (config_.dim < 2) throw ParameterError("flow width must be >= 2");
  if (config_.out_dim > config_.dim) throw ParameterError("flow out_dim exceeds dim");
  if (config_.layers < 1 || config_.hidden < 1) throw ParameterError("flow needs >= 1 layer and hidden width");
  if (!(config_.clamp > 0.0)) throw ParameterError("clamp alpha must be positive");
  Rng rng(config_.seed);
  const std::size_t cw = config_.conditional() ? config_.condition_width : 0;
  if (config_.conditional()) {
    condition_projection_ = nn::Linear<T>(config_.condition_input, cw, rng);
  }
  const std::size_t d = config_.dim;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    Layer layer;
    layer.perm.resize(d);
    std::iota(layer.perm.begin(), layer.perm.end(), std::size_t{0});
    for (std::size_t i = d - 1; i > 0; --i) std::swap(layer.perm[i], layer.perm[rng.below(i + 1)]);
    layer.inverse_perm.resize(d);
    for (std::size_t j = 0; j < d; ++j) layer.inverse_perm[layer.perm[j]] = j;
    layer.coupling = make_coupling<T>(d, config_.hidden, cw, rng, 0.01);
    layer.coupling.name = "layer " + std::to_string(l);
    layer.actnorm_bias = ad::Tensor<T>::parameter(Array<T>({d}, T(0)));
    layer.actnorm_log_scale = ad::Tensor<T>::parameter(Array<T>({d}, T(0)));
    layers_.push_back(std::move(layer));
  }
}

template <typename T>
ad::Tensor<T> FlowModel<T>::project_condition(const ad::Tensor<T>& condition, std::size_t batch) const {
  if (!config_.conditional()) {
    if (condition.defined()) throw ContractError("unconditional flow received a condition");
    return {};
  }
  if (!condition.defined()) throw ContractError("conditional flow requires a condition");
  if (condition.shape().size() != 2 || condition.dim(0) != batch || condition.dim(1) != config_.condition_input) {
    throw ShapeError("condition shape " + shape_str(condition.shape()) + ", expected [" + std::to_string(batch) +
                     ", " + std::to_string(config_.condition_input) + "]");
  }
  return condition_projection_(condition);
}

template <typename T>
FlowResult<T> FlowModel<T>::forward(const ad::Tensor<T>& x, const ad::Tensor<T>& condition) const {
  if (x.shape().size() != 2 || x.dim(1) != config_.dim) {
    throw ShapeError("flow input " + shape_str(x.shape()) + ", expected [B, " + std::to_string(config_.dim) + "]");
  }
  const auto c = project_condition(condition, x.dim(0));
  ad::Tensor<T> h = x;
  ad::Tensor<T> logdet(Array<T>({x.dim(0)}, T(0)));
  for (const auto& layer : layers_) {
    h = ad::gather_last(h, std::span<const std::size_t>(layer.perm));
    auto r = coupling_forward(h, layer.coupling, config_.clamp, c);
    h = ad::mul(ad::add(r.value, layer.actnorm_bias), ad::exp(layer.actnorm_log_scale));
    logdet = ad::add(ad::add(logdet, r.logdet), ad::sum(layer.actnorm_log_scale));
  }
  return {h, logdet};
}

template <typename T>
FlowResult<T> FlowModel<T>::inverse(const ad::Tensor<T>& y, const ad::Tensor<T>& condition) const {
  if (y.shape().size() != 2 || y.dim(1) != config_.dim) {
    throw ShapeError("flow input " + shape_str(y.shape()) + ", expected [B, " + std::to_string(config_.dim) + "]");
  }
  const auto c = project_condition(condition, y.dim(0));
  ad::Tensor<T> h = y;
  ad::Tensor<T> logdet(Array<T>({y.dim(0)}, T(0)));
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    h = ad::sub(ad::mul(h, ad::exp(ad::neg(it->actnorm_log_scale))), it->actnorm_bias);
    auto r = coupling_inverse(h, it->coupling, config_.clamp, c);
    h = ad::gather_last(r.value, std::span<const std::size_t>(it->inverse_perm));
    logdet = ad::sub(ad::add(logdet, r.logdet), ad::sum(it->actnorm_log_scale));
  }
  return {h, logdet};
}

template <typename T>
void FlowModel<T>::actnorm_init(const ad::Tensor<T>& batch, const ad::Tensor<T>& condition) {
  if (batch.shape().size() != 2 || batch.dim(0) < 2) {
    throw ContractError("actnorm_init needs a batch of at least two samples, got " + shape_str(batch.shape()));
  }
  ad::NoGrad<T> guard;
  const auto c = project_condition(condition, batch.dim(0));
  const std::size_t n = batch.dim(0), d = config_.dim;
  ad::Tensor<T> h = batch;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& layer = layers_[l];
    h = ad::gather_last(h, std::span<const std::size_t>(layer.perm));
    h = coupling_forward(h, layer.coupling, config_.clamp, c).value;
    const T* v = h.value().data();
    auto& bias = layer.actnorm_bias.mutable_value();
    auto& logs = layer.actnorm_log_scale.mutable_value();
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += v[i * d + j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = v[i * d + j] - mean;
        var += e * e;
      }
      double sd = std::sqrt(var / static_cast<double>(n));
      if (sd < 1e-6) {
        log::warn("actnorm layer ", l, " dimension ", j, " has zero variance; std floored");
        sd += 1e-6;
      }
      bias[j] = static_cast<T>(-mean);
      logs[j] = static_cast<T>(-std::log(sd));
    }
    h = ad::mul(ad::add(h, layer.actnorm_bias), ad::exp(layer.actnorm_log_scale));
  }
  actnorm_ready_ = true;
}

template <typename T>
nn::ParameterList<T> FlowModel<T>::parameters() const {
  nn::ParameterList<T> p;
  if (config_.conditional()) condition_projection_.collect("cond_proj", p);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const std::string pre = "layer" + std::to_string(l);
    layer.coupling.subnet1.hidden.collect(pre + ".s1.hidden", p);
    layer.coupling.subnet1.out.collect(pre + ".s1.out", p);
    layer.coupling.subnet2.hidden.collect(pre + ".s2.hidden", p);
    layer.coupling.subnet2.out.collect(pre + ".s2.out", p);
    p.add(pre + ".actnorm.bias", layer.actnorm_bias);
    p.add(pre + ".actnorm.log_scale", layer.actnorm_log_scale);
  }
  return p;
}

template <typename T>
void FlowModel<T>::randomize(std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto t : parameters().tensors()) {
    auto& v = t.mutable_value();
    const double bound = v.rank() == 2 ? scale / std::sqrt(static_cast<double>(v.dim(0))) : 0.5 * scale;
    for (auto& e : v.values()) e = static_cast<T>(rng.uniform(-bound, bound));
  }
  actnorm_ready_ = true;
}

template <typename T>
void FlowModel<T>::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_scalar(prefix + ".config.dim", static_cast<double>(config_.dim));
  ck.put_scalar(prefix + ".config.out_dim", static_cast<double>(config_.out_dim));
  ck.put_scalar(prefix + ".config.layers", static_cast<double>(config_.layers));
  ck.put_scalar(prefix + ".config.hidden", static_cast<double>(config_.hidden));
  ck.put_scalar(prefix + ".config.clamp", config_.clamp);
  ck.put_scalar(prefix + ".config.condition_input", static_cast<double>(config_.condition_input));
  ck.put_scalar(prefix + ".config.condition_width", static_cast<double>(config_.condition_width));
  ck.put_scalar(prefix + ".actnorm_initialized", actnorm_ready_ ? 1.0 : 0.0);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& perm = layers_[l].perm;
    Array<float> a({perm.size()});
    for (std::size_t j = 0; j < perm.size(); ++j) a[j] = static_cast<float>(perm[j]);
    ck.put(prefix + ".layer" + std::to_string(l) + ".perm", std::move(a));
  }
  const auto params = parameters();
  for (const auto& [name, t] : params.items()) ck.put(prefix + "." + name, t.value());
}

template <typename T>
FlowModel<T> FlowModel<T>::load(const Checkpoint& ck, const std::string& prefix) {
  FlowConfig cfg;
  cfg.dim = static_cast<std::size_t>(ck.scalar(prefix + ".config.dim"));
  cfg.out_dim = static_cast<std::size_t>(ck.scalar(prefix + ".config.out_dim"));
  cfg.layers = static_cast<std::size_t>(ck.scalar(prefix + ".config.layers"));
  cfg.hidden = static_cast<std::size_t>(ck.scalar(prefix + ".config.hidden"));
  cfg.clamp = ck.scalar(prefix + ".config.clamp");
  cfg.condition_input = static_cast<std::size_t>(ck.scalar(prefix + ".config.condition_input"));
  cfg.condition_width = static_cast<std::size_t>(ck.scalar(prefix + ".config.condition_width"));
  FlowModel m(cfg);
  for (std::size_t l = 0; l < m.layers_.size(); ++l) {
    const auto a = ck.get<float>(prefix + ".layer" + std::to_string(l) + ".perm");
    if (a.size() != cfg.dim) throw FormatError("permutation of layer " + std::to_string(l) + " has wrong length");
    auto& layer = m.layers_[l];
    std::vector<bool> seen(cfg.dim, false);
    for (std::size_t j = 0; j < cfg.dim; ++j) {
      const auto idx = static_cast<std::size_t>(a[j]);
      if (idx >= cfg.dim || seen[idx]) throw FormatError("permutation of layer " + std::to_string(l) + " is not a bijection");
      seen[idx] = true;
      layer.perm[j] = idx;
      layer.inverse_perm[idx] = j;
    }
  }
  auto params = m.parameters();
  Checkpoint scoped;
  for (const auto& [name, t] : params.items()) scoped.put(name, ck.get<T>(prefix + "." + name));
  params.load_from(scoped);
  m.actnorm_ready_ = ck.scalar(prefix + ".actnorm_initialized") != 0.0;
  return m;
}

#define PHOSFLOW_INSTANTIATE(T)                                                                                 \
  template CouplingBlock<T> make_coupling<T>(std::size_t, std::size_t, std::size_t, Rng&, double);             \
  template FlowResult<T> coupling_forward(const ad::Tensor<T>&, const CouplingBlock<T>&, double,                \
                                          const ad::Tensor<T>&);                                                \
  template FlowResult<T> coupling_inverse(const ad::Tensor<T>&, const CouplingBlock<T>&, double,                \
                                          const ad::Tensor<T>&);                                                \
  template ad::Tensor<T> pad_to_dim(const ad::Tensor<T>&, std::size_t);                                         \
  template ad::Tensor<T> truncate_to_dim(const ad::Tensor<T>&, std::size_t);                                    \
  template class FlowModel<T>;

PHOSFLOW_INSTANTIATE(float)
PHOSFLOW_INSTANTIATE(double)

#undef PHOSFLOW_INSTANTIATE

}  // namespace phosflow::flows

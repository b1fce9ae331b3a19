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

#include "phosflow/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "phosflow/errors.hpp"
#include "phosflow/image.hpp"
#include "phosflow/logging.hpp"
#include "phosflow/losses.hpp"
#include "phosflow/optim.hpp"

namespace phosflow::baselines {
namespace {

constexpr std::size_t kE = phosim::kElectrodes;

void check_data(const RegressionData& d) {
  if (d.count == 0) throw ContractError("training needs a non-empty dataset");
  if (d.inputs.size() != d.count * d.in_width || d.targets.size() != d.count * kE) {
    throw ShapeError("regression data does not hold " + std::to_string(d.count) + " rows");
  }
}

ad::Tensor<float> batch_rows(std::span<const float> src, std::size_t width, const std::vector<std::size_t>& rows,
                             float scale) {
  Array<float> a({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < width; ++j) a[r * width + j] = src[rows[r] * width + j] * scale;
  return ad::Tensor<float>(std::move(a));
}

std::vector<float> area_to_grid(std::span<const float> images, std::size_t count, std::size_t side) {
  if (side != 9 && side != 28) throw ParameterError("encode_down supports 9x9 and 28x28 inputs, got side " + std::to_string(side));
  if (images.size() != count * side * side) throw ShapeError("encode_down: buffer does not hold " + std::to_string(count) + " images");
  std::vector<float> out(count * kE);
  for (std::size_t i = 0; i < count; ++i) {
    const std::vector<double> src(images.begin() + i * side * side, images.begin() + (i + 1) * side * side);
    const auto r = side == 9 ? src : resize_area(src, side, side, 9, 9);
    for (std::size_t j = 0; j < kE; ++j) out[i * kE + j] = static_cast<float>(r[j]);
  }
  return out;
}

template <typename F>
std::vector<float> batched(std::span<const float> images, std::size_t count, std::size_t width, F&& f) {
  if (images.size() != count * width) throw ShapeError("encoder input does not hold " + std::to_string(count) + " rows");
  ad::NoGrad<float> off;
  std::vector<float> out(count * kE);
  constexpr std::size_t kBatch = 512;
  for (std::size_t s0 = 0; s0 < count; s0 += kBatch) {
    const std::size_t n = std::min(kBatch, count - s0);
    Array<float> x({n, width}, std::vector<float>(images.begin() + s0 * width, images.begin() + (s0 + n) * width));
    const auto y = f(ad::Tensor<float>(std::move(x)));
    std::copy(y.value().storage().begin(), y.value().storage().end(), out.begin() + s0 * kE);
  }
  return out;
}

}  // namespace

std::vector<double> run_regression(const RegressionData& data, const TrainOptions& opts,
                                   const std::vector<ad::Tensor<float>>& params,
                                   const std::function<ad::Tensor<float>(const ad::Tensor<float>&,
                                                                         const ad::Tensor<float>&)>& loss) {
  check_data(data);
  Adam<float> adam(params, AdamOptions{opts.lr});
  Rng rng(derive_seed(opts.seed, 0xBA5E));
  std::vector<std::size_t> order(data.count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = std::min(opts.batch, data.count);
  const std::size_t per_epoch = std::max<std::size_t>(1, data.count / batch);
  const std::size_t total = opts.max_steps ? opts.max_steps : per_epoch * opts.epochs;
  std::vector<double> trace;
  trace.reserve(total);
  std::size_t cursor = data.count;
  for (std::size_t step = 0; step < total; ++step) {
    if (opts.lr_final > 0.0 && total > 1) {
      adam.set_lr(opts.lr * std::pow(opts.lr_final / opts.lr, static_cast<double>(step) / static_cast<double>(total - 1)));
    }
    if (cursor + batch > data.count) {
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
      cursor = 0;
    }
    const std::vector<std::size_t> rows(order.begin() + cursor, order.begin() + cursor + batch);
    cursor += batch;
    const auto x = batch_rows(data.inputs, data.in_width, rows, data.input_scale);
    const auto y = batch_rows(data.targets, kE, rows, 1.0f);
    ad::GradientTape<float> tape;
    const auto l = loss(x, y);
    const double v = l.item();
    if (!std::isfinite(v)) throw TrainingError("training loss became non-finite at step " + std::to_string(step));
    tape.backward(l);
    adam.step();
    adam.zero_grad();
    trace.push_back(v);
    if (opts.on_step) opts.on_step(step, v);
    if (opts.verbose && (step + 1) % per_epoch == 0) log::info("step ", step + 1, "/", total, " loss ", v);
  }
  return trace;
}

DifferentiableRenderer::DifferentiableRenderer(const phosim::AxonMapGeometry& geo, double normalization)
    : pixels_(geo.pixel_count()), segments_(geo.segments_per_pixel()), inv_norm_(static_cast<float>(1.0 / normalization)) {
  const phosim::EffectTable<float> table(geo);
  const std::size_t rows = table.rows();
  Array<float> t({kE, rows});
  const auto& w = table.weights();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t e = 0; e < kE; ++e) t[e * rows + r] = w[r * kE + e];
  table_t_ = ad::Tensor<float>(std::move(t));
}

ad::Tensor<float> DifferentiableRenderer::operator()(const ad::Tensor<float>& stimuli) const {
  const std::size_t b = stimuli.dim(0);
  auto pre = ad::reshape(ad::matmul(stimuli, table_t_), {b, pixels_, segments_});
  return ad::mul_scalar(ad::relu(ad::max_last(pre)), inv_norm_);
}

std::vector<float> encode_down(std::span<const float> images, std::size_t count, std::size_t side, double gain) {
  auto out = area_to_grid(images, count, side);
  for (auto& v : out) v = static_cast<float>(v * gain);
  return out;
}

double fit_down_gain(const RegressionData& data, std::size_t side, const DifferentiableRenderer& render,
                     const TrainOptions& opts) {
  check_data(data);
  if (data.in_width != side * side || render.pixels() != side * side) {
    throw ContractError("fit_down_gain: image side does not match the renderer");
  }
  // The stimulus targets are unused; each percept is its own target.
  std::vector<float> grid = area_to_grid(data.inputs, data.count, side);
  for (auto& v : grid) v *= data.input_scale;
  auto gain = ad::Tensor<float>::parameter(Array<float>::scalar(1.0f));
  RegressionData d{grid, kE, 1.0f, data.targets, data.count};
  std::vector<float> percepts(data.inputs.size());
  for (std::size_t i = 0; i < percepts.size(); ++i) percepts[i] = data.inputs[i] * data.input_scale;
  // Pair each downsampled grid with its own normalized percept.
  std::vector<float> joined(data.count * (kE + side * side));
  for (std::size_t i = 0; i < data.count; ++i) {
    std::copy_n(grid.begin() + i * kE, kE, joined.begin() + i * (kE + side * side));
    std::copy_n(percepts.begin() + i * side * side, side * side, joined.begin() + i * (kE + side * side) + kE);
  }
  d.inputs = joined;
  d.in_width = kE + side * side;
  run_regression(d, opts, {gain}, [&](const ad::Tensor<float>& x, const ad::Tensor<float>&) {
    const auto stim = ad::mul(ad::slice(x, 1, 0, kE), gain);
    const auto target = ad::slice(x, 1, kE, kE + side * side);
    return losses::mse(render(stim), target);
  });
  return gain.item();
}

LinearBaseline::LinearBaseline(std::size_t in_width, std::uint64_t seed) {
  Rng rng(seed);
  layer_ = nn::Linear<float>(in_width, kE, rng);
}

std::vector<float> LinearBaseline::encode(std::span<const float> images, std::size_t count) const {
  return batched(images, count, in_width(), [&](const ad::Tensor<float>& x) { return forward(x); });
}

nn::ParameterList<float> LinearBaseline::parameters() const {
  nn::ParameterList<float> p;
  layer_.collect("linear", p);
  return p;
}

void LinearBaseline::save(Checkpoint& ck) const {
  ck.put_scalar("linear.in_width", static_cast<double>(in_width()));
  parameters().save_to(ck);
}

LinearBaseline LinearBaseline::load(const Checkpoint& ck) {
  LinearBaseline m(static_cast<std::size_t>(ck.scalar("linear.in_width")), 0);
  auto p = m.parameters();
  p.load_from(ck);
  return m;
}

LinearBaseline train_linear(const RegressionData& data, const TrainOptions& opts) {
  check_data(data);
  LinearBaseline m(data.in_width, opts.seed);
  run_regression(data, opts, m.parameters().tensors(),
                 [&](const ad::Tensor<float>& x, const ad::Tensor<float>& y) { return losses::mse(m.forward(x), y); });
  return m;
}

NNBaseline::NNBaseline(std::size_t in_width, std::uint64_t seed)
    : bn1_(32), bn2_(64), bn3_(32) {
  Rng rng(seed);
  input_ = nn::Linear<float>(in_width, kE, rng);
  conv1_ = nn::Conv3x3<float>(1, 32, rng);
  conv2_ = nn::Conv3x3<float>(32, 64, rng);
  conv3_ = nn::Conv3x3<float>(64, 32, rng);
  output_ = nn::Linear<float>(32 * kE, kE, rng);
}

ad::Tensor<float> NNBaseline::forward(const ad::Tensor<float>& x, bool training) {
  const std::size_t b = x.dim(0);
  auto h = ad::reshape(input_(x), {b, 1, phosim::kGridSide, phosim::kGridSide});
  h = ad::elu(bn1_(conv1_(h), training));
  h = ad::elu(bn2_(conv2_(h), training));
  h = ad::elu(bn3_(conv3_(h), training));
  return output_(ad::reshape(h, {b, 32 * kE}));
}

std::vector<float> NNBaseline::encode(std::span<const float> images, std::size_t count) {
  return batched(images, count, in_width(), [&](const ad::Tensor<float>& x) { return forward(x, false); });
}

nn::ParameterList<float> NNBaseline::parameters() const {
  nn::ParameterList<float> p;
  input_.collect("nn.input", p);
  conv1_.collect("nn.conv1", p);
  bn1_.collect("nn.bn1", p);
  conv2_.collect("nn.conv2", p);
  bn2_.collect("nn.bn2", p);
  conv3_.collect("nn.conv3", p);
  bn3_.collect("nn.bn3", p);
  output_.collect("nn.output", p);
  return p;
}

void NNBaseline::save(Checkpoint& ck) const {
  ck.put_scalar("nn.in_width", static_cast<double>(in_width()));
  parameters().save_to(ck);
  bn1_.save_buffers("nn.bn1", ck);
  bn2_.save_buffers("nn.bn2", ck);
  bn3_.save_buffers("nn.bn3", ck);
}

NNBaseline NNBaseline::load(const Checkpoint& ck) {
  NNBaseline m(static_cast<std::size_t>(ck.scalar("nn.in_width")), 0);
  auto p = m.parameters();
  p.load_from(ck);
  m.bn1_.load_buffers("nn.bn1", ck);
  m.bn2_.load_buffers("nn.bn2", ck);
  m.bn3_.load_buffers("nn.bn3", ck);
  return m;
}

NNBaseline train_nn(const RegressionData& data, const TrainOptions& opts) {
  check_data(data);
  NNBaseline m(data.in_width, opts.seed);
  run_regression(data, opts, m.parameters().tensors(), [&](const ad::Tensor<float>& x, const ad::Tensor<float>& y) {
    return losses::mse(m.forward(x, true), y);
  });
  return m;
}

}  // namespace phosflow::baselines

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

#include "phosflow/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "phosflow/errors.hpp"
#include "phosflow/logging.hpp"
#include "phosflow/optim.hpp"

namespace phosflow::metrics {
namespace {

constexpr std::size_t kWin = 7;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWin * kWin> gaussian_window() {
  std::array<double, kWin * kWin> w{};
  double total = 0.0;
  const double c = (kWin - 1) / 2.0;
  for (std::size_t i = 0; i < kWin; ++i)
    for (std::size_t j = 0; j < kWin; ++j) {
      const double d2 = (i - c) * (i - c) + (j - c) * (j - c);
      w[i * kWin + j] = std::exp(-d2 / (2.0 * kSigma * kSigma));
      total += w[i * kWin + j];
    }
  for (auto& v : w) v /= total;
  return w;
}

// Order-independent mean.
double stable_mean(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  long double s = 0.0L;
  for (double x : v) s += x;
  return static_cast<double>(s / static_cast<long double>(v.size()));
}

void require_same(std::span<const float> a, std::span<const float> b, const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": sizes " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                     " differ");
  }
}

}  // namespace

double ssim(std::span<const float> a, std::span<const float> b, std::size_t height, std::size_t width) {
  require_same(a, b, "ssim");
  if (a.size() != height * width) throw ShapeError("ssim: image size does not match " + std::to_string(height) + "x" + std::to_string(width));
  if (height < kWin || width < kWin) throw ShapeError("ssim: images must be at least 7x7");
  static const auto w = gaussian_window();
  double total = 0.0;
  for (std::size_t i = 0; i + kWin <= height; ++i)
    for (std::size_t j = 0; j + kWin <= width; ++j) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (std::size_t u = 0; u < kWin; ++u)
        for (std::size_t v = 0; v < kWin; ++v) {
          const double g = w[u * kWin + v];
          const double x = a[(i + u) * width + j + v];
          const double y = b[(i + u) * width + j + v];
          mx += g * x;
          my += g * y;
          xx += g * x * x;
          yy += g * y * y;
          xy += g * x * y;
        }
      const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
      total += ((2 * mx * my + kC1) * (2 * cxy + kC2)) / ((mx * mx + my * my + kC1) * (vx + vy + kC2));
    }
  return total / static_cast<double>((height - kWin + 1) * (width - kWin + 1));
}

double mse(std::span<const float> a, std::span<const float> b) {
  require_same(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return s / static_cast<double>(a.size());
}

double mae(std::span<const float> a, std::span<const float> b) {
  require_same(a, b, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - b[i]);
  return s / static_cast<double>(a.size());
}

double psnr(std::span<const float> a, std::span<const float> b) {
  const double m = mse(a, b);
  if (m <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

Classifier::Classifier(std::size_t side, std::uint64_t seed) : side_(side) {
  if (side != 9 && side != 28) throw ParameterError("classifier resolution must be 9 or 28");
  Rng rng(seed);
  conv1_ = nn::Conv3x3<float>(1, 16, rng);
  conv2_ = nn::Conv3x3<float>(16, 32, rng);
  const std::size_t spatial = side == 28 ? 7 : 9;
  fc1_ = nn::Linear<float>(32 * spatial * spatial, 128, rng);
  fc2_ = nn::Linear<float>(128, 10, rng);
}

ad::Tensor<float> Classifier::logits(const ad::Tensor<float>& images) const {
  const std::size_t b = images.dim(0);
  if (images.shape().size() != 2 || images.dim(1) != side_ * side_) {
    throw ShapeError("classifier input " + shape_str(images.shape()) + ", expected [B, " + std::to_string(side_ * side_) + "]");
  }
  auto h = ad::reshape(images, {b, 1, side_, side_});
  h = ad::elu(conv1_(h));
  if (side_ == 28) h = ad::avg_pool2(h);
  h = ad::elu(conv2_(h));
  if (side_ == 28) h = ad::avg_pool2(h);
  h = ad::reshape(h, {b, h.size() / b});
  return fc2_(ad::elu(fc1_(h)));
}

std::vector<std::uint8_t> Classifier::predict(std::span<const float> images, std::size_t count) const {
  const std::size_t px = side_ * side_;
  if (images.size() != count * px) throw ShapeError("predict: buffer does not hold " + std::to_string(count) + " images");
  ad::NoGrad<float> off;
  std::vector<std::uint8_t> out(count);
  constexpr std::size_t kBatch = 256;
  for (std::size_t s0 = 0; s0 < count; s0 += kBatch) {
    const std::size_t n = std::min(kBatch, count - s0);
    Array<float> x({n, px}, std::vector<float>(images.begin() + s0 * px, images.begin() + (s0 + n) * px));
    const auto z = logits(ad::Tensor<float>(std::move(x))).value();
    for (std::size_t i = 0; i < n; ++i) {
      const float* r = z.data() + i * 10;
      out[s0 + i] = static_cast<std::uint8_t>(std::max_element(r, r + 10) - r);
    }
  }
  return out;
}

double Classifier::accuracy(const data::LabeledImageSet& set) const {
  if (set.height != side_) throw ContractError("classifier resolution does not match the image set");
  const auto p = predict(set.images, set.count);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < set.count; ++i) hits += p[i] == set.labels[i];
  return static_cast<double>(hits) / static_cast<double>(set.count);
}

nn::ParameterList<float> Classifier::parameters() const {
  nn::ParameterList<float> p;
  conv1_.collect("classifier.conv1", p);
  conv2_.collect("classifier.conv2", p);
  fc1_.collect("classifier.fc1", p);
  fc2_.collect("classifier.fc2", p);
  return p;
}

void Classifier::save(Checkpoint& ck) const {
  ck.put_scalar("classifier.side", static_cast<double>(side_));
  parameters().save_to(ck);
}

Classifier Classifier::load(const Checkpoint& ck) {
  Classifier c(static_cast<std::size_t>(ck.scalar("classifier.side")), 0);
  auto p = c.parameters();
  p.load_from(ck);
  return c;
}

Classifier train_classifier(const data::LabeledImageSet& train, const ClassifierTraining& opts) {
  if (train.count == 0) throw ContractError("train_classifier: empty training set");
  if (train.height != train.width) throw ContractError("train_classifier: images must be square");
  Classifier c(train.height, opts.seed);
  const auto params = c.parameters();
  Adam<float> adam(params.tensors(), AdamOptions{opts.lr});
  Rng rng(derive_seed(opts.seed, 1));
  std::vector<std::size_t> order(train.count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t px = train.pixels();
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    double running = 0.0;
    std::size_t steps = 0;
    for (std::size_t s0 = 0; s0 + 1 < train.count; s0 += opts.batch) {
      const std::size_t n = std::min(opts.batch, train.count - s0);
      std::vector<std::size_t> rows(order.begin() + s0, order.begin() + s0 + n);
      auto x = nn::gather_rows<float>(train.images, px, rows);
      Array<float> onehot({n, 10});
      for (std::size_t i = 0; i < n; ++i) onehot[i * 10 + train.labels[rows[i]]] = -1.0f / static_cast<float>(n);
      ad::GradientTape<float> tape;
      auto loss = ad::sum(ad::mul(ad::log_softmax(c.logits(x)), ad::Tensor<float>(std::move(onehot))));
      if (!std::isfinite(loss.item())) throw TrainingError("classifier loss diverged");
      tape.backward(loss);
      adam.step();
      adam.zero_grad();
      running += loss.item();
      ++steps;
    }
    if (opts.verbose) log::info("classifier epoch ", epoch + 1, " mean loss ", running / static_cast<double>(steps));
  }
  return c;
}

MetricReport evaluate(std::span<const float> percepts, std::span<const float> targets,
                      std::span<const std::uint8_t> labels, std::size_t height, std::size_t width,
                      const Classifier& classifier) {
  const std::size_t px = height * width;
  const std::size_t n = labels.size();
  if (percepts.size() != n * px || targets.size() != n * px) {
    throw ShapeError("evaluate: " + std::to_string(percepts.size()) + " percept values and " +
                     std::to_string(targets.size()) + " target values for " + std::to_string(n) + " labels of " +
                     std::to_string(px) + " pixels");
  }
  if (classifier.side() != height) throw ContractError("evaluate: classifier resolution does not match the percepts");
  MetricReport r;
  r.count = n;
  r.per_mae.resize(n);
  r.per_mse.resize(n);
  r.per_ssim.resize(n);
  r.per_psnr.resize(n);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = percepts.subspan(i * px, px);
    const auto t = targets.subspan(i * px, px);
    r.per_mae[i] = mae(p, t);
    r.per_mse[i] = mse(p, t);
    r.per_ssim[i] = ssim(p, t, height, width);
    r.per_psnr[i] = psnr(p, t);
  }
  r.predicted = classifier.predict(percepts, n);
  r.correct.resize(n);
  std::vector<double> hits(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.correct[i] = r.predicted[i] == labels[i];
    hits[i] = r.correct[i];
  }
  r.mae = stable_mean(r.per_mae);
  r.mse = stable_mean(r.per_mse);
  r.ssim = stable_mean(r.per_ssim);
  r.psnr_db = stable_mean(r.per_psnr);
  r.acc = stable_mean(hits);
  return r;
}

void write_table_csv(const std::filesystem::path& path, const std::vector<TableRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "model,resolution,mae,mse,ssim,psnr_db,acc,samples\n" << std::setprecision(6) << std::fixed;
  for (const auto& row : rows) {
    const auto& r = row.report;
    out << row.model << ',' << row.resolution << 'x' << row.resolution << ',' << r.mae << ',' << r.mse << ','
        << r.ssim << ',' << r.psnr_db << ',' << r.acc << ',' << r.count << '\n';
  }
}

void write_per_sample_csv(const std::filesystem::path& path, const MetricReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "index,mae,mse,ssim,psnr_db,predicted,correct\n" << std::setprecision(8);
  for (std::size_t i = 0; i < r.count; ++i) {
    out << i << ',' << r.per_mae[i] << ',' << r.per_mse[i] << ',' << r.per_ssim[i] << ',' << r.per_psnr[i] << ','
        << int(r.predicted[i]) << ',' << int(r.correct[i]) << '\n';
  }
}

}  // namespace phosflow::metrics

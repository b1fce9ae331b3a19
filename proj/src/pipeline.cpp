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

#include "phosflow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <numeric>

#include "phosflow/errors.hpp"
#include "phosflow/image.hpp"
#include "phosflow/logging.hpp"
#include "phosflow/optim.hpp"

namespace phosflow::pipeline {
namespace {

constexpr std::size_t kE = phosim::kElectrodes;
constexpr std::size_t kEvalBatch = 256;

using Json = nlohmann::json;

ad::Tensor<float> rows_scaled(const std::vector<float>& src, std::size_t width, const std::vector<std::size_t>& rows,
                              float scale) {
  Array<float> a({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < width; ++j) a[r * width + j] = src[rows[r] * width + j] * scale;
  return ad::Tensor<float>(std::move(a));
}

ad::Tensor<float> block_tensor(std::span<const float> src, std::size_t width, std::size_t begin, std::size_t end,
                               float scale = 1.0f) {
  Array<float> a({end - begin, width});
  for (std::size_t i = 0; i < (end - begin) * width; ++i) a[i] = src[begin * width + i] * scale;
  return ad::Tensor<float>(std::move(a));
}

void check_dataset(const ExperimentConfig& cfg, const data::PairDataset& ds) {
  if (ds.count == 0) throw ContractError("training needs a non-empty dataset");
  if (ds.height != cfg.resolution || ds.width != cfg.resolution) {
    throw ContractError("dataset resolution " + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                        " does not match the configured " + std::to_string(cfg.resolution));
  }
  if (ds.count < cfg.batch) {
    throw ContractError("dataset has " + std::to_string(ds.count) + " pairs, fewer than one batch of " +
                        std::to_string(cfg.batch));
  }
}

class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path) : os_(path) {
    if (!os_) throw FormatError("cannot open " + path.string() + " for writing");
    os_ << "step,epoch,loss\n";
  }
  void add(std::size_t step, std::size_t epoch, double loss) { os_ << step << ',' << epoch << ',' << loss << '\n'; }
  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
};

/// Shuffled minibatch loop shared by the flow trainers.
std::vector<double> run_loop(const ExperimentConfig& cfg, std::size_t count, const std::vector<ad::Tensor<float>>& params,
                             const std::function<ad::Tensor<float>(const std::vector<std::size_t>&, std::size_t)>& loss_fn,
                             const std::function<void(const std::filesystem::path&)>& save,
                             const std::function<void(const std::vector<std::size_t>&)>& first_batch = {}) {
  const auto dir = cfg.run_dir();
  std::filesystem::create_directories(dir);
  LossLog log_csv(dir / "loss.csv");
  Adam<float> adam(params, AdamOptions{cfg.lr});
  Rng rng(derive_seed(cfg.seed, 0x5EED));
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t per_epoch = count / cfg.batch;
  const std::size_t total = cfg.max_steps ? cfg.max_steps : per_epoch * cfg.epochs;
  const auto latest = dir / "latest.pfck";
  bool have_checkpoint = false;
  std::vector<double> losses;
  losses.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t within = step % per_epoch;
    if (within == 0) {
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    }
    const std::vector<std::size_t> rows(order.begin() + within * cfg.batch, order.begin() + (within + 1) * cfg.batch);
    if (step == 0 && first_batch) first_batch(rows);
    auto diverged = [&](const std::string& what) {
      log_csv.flush();
      return TrainingError("training diverged at step " + std::to_string(step) + " (" + what + "); " +
                           (have_checkpoint ? "last good checkpoint: " + latest.string() : "no checkpoint was written"));
    };
    ad::GradientTape<float> tape;
    ad::Tensor<float> loss;
    try {
      loss = loss_fn(rows, step);
    } catch (const NumericError& e) {
      throw diverged(e.what());
    }
    const double v = loss.item();
    if (!std::isfinite(v)) throw diverged("loss " + std::to_string(v));
    tape.backward(loss);
    adam.step();
    adam.zero_grad();
    losses.push_back(v);
    log_csv.add(step, step / per_epoch, v);
    if (within + 1 == per_epoch || step + 1 == total) {
      log_csv.flush();
      save(latest);
      have_checkpoint = true;
      if (cfg.verbose) log::info(model_name(cfg.model), " step ", step + 1, "/", total, " loss ", v);
    }
  }
  return losses;
}

Array<double> geometry_array(const phosim::AxonMapGeometry& geo) {
  const auto v = geo.serialize();
  return Array<double>({v.size()}, v);
}

std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace

std::string model_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kDown: return "down";
    case ModelKind::kLinear: return "linear";
    case ModelKind::kNN: return "nn";
    case ModelKind::kINN: return "inn";
    case ModelKind::kCINN: return "cinn";
  }
  throw ParameterError("unknown model kind");
}

ModelKind parse_model(const std::string& name) {
  for (auto k : {ModelKind::kDown, ModelKind::kLinear, ModelKind::kNN, ModelKind::kINN, ModelKind::kCINN})
    if (model_name(k) == name) return k;
  throw ParameterError("unknown model '" + name + "' (expected down, linear, nn, inn or cinn)");
}

void ExperimentConfig::validate() const {
  if (resolution != 9 && resolution != 28) throw ParameterError("resolution must be 9 or 28, got " + std::to_string(resolution));
  if (batch < 2) throw ParameterError("batch size must be at least 2");
  if (!(lr > 0.0)) throw ParameterError("learning rate must be positive");
  if (flow_layers == 0 || flow_hidden == 0) throw ParameterError("flow depth and width must be positive");
  if (!(clamp > 0.0)) throw ParameterError("clamp must be positive");
  if (!(latent_rate > 0.0)) throw ParameterError("latent rate must be positive");
  if (epochs == 0 && max_steps == 0) throw ParameterError("either epochs or max_steps must be positive");
  losses::KernelBank{kernel_widths}.validate();
}

std::filesystem::path ExperimentConfig::output_root() const {
  std::filesystem::path p(output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("PHOSFLOW_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / p;
  }
  return p;
}

std::filesystem::path ExperimentConfig::run_dir() const {
  std::string name = model_name(model) + "_" + std::to_string(resolution);
  if (model == ModelKind::kINN && swap_direction) name += "_swapped";
  return output_root() / name;
}

void to_json(Json& j, const ExperimentConfig& c) {
  j = Json{{"model", model_name(c.model)},
           {"resolution", c.resolution},
           {"dataset", c.dataset},
           {"dataset_size", c.dataset_size},
           {"seed", c.seed},
           {"batch", c.batch},
           {"epochs", c.epochs},
           {"max_steps", c.max_steps},
           {"lr", c.lr},
           {"flow_layers", c.flow_layers},
           {"flow_hidden", c.flow_hidden},
           {"clamp", c.clamp},
           {"kernel_widths", c.kernel_widths},
           {"mmd_weight", c.mmd_weight},
           {"swap_direction", c.swap_direction},
           {"latent_steps", c.latent_steps},
           {"latent_rate", c.latent_rate},
           {"worst_k", c.worst_k},
           {"eval_count", c.eval_count},
           {"output_dir", c.output_dir},
           {"verbose", c.verbose}};
}

void from_json(const Json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ParameterError("experiment config must be a JSON object");
  Json known;
  to_json(known, c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ParameterError("unknown config key '" + key + "'");
  }
  try {
    if (j.contains("model")) c.model = parse_model(j.at("model").get<std::string>());
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    take("resolution", c.resolution);
    take("dataset", c.dataset);
    take("dataset_size", c.dataset_size);
    take("seed", c.seed);
    take("batch", c.batch);
    take("epochs", c.epochs);
    take("max_steps", c.max_steps);
    take("lr", c.lr);
    take("flow_layers", c.flow_layers);
    take("flow_hidden", c.flow_hidden);
    take("clamp", c.clamp);
    take("kernel_widths", c.kernel_widths);
    take("mmd_weight", c.mmd_weight);
    take("swap_direction", c.swap_direction);
    take("latent_steps", c.latent_steps);
    take("latent_rate", c.latent_rate);
    take("worst_k", c.worst_k);
    take("eval_count", c.eval_count);
    take("output_dir", c.output_dir);
    take("verbose", c.verbose);
  } catch (const Json::exception& e) {
    throw ParameterError(std::string("bad config value: ") + e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw FormatError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

phosim::AxonMapGeometry geometry_for(std::size_t resolution) {
  phosim::GeometryParams p;
  p.resolution = resolution;
  return phosim::AxonMapGeometry::build(p);
}

data::PairDataset obtain_dataset(const ExperimentConfig& cfg, const phosim::AxonMapGeometry& geo) {
  if (!cfg.dataset.empty()) return data::load_dataset(cfg.dataset, geo);
  if (cfg.verbose) log::info("generating ", cfg.dataset_size, " pairs at ", cfg.resolution, "x", cfg.resolution);
  return data::gen_pairs(cfg.dataset_size, geo, cfg.seed);
}

flows::FlowConfig cinn_config(const ExperimentConfig& cfg) {
  flows::FlowConfig f;
  f.dim = kE;
  f.out_dim = kE;
  f.layers = cfg.flow_layers;
  f.hidden = cfg.flow_hidden;
  f.clamp = cfg.clamp;
  f.condition_input = cfg.resolution * cfg.resolution;
  f.condition_width = kE;
  f.seed = cfg.seed;
  return f;
}

flows::FlowConfig inn_config(const ExperimentConfig& cfg) {
  flows::FlowConfig f;
  f.dim = std::max(cfg.resolution * cfg.resolution, kE);
  f.out_dim = cfg.swap_direction ? f.dim : kE;
  f.layers = cfg.flow_layers;
  f.hidden = cfg.flow_hidden;
  f.clamp = cfg.clamp;
  f.seed = cfg.seed;
  return f;
}

TrainResult train_cinn(const ExperimentConfig& cfg, const data::PairDataset& ds) {
  cfg.validate();
  check_dataset(cfg, ds);
  const auto geo = geometry_for(cfg.resolution);
  const std::size_t px = ds.pixels();
  const float inv_norm = static_cast<float>(1.0 / ds.normalization);
  flows::FlowModel<float> model(cinn_config(cfg));
  auto snapshot = [&](const std::filesystem::path& path) {
    Checkpoint ck;
    Encoder(ModelKind::kCINN, cfg.resolution, ds.normalization, geo, model).save(ck);
    ck.save(path);
  };
  const auto params = model.parameters().tensors();
  TrainResult r;
  r.losses = run_loop(
      cfg, ds.count, params,
      [&](const std::vector<std::size_t>& rows, std::size_t) {
        const auto x = rows_scaled(ds.stimuli, kE, rows, 1.0f);
        const auto c = rows_scaled(ds.percepts, px, rows, inv_norm);
        const auto out = model.forward(x, c);
        return losses::nll(out.value, out.logdet);
      },
      snapshot,
      [&](const std::vector<std::size_t>& rows) {
        ad::NoGrad<float> off;
        model.actnorm_init(rows_scaled(ds.stimuli, kE, rows, 1.0f), rows_scaled(ds.percepts, px, rows, inv_norm));
      });
  r.checkpoint = cfg.run_dir() / "model.pfck";
  snapshot(r.checkpoint);
  return r;
}

TrainResult train_inn_mmd(const ExperimentConfig& cfg, const data::PairDataset& ds) {
  cfg.validate();
  check_dataset(cfg, ds);
  const auto geo = geometry_for(cfg.resolution);
  const std::size_t px = ds.pixels();
  const float inv_norm = static_cast<float>(1.0 / ds.normalization);
  const auto fc = inn_config(cfg);
  const std::size_t latent = fc.latent_dim();
  const losses::KernelBank bank{cfg.kernel_widths};
  flows::FlowModel<float> model(fc);
  auto snapshot = [&](const std::filesystem::path& path) {
    Checkpoint ck;
    Encoder(ModelKind::kINN, cfg.resolution, ds.normalization, geo, model, cfg.swap_direction).save(ck);
    ck.save(path);
  };
  auto inputs = [&](const std::vector<std::size_t>& rows) {
    return cfg.swap_direction ? flows::pad_to_dim(rows_scaled(ds.stimuli, kE, rows, 1.0f), fc.dim)
                              : flows::pad_to_dim(rows_scaled(ds.percepts, px, rows, inv_norm), fc.dim);
  };
  const auto params = model.parameters().tensors();
  TrainResult r;
  r.losses = run_loop(
      cfg, ds.count, params,
      [&](const std::vector<std::size_t>& rows, std::size_t step) {
        const auto out = model.forward(inputs(rows)).value;
        if (cfg.swap_direction) {
          return losses::mse(out, flows::pad_to_dim(rows_scaled(ds.percepts, px, rows, inv_norm), fc.dim));
        }
        auto loss = losses::mse(ad::slice(out, 1, 0, kE), rows_scaled(ds.stimuli, kE, rows, 1.0f));
        if (latent > 0 && cfg.mmd_weight > 0.0) {
          Rng rng(derive_seed(cfg.seed ^ 0x4D4D44, step));
          Array<float> prior({rows.size(), latent});
          for (auto& v : prior.values()) v = static_cast<float>(rng.normal());
          const auto z = ad::slice(out, 1, kE, fc.dim);
          loss = ad::add(loss, ad::mul_scalar(losses::mmd(z, ad::Tensor<float>(std::move(prior)), bank),
                                              static_cast<float>(cfg.mmd_weight)));
        }
        return loss;
      },
      snapshot,
      [&](const std::vector<std::size_t>& rows) {
        ad::NoGrad<float> off;
        model.actnorm_init(inputs(rows));
      });
  r.checkpoint = cfg.run_dir() / "model.pfck";
  snapshot(r.checkpoint);
  return r;
}

TrainResult train_baseline(const ExperimentConfig& cfg, const data::PairDataset& ds) {
  cfg.validate();
  if (ds.count == 0) throw ContractError("training needs a non-empty dataset");
  if (ds.height != cfg.resolution) throw ContractError("dataset resolution does not match the configured one");
  const auto geo = geometry_for(cfg.resolution);
  const std::size_t px = ds.pixels();
  baselines::RegressionData rd{ds.percepts, px, static_cast<float>(1.0 / ds.normalization), ds.stimuli, ds.count};
  const auto dir = cfg.run_dir();
  std::filesystem::create_directories(dir);
  TrainResult r;
  LossLog log_csv(dir / "loss.csv");
  baselines::TrainOptions opts;
  opts.epochs = cfg.epochs;
  opts.batch = cfg.batch;
  opts.max_steps = cfg.max_steps;
  opts.lr = cfg.lr;
  opts.seed = cfg.seed;
  opts.verbose = cfg.verbose;
  const std::size_t per_epoch = std::max<std::size_t>(1, ds.count / std::min(cfg.batch, ds.count));
  opts.on_step = [&](std::size_t step, double loss) {
    r.losses.push_back(loss);
    log_csv.add(step, step / per_epoch, loss);
  };
  std::optional<Encoder> enc;
  switch (cfg.model) {
    case ModelKind::kDown: {
      // One scalar: a larger step with decay and a short schedule suffice.
      baselines::TrainOptions g = opts;
      g.batch = std::min<std::size_t>(256, ds.count);
      g.max_steps = 300;
      g.lr = 0.05;
      g.lr_final = 1e-3;
      const baselines::DifferentiableRenderer render(geo, ds.normalization);
      const double gain = baselines::fit_down_gain(rd, cfg.resolution, render, g);
      if (cfg.verbose) log::info("down gain ", gain);
      enc.emplace(ModelKind::kDown, cfg.resolution, ds.normalization, geo, gain);
      break;
    }
    case ModelKind::kLinear:
      enc.emplace(ModelKind::kLinear, cfg.resolution, ds.normalization, geo, baselines::train_linear(rd, opts));
      break;
    case ModelKind::kNN:
      enc.emplace(ModelKind::kNN, cfg.resolution, ds.normalization, geo, baselines::train_nn(rd, opts));
      break;
    default:
      throw ParameterError(model_name(cfg.model) + " is not a baseline");
  }
  log_csv.flush();
  r.checkpoint = dir / "model.pfck";
  Checkpoint ck;
  enc->save(ck);
  ck.save(r.checkpoint);
  return r;
}

TrainResult train_model(const ExperimentConfig& cfg, const data::PairDataset& ds) {
  {
    std::filesystem::create_directories(cfg.run_dir());
    std::ofstream os(cfg.run_dir() / "config.json");
    os << Json(cfg).dump(2) << '\n';
  }
  switch (cfg.model) {
    case ModelKind::kCINN: return train_cinn(cfg, ds);
    case ModelKind::kINN: return train_inn_mmd(cfg, ds);
    default: return train_baseline(cfg, ds);
  }
}

Encoder::Encoder(ModelKind kind, std::size_t resolution, double normalization, const phosim::AxonMapGeometry& geo,
                 Model model, bool swapped)
    : kind_(kind), resolution_(resolution), normalization_(normalization), geometry_(geo), model_(std::move(model)),
      swapped_(swapped) {
  if (!(normalization > 0.0)) throw ParameterError("normalization must be positive");
}

const flows::FlowModel<float>& Encoder::flow() const {
  if (const auto* f = std::get_if<flows::FlowModel<float>>(&model_)) return *f;
  throw ContractError(model_name(kind_) + " is not a flow model");
}

void Encoder::save(Checkpoint& ck) const {
  ck.put_scalar("model.kind", static_cast<double>(kind_));
  ck.put_scalar("model.resolution", static_cast<double>(resolution_));
  ck.put_scalar("model.normalization", normalization_);
  ck.put_scalar("model.swapped", swapped_ ? 1.0 : 0.0);
  ck.put("model.geometry", geometry_array(geometry_));
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, double>) {
          ck.put_scalar("down.gain", m);
        } else {
          m.save(ck);
        }
      },
      model_);
}

Encoder Encoder::load(const Checkpoint& ck) {
  const double kind_code = ck.scalar("model.kind");
  if (kind_code < 0 || kind_code > 4 || kind_code != std::floor(kind_code)) {
    throw FormatError("checkpoint has an unknown model kind " + std::to_string(kind_code));
  }
  const auto kind = static_cast<ModelKind>(static_cast<int>(kind_code));
  const auto res = static_cast<std::size_t>(ck.scalar("model.resolution"));
  const auto g = ck.get<double>("model.geometry");
  const auto geo = phosim::AxonMapGeometry::deserialize(g.values());
  const double norm = ck.scalar("model.normalization");
  const bool swapped = ck.scalar_or("model.swapped", 0.0) != 0.0;
  switch (kind) {
    case ModelKind::kDown: return Encoder(kind, res, norm, geo, ck.scalar("down.gain"));
    case ModelKind::kLinear: return Encoder(kind, res, norm, geo, baselines::LinearBaseline::load(ck));
    case ModelKind::kNN: return Encoder(kind, res, norm, geo, baselines::NNBaseline::load(ck));
    default: return Encoder(kind, res, norm, geo, flows::FlowModel<float>::load(ck), swapped);
  }
}

std::vector<float> Encoder::encode(std::span<const float> targets, std::size_t count) {
  const std::size_t px = resolution_ * resolution_;
  if (targets.size() != count * px) {
    throw ShapeError("encode: expected " + std::to_string(count) + " images of " + std::to_string(px) + " pixels");
  }
  if (auto* gain = std::get_if<double>(&model_)) return baselines::encode_down(targets, count, resolution_, *gain);
  if (auto* lin = std::get_if<baselines::LinearBaseline>(&model_)) return lin->encode(targets, count);
  if (auto* net = std::get_if<baselines::NNBaseline>(&model_)) return net->encode(targets, count);
  const auto& flow = std::get<flows::FlowModel<float>>(model_);
  const std::size_t dim = flow.config().dim;
  ad::NoGrad<float> off;
  std::vector<float> out(count * kE);
  for (std::size_t s0 = 0; s0 < count; s0 += kEvalBatch) {
    const std::size_t s1 = std::min(count, s0 + kEvalBatch);
    const auto t = block_tensor(targets, px, s0, s1);
    ad::Tensor<float> stim;
    if (kind_ == ModelKind::kCINN) {
      const ad::Tensor<float> z(Array<float>({s1 - s0, kE}, 0.0f));
      stim = flow.inverse(z, t).value;
    } else if (swapped_) {
      stim = ad::slice(flow.inverse(flows::pad_to_dim(t, dim)).value, 1, 0, kE);
    } else {
      stim = ad::slice(flow.forward(flows::pad_to_dim(t, dim)).value, 1, 0, kE);
    }
    std::copy(stim.value().storage().begin(), stim.value().storage().end(), out.begin() + s0 * kE);
  }
  return out;
}

std::vector<float> render_percepts(std::span<const float> stimuli, std::size_t count, const phosim::EffectTable<float>& table,
                                   double normalization) {
  std::vector<float> out(count * table.pixel_count());
  table.render_batch(stimuli, count, out);
  const float inv = static_cast<float>(1.0 / normalization);
  for (auto& v : out) v = std::clamp(v * inv, 0.0f, 1.0f);
  return out;
}

Evaluation evaluate_model(Encoder& encoder, const data::LabeledImageSet& targets, const metrics::Classifier& classifier,
                          const std::filesystem::path& artifacts, std::size_t triptychs) {
  const std::size_t res = encoder.resolution();
  if (targets.height != res || targets.width != res) {
    throw ContractError("evaluation targets are " + std::to_string(targets.height) + "x" + std::to_string(targets.width) +
                        " but the checkpoint was trained at " + std::to_string(res) + "x" + std::to_string(res));
  }
  if (classifier.side() != res) {
    throw ContractError("classifier side " + std::to_string(classifier.side()) + " does not match resolution " +
                        std::to_string(res));
  }
  Evaluation ev;
  ev.stimuli = encoder.encode(targets.images, targets.count);
  const phosim::EffectTable<float> table(encoder.geometry());
  ev.percepts = render_percepts(ev.stimuli, targets.count, table, encoder.normalization());
  ev.report = metrics::evaluate(ev.percepts, targets.images, targets.labels, res, res, classifier);
  if (!artifacts.empty()) {
    std::filesystem::create_directories(artifacts);
    const std::size_t px = res * res;
    for (std::size_t i = 0; i < std::min(triptychs, targets.count); ++i) {
      const auto target = to_double(targets.image(i));
      const auto stim = resize_nearest(to_double({ev.stimuli.data() + i * kE, kE}), 9, 9, res, res);
      // Stimulus panel mapped from [-3, 3] so that zero is mid-grey.
      std::vector<double> stim_panel(stim.size());
      for (std::size_t k = 0; k < stim.size(); ++k)
        stim_panel[k] = std::clamp((stim[k] + data::kAmplitudeLimit) / (2.0 * data::kAmplitudeLimit), 0.0, 1.0);
      const auto percept = to_double({ev.percepts.data() + i * px, px});
      std::size_t w = 0;
      const auto row = hstack({target, stim_panel, percept}, res, {res, res, res}, w);
      char name[32];
      std::snprintf(name, sizeof name, "triptych_%02zu.pgm", i);
      write_pgm(artifacts / name, row, res, w, 0.0, 1.0);
    }
  }
  return ev;
}

double heldout_stimulus_mse(Encoder& encoder, const data::PairDataset& ds) {
  if (ds.height != encoder.resolution()) throw ContractError("held-out set resolution does not match the encoder");
  std::vector<float> inputs(ds.percepts.size());
  const float inv = static_cast<float>(1.0 / ds.normalization);
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i] = ds.percepts[i] * inv;
  const auto pred = encoder.encode(inputs, ds.count);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - ds.stimuli[i]) * double(pred[i] - ds.stimuli[i]);
  return acc / static_cast<double>(pred.size());
}

LatentStatistics latent_statistics(const flows::FlowModel<float>& cinn, const data::PairDataset& ds) {
  ad::NoGrad<float> off;
  const std::size_t px = ds.pixels();
  const float inv = static_cast<float>(1.0 / ds.normalization);
  std::vector<double> sum(kE, 0.0), sq(kE, 0.0);
  for (std::size_t s0 = 0; s0 < ds.count; s0 += kEvalBatch) {
    const std::size_t s1 = std::min(ds.count, s0 + kEvalBatch);
    const auto z = cinn.forward(block_tensor(ds.stimuli, kE, s0, s1), block_tensor(ds.percepts, px, s0, s1, inv)).value;
    for (std::size_t r = 0; r < s1 - s0; ++r)
      for (std::size_t j = 0; j < kE; ++j) {
        const double v = z.value()[r * kE + j];
        sum[j] += v;
        sq[j] += v * v;
      }
  }
  LatentStatistics st;
  const double n = static_cast<double>(ds.count);
  for (std::size_t j = 0; j < kE; ++j) {
    st.mean.push_back(sum[j] / n);
    st.variance.push_back(sq[j] / n - (sum[j] / n) * (sum[j] / n));
  }
  return st;
}

double generated_loglik(const flows::FlowModel<float>& cinn, std::span<const float> z, std::span<const float> condition) {
  ad::NoGrad<float> off;
  const auto inv = cinn.inverse(ad::Tensor<float>(Array<float>({1, z.size()}, {z.begin(), z.end()})),
                                ad::Tensor<float>(Array<float>({1, condition.size()}, {condition.begin(), condition.end()})));
  double sq = 0.0;
  for (float v : z) sq += double(v) * v;
  const double n = static_cast<double>(z.size());
  return -0.5 * sq - 0.5 * n * std::log(2.0 * std::numbers::pi) - inv.logdet.value()[0];
}

namespace {

std::vector<float> loglik_gradient(const flows::FlowModel<float>& cinn, std::span<const float> z,
                                   const ad::Tensor<float>& condition) {
  ad::GradientTape<float> tape;
  auto zt = ad::Tensor<float>::parameter(Array<float>({1, z.size()}, {z.begin(), z.end()}));
  const auto inv = cinn.inverse(zt, condition);
  const auto ll = ad::sub(ad::mul_scalar(ad::sum(ad::square(zt)), -0.5f), ad::sum(inv.logdet));
  tape.backward(ll);
  const auto& g = *zt.grad();
  return {g.storage().begin(), g.storage().end()};
}

}  // namespace

std::vector<LatentResult> optimize_latent(Encoder& encoder, const data::LabeledImageSet& targets, const LatentOptions& opts) {
  if (encoder.kind() != ModelKind::kCINN) throw ContractError("latent optimization needs a cINN checkpoint");
  if (targets.height != encoder.resolution()) throw ContractError("target resolution does not match the checkpoint");
  if (!(opts.rate > 0.0)) throw ParameterError("latent rate must be positive");
  const auto& flow = encoder.flow();
  const std::size_t px = targets.pixels();
  const phosim::EffectTable<float> table(encoder.geometry());
  const auto stim0 = encoder.encode(targets.images, targets.count);
  const auto per0 = render_percepts(stim0, targets.count, table, encoder.normalization());
  std::vector<double> base(targets.count);
  for (std::size_t i = 0; i < targets.count; ++i)
    base[i] = metrics::mse({per0.data() + i * px, px}, targets.image(i));
  std::vector<std::size_t> order(targets.count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return base[a] > base[b]; });
  order.resize(std::min(opts.worst_k, order.size()));

  std::vector<LatentResult> results(order.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t i = order[k];
    LatentResult r;
    r.index = i;
    r.old_mse = base[i];
    r.new_mse = base[i];
    const auto cond_span = targets.image(i);
    const ad::Tensor<float> cond(Array<float>({1, px}, {cond_span.begin(), cond_span.end()}));
    std::vector<float> z(kE, 0.0f);
    double ll = generated_loglik(flow, z, cond_span);
    r.loglik.push_back(ll);
    if (!std::isfinite(ll)) r.aborted = true;
    for (std::size_t step = 0; step < opts.steps && !r.aborted; ++step) {
      const auto g = loglik_gradient(flow, z, cond);
      if (!std::all_of(g.begin(), g.end(), [](float v) { return std::isfinite(v); })) {
        r.aborted = true;
        break;
      }
      double rate = opts.rate;
      bool accepted = false;
      for (std::size_t h = 0; h <= opts.max_halvings && !accepted; ++h, rate *= 0.5) {
        std::vector<float> trial(kE);
        for (std::size_t j = 0; j < kE; ++j) trial[j] = z[j] + static_cast<float>(rate) * g[j];
        const double ll_trial = generated_loglik(flow, trial, cond_span);
        if (std::isfinite(ll_trial) && ll_trial >= ll) {
          z = std::move(trial);
          ll = ll_trial;
          accepted = true;
        }
      }
      if (!accepted) break;
      r.loglik.push_back(ll);
    }
    if (!r.aborted) {
      ad::NoGrad<float> off;
      const auto stim = flow.inverse(ad::Tensor<float>(Array<float>({1, kE}, z)), cond).value;
      const auto per = render_percepts(stim.value().storage(), 1, table, encoder.normalization());
      r.new_mse = metrics::mse(per, cond_span);
    } else {
      r.loglik.resize(1);
    }
    results[k] = std::move(r);
  }
  return results;
}

void write_latent_csv(const std::filesystem::path& path, const std::vector<LatentResult>& results) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.precision(10);
  os << "index,old_mse,new_mse,improved,steps,loglik_start,loglik_end,aborted\n";
  for (const auto& r : results) {
    os << r.index << ',' << r.old_mse << ',' << r.new_mse << ',' << (r.new_mse < r.old_mse ? 1 : 0) << ','
       << r.loglik.size() - 1 << ',' << r.loglik.front() << ',' << r.loglik.back() << ',' << (r.aborted ? 1 : 0) << '\n';
  }
}

std::vector<ScanRow> likelihood_mse_scan(Encoder& encoder, const data::LabeledImageSet& mnist,
                                         const data::PairDataset* random, std::size_t random_count) {
  if (encoder.kind() != ModelKind::kCINN) throw ContractError("the likelihood scan needs a cINN checkpoint");
  const std::size_t res = encoder.resolution();
  if (mnist.height != res) throw ContractError("MNIST resolution does not match the checkpoint");
  const std::size_t px = res * res;
  const auto& flow = encoder.flow();
  const phosim::EffectTable<float> table(encoder.geometry());
  std::vector<ScanRow> rows;
  auto scan = [&](const std::string& type, std::span<const float> targets, std::size_t count) {
    const auto stim = encoder.encode(targets, count);
    const auto per = render_percepts(stim, count, table, encoder.normalization());
    ad::NoGrad<float> off;
    for (std::size_t s0 = 0; s0 < count; s0 += kEvalBatch) {
      const std::size_t s1 = std::min(count, s0 + kEvalBatch);
      const ad::Tensor<float> z(Array<float>({s1 - s0, kE}, 0.0f));
      const auto inv = flow.inverse(z, block_tensor(targets, px, s0, s1));
      for (std::size_t i = s0; i < s1; ++i) {
        rows.push_back({type, i, -static_cast<double>(inv.logdet.value()[i - s0]),
                        metrics::mse({per.data() + i * px, px}, targets.subspan(i * px, px))});
      }
    }
  };
  scan("mnist", mnist.images, mnist.count);
  if (random && random_count > 0) {
    if (random->height != res) throw ContractError("random set resolution does not match the checkpoint");
    const std::size_t n = std::min(random_count, random->count);
    std::vector<float> t(n * px);
    const float inv = static_cast<float>(1.0 / random->normalization);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::min(1.0f, random->percepts[i] * inv);
    scan("random", t, n);
  }
  return rows;
}

void write_scan_csv(const std::filesystem::path& path, const std::vector<ScanRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.precision(10);
  os << "type,index,logdet,mse\n";
  for (const auto& r : rows) os << r.type << ',' << r.index << ',' << r.logdet << ',' << r.mse << '\n';
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("spearman needs two equal-length series of length >= 2");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

}  // namespace phosflow::pipeline

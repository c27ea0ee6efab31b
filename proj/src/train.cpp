// Copyright 2026 The ResCBAM-Det Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "rescbam/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "rescbam/error.hpp"

namespace rescbam {

// ---------------------------------------------------------------------------
// config

void TrainConfig::validate() const {
  if (optimizer != "sgd") fail("config: optimizer must be sgd, got '" + optimizer + "'");
  if (!(lr0 > 0)) fail("config: lr0 must be positive");
  if (!(lrf > 0 && lrf <= 1)) fail("config: lrf must be in (0, 1]");
  if (!(momentum >= 0 && momentum < 1)) fail("config: momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) fail("config: weight_decay must be non-negative");
  if (epochs < 1) fail("config: epochs must be >= 1");
  if (batch_size < 1) fail("config: batch_size must be >= 1");
  if (input_size == 0 || input_size % 32 != 0) fail("config: input_size must be a positive multiple of 32");
  if (num_classes < 1) fail("config: num_classes must be >= 1");
  if (!(loss.box >= 0 && loss.cls >= 0 && loss.dfl >= 0)) fail("config: loss weights must be non-negative");
  if (assign_top_k < 1) fail("config: assign_top_k must be >= 1");
  if (!(cells_per_box > 0)) fail("config: cells_per_box must be positive");
  const auto& a = augment_ranges;
  if (!(a.alpha_min > 0 && a.alpha_max >= a.alpha_min)) fail("config: augmentation alpha range invalid");
  if (!(a.beta_max >= a.beta_min)) fail("config: augmentation beta range invalid");
  if (!(conf_threshold >= 0 && conf_threshold <= 1)) fail("config: conf_threshold must be in [0, 1]");
  if (!(eval_conf_threshold >= 0 && eval_conf_threshold <= 1)) fail("config: eval_conf_threshold must be in [0, 1]");
  if (!(iou_threshold > 0 && iou_threshold <= 1)) fail("config: iou_threshold must be in (0, 1]");
  if (max_detections < 1) fail("config: max_detections must be >= 1");
  model_spec().validate();
}

ModelSpec TrainConfig::model_spec() const {
  ModelSpec s = ModelSpec::preset(scale, num_classes, attention, input_size);
  s.reg_max = reg_max;
  s.bn_momentum = bn_momentum;
  return s;
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.lr0 = 1e-2;
  c.momentum = 0.937;
  c.weight_decay = 5e-4;
  c.epochs = 100;
  c.batch_size = 16;
  c.input_size = 1024;
  c.scale = "l";
  return c;
}

namespace {

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

std::string fmt_double(double v) { return fmt::format("{}", v); }

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) fail(fmt::format("config: '{}' expects a number, got '{}'", key, v));
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t out = 0;
  try {
    if (!v.empty() && v[0] != '-') out = std::stoull(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) fail(fmt::format("config: '{}' expects a non-negative integer, got '{}'", key, v));
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(fmt::format("config: '{}' expects true or false, got '{}'", key, v));
}

#define RESCBAM_DOUBLE(name, member)                                                                 \
  Field {                                                                                            \
    name, [](const TrainConfig& c) { return fmt_double(c.member); },                                 \
        [](TrainConfig& c, const std::string& v) { c.member = to_double(name, v); }                  \
  }
#define RESCBAM_UINT(name, member)                                                                   \
  Field {                                                                                            \
    name, [](const TrainConfig& c) { return std::to_string(c.member); },                             \
        [](TrainConfig& c, const std::string& v) { c.member = decltype(c.member)(to_uint(name, v)); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"optimizer", [](const TrainConfig& c) { return c.optimizer; },
            [](TrainConfig& c, const std::string& v) { c.optimizer = v; }},
      RESCBAM_DOUBLE("lr0", lr0),
      RESCBAM_DOUBLE("lrf", lrf),
      RESCBAM_DOUBLE("momentum", momentum),
      RESCBAM_DOUBLE("weight_decay", weight_decay),
      RESCBAM_UINT("epochs", epochs),
      RESCBAM_UINT("batch_size", batch_size),
      RESCBAM_UINT("input_size", input_size),
      RESCBAM_UINT("seed", seed),
      Field{"scale", [](const TrainConfig& c) { return c.scale; },
            [](TrainConfig& c, const std::string& v) { c.scale = v; }},
      Field{"attention", [](const TrainConfig& c) { return to_string(c.attention); },
            [](TrainConfig& c, const std::string& v) { c.attention = parse_attention_kind(v); }},
      RESCBAM_UINT("num_classes", num_classes),
      RESCBAM_UINT("reg_max", reg_max),
      RESCBAM_DOUBLE("bn_momentum", bn_momentum),
      RESCBAM_DOUBLE("loss_box", loss.box),
      RESCBAM_DOUBLE("loss_cls", loss.cls),
      RESCBAM_DOUBLE("loss_dfl", loss.dfl),
      RESCBAM_UINT("assign_top_k", assign_top_k),
      RESCBAM_DOUBLE("cells_per_box", cells_per_box),
      Field{"augment", [](const TrainConfig& c) { return std::string(c.augment ? "true" : "false"); },
            [](TrainConfig& c, const std::string& v) { c.augment = to_bool("augment", v); }},
      RESCBAM_DOUBLE("aug_alpha_min", augment_ranges.alpha_min),
      RESCBAM_DOUBLE("aug_alpha_max", augment_ranges.alpha_max),
      RESCBAM_DOUBLE("aug_beta_min", augment_ranges.beta_min),
      RESCBAM_DOUBLE("aug_beta_max", augment_ranges.beta_max),
      RESCBAM_DOUBLE("conf_threshold", conf_threshold),
      RESCBAM_DOUBLE("eval_conf_threshold", eval_conf_threshold),
      RESCBAM_DOUBLE("iou_threshold", iou_threshold),
      RESCBAM_UINT("max_detections", max_detections),
      Field{"ap_method", [](const TrainConfig& c) { return to_string(c.ap_method); },
            [](TrainConfig& c, const std::string& v) { c.ap_method = parse_ap_method(v); }},
  };
  return table;
}

#undef RESCBAM_DOUBLE
#undef RESCBAM_UINT

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (key == f.key) return f;
  }
  fail("config: unknown key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

bool TrainConfig::operator==(const TrainConfig& other) const {
  for (const auto& f : fields()) {
    if (f.get(*this) != f.get(other)) return false;
  }
  return true;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
  field(key).set(config, value);
}

std::string get_config_value(const TrainConfig& config, const std::string& key) { return field(key).get(config); }

std::string render_config(const TrainConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += fmt::format("{} = {}\n", f.key, f.get(config));
  return out;
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream lines(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(lines, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(fmt::format("config line {}: expected 'key = value'", number));
    try {
      set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(fmt::format("config line {}: {}", number, e.what()));
    }
  }
  return base;
}

std::string render_epoch_record(const EpochRecord& r) {
  std::string out = fmt::format("epoch={} lr={:.6g} loss={:.9g} bce={:.9g} dfl={:.9g} ciou={:.9g}", r.epoch, r.lr,
                                r.loss, r.bce, r.dfl, r.ciou);
  if (r.val_map50 >= 0) out += fmt::format(" val_map50={:.6f}", r.val_map50);
  return out;
}

// ---------------------------------------------------------------------------
// training

double learning_rate_at(const TrainConfig& c, std::size_t epoch_index) {
  if (c.epochs <= 1) return c.lr0;
  const double t = double(epoch_index) / double(c.epochs - 1);
  return c.lr0 * (1.0 - t * (1.0 - c.lrf));
}

namespace {

class Sgd {
 public:
  Sgd(ParamStore<float>& params, const TrainConfig& c) : params_(params), momentum_(c.momentum), decay_(c.weight_decay) {
    for (const auto& e : params.entries()) velocity_.emplace_back(e.trainable() ? e.tensor.numel() : 0, 0.0f);
  }

  void step(double lr) {
    auto& entries = params_.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& e = entries[i];
      if (!e.trainable()) continue;
      auto w = e.tensor.mutable_data();
      auto& v = velocity_[i];
      const bool decay = e.tensor.rank() >= 2;
      const auto g = e.tensor.has_grad() ? e.tensor.grad() : std::span<const float>();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const float gk = g.empty() ? 0.0f : g[k];
        v[k] = float(momentum_) * v[k] + gk;
        if (decay) w[k] -= float(lr * decay_) * w[k];
        w[k] -= float(lr) * v[k];
      }
    }
  }

 private:
  ParamStore<float>& params_;
  double momentum_, decay_;
  std::vector<std::vector<float>> velocity_;
};

void check_samples(const std::vector<Sample>& samples, const ModelSpec& spec, const char* what) {
  for (const auto& s : samples) {
    const auto& shape = s.image.shape();
    if (shape != Shape{3, spec.input_size, spec.input_size}) {
      fail_data(fmt::format("{} sample '{}' has image shape {}, model expects [3, {}, {}]", what, s.id,
                            shape_str(shape), spec.input_size, spec.input_size));
    }
    for (const auto& b : s.boxes) {
      if (b.class_id < 0 || std::size_t(b.class_id) >= spec.num_classes) {
        fail_data(fmt::format("{} sample '{}' has class {} but the model has {} classes", what, s.id, b.class_id,
                              spec.num_classes));
      }
    }
  }
}

}  // namespace

TrainOutcome train_model(const TrainConfig& config, const std::vector<Sample>& train, const std::vector<Sample>& val,
                         const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  return train_model(Model<float>::build(config.model_spec(), config.seed), config, train, val, on_epoch);
}

TrainOutcome train_model(Model<float> model, const TrainConfig& config, const std::vector<Sample>& train,
                         const std::vector<Sample>& val, const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  const ModelSpec& spec = model.spec();
  if (train.empty()) fail_data("training set has no samples");
  check_samples(train, spec, "train");
  check_samples(val, spec, "val");

  TrainOutcome out;
  out.batch_size = std::min(config.batch_size, train.size());
  if (out.batch_size < config.batch_size) {
    out.notes.push_back(fmt::format("batch size reduced from {} to {} to fit {} training samples", config.batch_size,
                                    out.batch_size, train.size()));
  }
  Rng rng(config.seed ^ 0x5eedf00dULL);
  Sgd sgd(model.params(), config);
  const AssignOptions assign{config.assign_top_k, config.cells_per_box};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  bool have_best = false;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    model.set_training(true);
    rng.shuffle(order.begin(), order.end());
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = learning_rate_at(config, epoch);
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += out.batch_size) {
      const std::size_t end = std::min(order.size(), start + out.batch_size);
      std::vector<Sample> batch;
      for (std::size_t k = start; k < end; ++k) {
        Sample s = train[order[k]];
        if (config.augment) s.image = augment_random(s.image, config.augment_ranges, rng);
        batch.push_back(std::move(s));
      }
      std::vector<const Sample*> ptrs;
      std::vector<std::vector<DetBox>> gts;
      for (const auto& s : batch) {
        ptrs.push_back(&s);
        gts.push_back(s.pixel_boxes());
      }
      const Tensor<float> images = stack_images(ptrs);

      Tape tape;
      LossBreakdown<float> loss;
      {
        TapeScope scope(tape);
        const auto raw = model.forward(images);
        AssignedTargets targets;
        {
          NoGradScope no_grad;
          targets = assign_targets(raw, spec, gts, assign);
        }
        loss = total_loss(raw, targets, spec, config.loss);
      }
      if (!std::isfinite(loss.total_value())) {
        throw Error(Errc::internal, fmt::format("non-finite loss at epoch {}", rec.epoch));
      }
      model.params().zero_grad();
      tape.backward(loss.total);
      sgd.step(rec.lr);
      rec.loss += loss.total_value();
      rec.bce += loss.bce_value();
      rec.dfl += loss.dfl_value();
      rec.ciou += loss.ciou_value();
      ++batches;
    }
    rec.loss /= double(batches);
    rec.bce /= double(batches);
    rec.dfl /= double(batches);
    rec.ciou /= double(batches);

    if (!val.empty()) {
      rec.val_map50 = evaluate_model(model, val, config).report.map50;
      if (!have_best || rec.val_map50 > out.best_val_map50) {
        out.best_val_map50 = rec.val_map50;
        out.best = model.convert<float>();
        have_best = true;
      }
    }
    out.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  model.set_training(false);
  if (!have_best) out.best = model.convert<float>();
  out.best.set_training(false);
  out.last = std::move(model);
  return out;
}

// ---------------------------------------------------------------------------
// inference

PredictionRun predict_samples(Model<float>& model, const std::vector<Sample>& samples, const DecodeOptions& options,
                              std::size_t batch_size) {
  const bool was_training = model.training();
  model.set_training(false);
  NoGradScope no_grad;
  PredictionRun out;
  double ms = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<const Sample*> ptrs;
    for (std::size_t k = start; k < end; ++k) ptrs.push_back(&samples[k]);
    const auto t0 = std::chrono::steady_clock::now();
    const auto raw = model.forward(stack_images(ptrs));
    auto boxes = decode_boxes(raw, model.spec(), options);
    ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    for (auto& b : boxes) out.boxes.push_back(std::move(b));
  }
  out.ms_per_image = samples.empty() ? 0.0 : ms / double(samples.size());
  model.set_training(was_training);
  return out;
}

EvalRun evaluate_model(Model<float>& model, const std::vector<Sample>& samples, const TrainConfig& config) {
  if (samples.empty()) fail_data("no samples to evaluate");
  check_samples(samples, model.spec(), "eval");
  const auto preds = predict_samples(
      model, samples, DecodeOptions{config.eval_conf_threshold, config.iou_threshold, config.max_detections});
  std::vector<std::vector<DetBox>> gts;
  for (const auto& s : samples) gts.push_back(s.pixel_boxes());
  EvalRun out;
  out.report = evaluate(preds.boxes, gts, model.spec().num_classes, EvalOptions{config.ap_method});
  out.params = model.parameter_count();
  out.flops = model.flops();
  out.ms_per_image = preds.ms_per_image;
  return out;
}

// ---------------------------------------------------------------------------
// ablation

std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::vector<std::size_t>& input_sizes,
                                      const std::vector<AttentionKind>& variants, const std::vector<Sample>& train,
                                      const std::vector<Sample>& test) {
  if (input_sizes.empty() || variants.empty()) fail("ablation: need at least one input size and one variant");
  if (test.empty()) fail_data("ablation: no test samples");
  std::vector<AblationRow> rows;
  for (std::size_t size : input_sizes) {
    auto resized = [size](const std::vector<Sample>& in) {
      std::vector<Sample> out = in;
      for (auto& s : out) s.image = resize_square(s.image, size);
      return out;
    };
    const auto train_s = resized(train), test_s = resized(test);
    for (AttentionKind kind : variants) {
      TrainConfig c = base;
      c.input_size = size;
      c.attention = kind;
      auto outcome = train_model(c, train_s, {});
      const auto run = evaluate_model(outcome.last, test_s, c);
      rows.push_back({kind == AttentionKind::none ? "baseline" : "+" + to_string(kind), size, run.params, run.flops,
                      run.report.f1, run.report.map50, run.report.map5095, run.ms_per_image});
    }
  }
  return rows;
}

std::string render_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = fmt::format("{:<12} {:>6} {:>10} {:>12} {:>7} {:>8} {:>10} {:>10}\n", "model", "size", "params",
                                "flops", "F1", "mAP50", "mAP50-95", "ms/img");
  for (const auto& r : rows) {
    out += fmt::format("{:<12} {:>6} {:>10} {:>12} {:>7.4f} {:>8.4f} {:>10.4f} {:>10.3f}\n", r.variant, r.input_size,
                       r.params, r.flops, r.f1, r.map50, r.map5095, r.ms_per_image);
  }
  return out;
}

}  // namespace rescbam

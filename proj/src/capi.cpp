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

#include "rescbam/rescbam.h"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <sstream>
#include <string>

#include <fmt/format.h>

#include "rescbam/data.hpp"
#include "rescbam/error.hpp"
#include "rescbam/gradcheck.hpp"
#include "rescbam/train.hpp"
#include "rescbam/weights.hpp"

struct rcb_config {
  rescbam::TrainConfig value;
};

struct rcb_dataset {
  rescbam::Dataset value;
};

struct rcb_model {
  rescbam::Model<float> value;
};

namespace {

using rescbam::Errc;
using rescbam::Error;

thread_local std::string g_last_error;

rcb_status set_error(rcb_status code, const std::string& message) {
  g_last_error = message;
  return code;
}

template <typename F>
rcb_status guarded(F&& body) {
  try {
    g_last_error.clear();
    body();
    return RCB_OK;
  } catch (const Error& e) {
    switch (e.code()) {
      case Errc::invalid_argument:
        return set_error(RCB_ERR_USAGE, e.what());
      case Errc::data:
        return set_error(RCB_ERR_DATA, e.what());
      case Errc::check_failed:
        return set_error(RCB_ERR_CHECK, e.what());
      default:
        return set_error(RCB_ERR_INTERNAL, e.what());
    }
  } catch (const std::filesystem::filesystem_error& e) {
    return set_error(RCB_ERR_DATA, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(RCB_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(RCB_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(RCB_ERR_INTERNAL, "unknown failure");
  }
}

void require(const void* p, const char* what) {
  if (!p) rescbam::fail(std::string(what) + " must not be NULL");
}

void write_text(const std::string& text, char* buf, size_t cap, size_t* needed) {
  if (needed) *needed = text.size() + 1;
  if (!buf || cap < text.size() + 1) rescbam::fail(fmt::format("buffer of {} bytes too small, need {}", cap, text.size() + 1));
  std::memcpy(buf, text.c_str(), text.size() + 1);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) rescbam::fail_data(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) rescbam::fail_data(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

std::vector<rescbam::Sample> select(const rcb_dataset* ds, const char* split) {
  return ds->value.subset(split ? split : "all");
}

}  // namespace

extern "C" {

const char* rcb_last_error(void) { return g_last_error.c_str(); }

const char* rcb_version(void) { return "0.1.0"; }

// ---- config ----

rcb_status rcb_config_new(const char* preset, rcb_config** out) {
  return guarded([&] {
    require(out, "out");
    const std::string name = preset ? preset : "desk";
    rescbam::TrainConfig c;
    if (name == "paper") {
      c = rescbam::TrainConfig::paper();
    } else if (name != "desk") {
      rescbam::fail("unknown config preset '" + name + "' (expected desk or paper)");
    }
    *out = new rcb_config{c};
  });
}

void rcb_config_free(rcb_config* config) { delete config; }

rcb_status rcb_config_load(rcb_config* config, const char* path) {
  return guarded([&] {
    require(config, "config");
    require(path, "path");
    config->value = rescbam::parse_config(read_text(path), config->value);
  });
}

rcb_status rcb_config_set(rcb_config* config, const char* key, const char* value) {
  return guarded([&] {
    require(config, "config");
    require(key, "key");
    require(value, "value");
    rescbam::set_config_value(config->value, key, value);
  });
}

rcb_status rcb_config_get(const rcb_config* config, const char* key, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require(config, "config");
    require(key, "key");
    write_text(rescbam::get_config_value(config->value, key), buf, cap, needed);
  });
}

rcb_status rcb_config_render(const rcb_config* config, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require(config, "config");
    write_text(rescbam::render_config(config->value), buf, cap, needed);
  });
}

size_t rcb_config_key_count(void) { return rescbam::config_keys().size(); }

const char* rcb_config_key(size_t index) {
  static const std::vector<std::string> keys = rescbam::config_keys();
  return index < keys.size() ? keys[index].c_str() : nullptr;
}

// ---- datasets ----

rcb_status rcb_dataset_load(const char* dir, size_t num_classes, size_t image_size, rcb_dataset** out) {
  return guarded([&] {
    require(dir, "dir");
    require(out, "out");
    *out = new rcb_dataset{rescbam::load_dataset(dir, num_classes, image_size)};
  });
}

rcb_status rcb_dataset_generate(size_t n, size_t num_classes, uint64_t seed, size_t image_size,
                                const double* imbalance, size_t imbalance_len, rcb_dataset** out) {
  return guarded([&] {
    require(out, "out");
    rescbam::SyntheticOptions o;
    o.image_size = image_size;
    o.max_extent = std::min(o.max_extent * image_size / 64, image_size);
    o.min_extent = std::max<std::size_t>(2, o.min_extent * image_size / 64);
    if (imbalance) o.imbalance.assign(imbalance, imbalance + imbalance_len);
    rescbam::Dataset ds;
    ds.samples = rescbam::generate_synthetic_dataset(n, num_classes, seed, o);
    *out = new rcb_dataset{std::move(ds)};
  });
}

void rcb_dataset_free(rcb_dataset* dataset) { delete dataset; }

rcb_status rcb_dataset_split(rcb_dataset* dataset, uint64_t seed, double train, double val, double test) {
  return guarded([&] {
    require(dataset, "dataset");
    std::vector<std::string> ids;
    for (const auto& s : dataset->value.samples) ids.push_back(s.id);
    dataset->value.manifest = rescbam::split_dataset(ids, seed, rescbam::SplitRatios{train, val, test});
  });
}

rcb_status rcb_dataset_save(const rcb_dataset* dataset, const char* dir) {
  return guarded([&] {
    require(dataset, "dataset");
    require(dir, "dir");
    rescbam::write_dataset(dir, dataset->value.samples, dataset->value.manifest);
  });
}

rcb_status rcb_dataset_count(const rcb_dataset* dataset, const char* split, size_t* count) {
  return guarded([&] {
    require(dataset, "dataset");
    require(count, "count");
    *count = select(dataset, split).size();
  });
}

rcb_status rcb_dataset_clipped_labels(const rcb_dataset* dataset, size_t* count) {
  return guarded([&] {
    require(dataset, "dataset");
    require(count, "count");
    *count = dataset->value.clipped_labels;
  });
}

// ---- models ----

rcb_status rcb_model_build(const rcb_config* config, rcb_model** out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    config->value.validate();
    auto model = rescbam::Model<float>::build(config->value.model_spec(), config->value.seed);
    model.set_training(false);
    *out = new rcb_model{std::move(model)};
  });
}

rcb_status rcb_model_load(const char* path, rcb_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto model = rescbam::load_weights(path);
    model.set_training(false);
    *out = new rcb_model{std::move(model)};
  });
}

rcb_status rcb_model_save(const rcb_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    rescbam::save_weights(path, model->value);
  });
}

rcb_status rcb_model_info_get(rcb_model* model, rcb_model_info* info) {
  return guarded([&] {
    require(model, "model");
    require(info, "info");
    const auto& spec = model->value.spec();
    rcb_model_info out{};
    out.num_classes = spec.num_classes;
    out.input_size = spec.input_size;
    out.reg_max = spec.reg_max;
    out.params = model->value.parameter_count();
    out.flops = model->value.flops();
    out.attention_blocks = model->value.attention_block_count();
    const std::string kind = rescbam::to_string(spec.attention);
    std::snprintf(out.attention, sizeof out.attention, "%s", kind.c_str());
    *info = out;
  });
}

void rcb_model_free(rcb_model* model) { delete model; }

rcb_status rcb_class_name(size_t num_classes, size_t index, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    const auto names = rescbam::default_class_names(num_classes);
    if (index >= names.size()) rescbam::fail(fmt::format("class index {} outside [0, {})", index, num_classes));
    write_text(names[index], buf, cap, needed);
  });
}

// ---- training ----

rcb_status rcb_train(const rcb_config* config, const rcb_dataset* dataset, const char* train_split,
                     const char* val_split, const rcb_model* initial, rcb_epoch_fn on_epoch, rcb_note_fn on_note,
                     void* user, rcb_model** last, rcb_model** best) {
  return guarded([&] {
    require(config, "config");
    require(dataset, "dataset");
    require(last, "last");
    require(best, "best");
    const auto train = select(dataset, train_split ? train_split : "train");
    if (train.empty()) rescbam::fail_data("training split has no samples");
    const auto val = val_split ? select(dataset, val_split) : std::vector<rescbam::Sample>{};
    auto callback = [&](const rescbam::EpochRecord& r) {
      if (!on_epoch) return;
      const rcb_epoch_record rec{r.epoch, r.lr, r.loss, r.bce, r.dfl, r.ciou, r.val_map50};
      on_epoch(&rec, rescbam::render_epoch_record(r).c_str(), user);
    };
    rescbam::TrainOutcome outcome;
    if (initial) {
      const auto& spec = initial->value.spec();
      if (spec.num_classes != config->value.num_classes) {
        rescbam::fail_data(fmt::format("weights have {} classes, config has {}", spec.num_classes,
                                       config->value.num_classes));
      }
      outcome = rescbam::train_model(initial->value.convert<float>(), config->value, train, val, callback);
    } else {
      outcome = rescbam::train_model(config->value, train, val, callback);
    }
    if (on_note) {
      for (const auto& n : outcome.notes) on_note(n.c_str(), user);
    }
    *last = new rcb_model{std::move(outcome.last)};
    *best = new rcb_model{std::move(outcome.best)};
  });
}

// ---- evaluation and inference ----

rcb_status rcb_evaluate(rcb_model* model, const rcb_config* config, const rcb_dataset* dataset, const char* split,
                        const char* report_dir, rcb_eval_summary* summary) {
  return guarded([&] {
    require(model, "model");
    require(config, "config");
    require(dataset, "dataset");
    const auto samples = select(dataset, split);
    if (samples.empty()) rescbam::fail_data(fmt::format("no samples in split '{}'", split ? split : "all"));
    const auto run = rescbam::evaluate_model(model->value, samples, config->value);
    if (report_dir) {
      const std::filesystem::path dir(report_dir);
      std::filesystem::create_directories(dir);
      const auto& spec = model->value.spec();
      write_text_file(dir / "report.txt",
                      rescbam::render_report_text(run.report, rescbam::default_class_names(spec.num_classes)));
      write_text_file(dir / "report.kv", rescbam::render_report_kv(run.report, {
                                                                                   {"params", std::to_string(run.params)},
                                                                                   {"flops", std::to_string(run.flops)},
                                                                                   {"ms_per_image", fmt::format("{:.3f}", run.ms_per_image)},
                                                                                   {"images", std::to_string(samples.size())},
                                                                               }));
      write_text_file(dir / "pr_curve.csv", rescbam::render_pr_csv(run.report));
    }
    if (summary) {
      *summary = rcb_eval_summary{run.report.map50, run.report.map5095, run.report.f1, run.ms_per_image,
                                  run.params,       run.flops,          run.report.gt, run.report.predictions,
                                  run.report.matched, samples.size()};
    }
  });
}

rcb_status rcb_predict_image(rcb_model* model, const char* image_path, double conf_threshold, double iou_threshold,
                             rcb_detection* out, size_t cap, size_t* count, const char* annotated_ppm) {
  return guarded([&] {
    require(model, "model");
    require(image_path, "image_path");
    require(count, "count");
    if (!(conf_threshold >= 0 && conf_threshold <= 1)) rescbam::fail("conf_threshold must be in [0, 1]");
    if (!(iou_threshold > 0 && iou_threshold <= 1)) rescbam::fail("iou_threshold must be in (0, 1]");
    const auto image = rescbam::load_image(image_path);
    const double H = double(image.dim(1)), W = double(image.dim(2));
    const std::size_t S = model->value.spec().input_size;
    rescbam::Sample sample;
    sample.id = "input";
    sample.image = rescbam::resize_square(image, S);
    const auto run = rescbam::predict_samples(model->value, {sample},
                                              rescbam::DecodeOptions{conf_threshold, iou_threshold, 300}, 1);
    std::vector<rescbam::DetBox> boxes;
    for (const auto& b : run.boxes.front()) {
      const double sx = W / double(S), sy = H / double(S);
      const double x1 = std::clamp(b.x1() * sx, 0.0, W), x2 = std::clamp(b.x2() * sx, 0.0, W);
      const double y1 = std::clamp(b.y1() * sy, 0.0, H), y2 = std::clamp(b.y2() * sy, 0.0, H);
      boxes.push_back(rescbam::DetBox::from_corners(x1, y1, x2, y2, b.class_id, b.confidence));
    }
    *count = boxes.size();
    for (std::size_t i = 0; i < boxes.size() && i < cap && out; ++i) {
      out[i] = rcb_detection{boxes[i].class_id, boxes[i].confidence, boxes[i].x1(), boxes[i].y1(), boxes[i].x2(),
                             boxes[i].y2()};
    }
    if (annotated_ppm) rescbam::write_ppm(annotated_ppm, rescbam::draw_boxes(image, boxes));
  });
}

// ---- verification and experiments ----

rcb_status rcb_gradcheck(const char* scope, uint64_t seed, rcb_text_fn on_table, void* user) {
  bool passed = true;
  const rcb_status st = guarded([&] {
    const auto reports = rescbam::run_gradcheck(rescbam::gradcheck_suite(scope ? scope : "all"), seed);
    if (on_table) on_table(rescbam::render_gradcheck_table(reports).c_str(), user);
    for (const auto& r : reports) {
      if (!r.passed()) {
        passed = false;
        g_last_error = "gradient check failed: " + r.name;
        break;
      }
    }
  });
  if (st != RCB_OK) return st;
  return passed ? RCB_OK : RCB_ERR_CHECK;
}

rcb_status rcb_ablate(const rcb_config* config, const rcb_dataset* dataset, const char* train_split,
                      const char* test_split, const size_t* input_sizes, size_t n_sizes, rcb_text_fn on_table,
                      void* user) {
  return guarded([&] {
    require(config, "config");
    require(dataset, "dataset");
    require(input_sizes, "input_sizes");
    const std::vector<std::size_t> sizes(input_sizes, input_sizes + n_sizes);
    const auto rows = rescbam::run_ablation(config->value, sizes,
                                            {rescbam::AttentionKind::none, rescbam::AttentionKind::rescbam},
                                            select(dataset, train_split), select(dataset, test_split));
    if (on_table) on_table(rescbam::render_ablation_table(rows).c_str(), user);
  });
}

}  // extern "C"

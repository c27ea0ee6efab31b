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

// rescbam: train, eval, predict, gradcheck, gen-data, ablate, show-config.
// Exit codes follow rcb_status: 0 ok, 1 usage, 2 data, 3 check, 4 internal.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "rescbam/rescbam.h"

namespace fs = std::filesystem;

namespace {

struct Failure {
  rcb_status code;
};

// Library messages already name the failing stage; `context` covers the rare
// empty message.
void check(rcb_status st, const std::string& context) {
  if (st == RCB_OK) return;
  const std::string message = rcb_last_error();
  spdlog::error("{}", message.empty() ? context + " failed" : message);
  throw Failure{st};
}

[[noreturn]] void usage(const std::string& message) {
  spdlog::error("{}", message);
  throw Failure{RCB_ERR_USAGE};
}

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using ConfigPtr = std::unique_ptr<rcb_config, Deleter<rcb_config, rcb_config_free>>;
using DatasetPtr = std::unique_ptr<rcb_dataset, Deleter<rcb_dataset, rcb_dataset_free>>;
using ModelPtr = std::unique_ptr<rcb_model, Deleter<rcb_model, rcb_model_free>>;

std::string fetch_text(const std::function<rcb_status(char*, size_t, size_t*)>& call, const std::string& context) {
  size_t needed = 0;
  call(nullptr, 0, &needed);
  std::string out(needed, '\0');
  check(call(out.data(), out.size(), &needed), context);
  out.resize(needed - 1);
  return out;
}

std::string config_get(const rcb_config* c, const std::string& key) {
  return fetch_text([&](char* b, size_t cap, size_t* n) { return rcb_config_get(c, key.c_str(), b, cap, n); },
                    "config");
}

size_t config_size(const rcb_config* c, const std::string& key) { return std::stoull(config_get(c, key)); }

std::string class_name(size_t nc, size_t index) {
  return fetch_text([&](char* b, size_t cap, size_t* n) { return rcb_class_name(nc, index, b, cap, n); }, "class");
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    spdlog::error("cannot write '{}'", path.string());
    throw Failure{RCB_ERR_DATA};
  }
  out << text;
}

void text_to_stdout(const char* text, void*) { std::fputs(text, stdout); }

// Config file plus one --<key> override per config key.
struct ConfigArgs {
  std::string preset = "desk";
  std::string file;
  std::map<std::string, std::string> overrides;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--preset", preset, "Base values: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    app->add_option("--config", file, "Config file of 'key = value' lines");
    for (size_t i = 0; i < rcb_config_key_count(); ++i) {
      const std::string key = rcb_config_key(i);
      options[key] = app->add_option("--" + key, overrides[key], "Override config key " + key)->group("Config keys");
    }
  }

  bool given(const std::string& key) const { return options.at(key)->count() > 0; }

  ConfigPtr build() const {
    rcb_config* raw = nullptr;
    check(rcb_config_new(preset.c_str(), &raw), "config");
    ConfigPtr c(raw);
    if (!file.empty()) check(rcb_config_load(c.get(), file.c_str()), "config");
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) check(rcb_config_set(c.get(), key.c_str(), overrides.at(key).c_str()), "config");
    }
    return c;
  }
};

// Either a dataset directory or a freshly generated synthetic set.
struct DataArgs {
  std::string dir;
  size_t synthetic = 0;
  uint64_t data_seed = 0;
  std::vector<double> split{0.7, 0.2, 0.1};
  std::vector<double> imbalance;

  void attach(CLI::App* app) {
    auto* d = app->add_option("--data", dir, "Dataset directory (images/, labels/, split.txt)");
    auto* s = app->add_option("--synthetic", synthetic, "Generate this many synthetic images instead");
    d->excludes(s);
    app->add_option("--data-seed", data_seed, "Seed of the synthetic generator and its split");
    app->add_option("--ratios", split, "Train/val/test ratios for synthetic data")->expected(3);
    app->add_option("--imbalance", imbalance, "Per-class weights for synthetic data");
  }

  DatasetPtr load(size_t num_classes, size_t image_size) const {
    rcb_dataset* raw = nullptr;
    if (!dir.empty()) {
      check(rcb_dataset_load(dir.c_str(), num_classes, image_size, &raw), "data");
      DatasetPtr ds(raw);
      size_t clipped = 0;
      rcb_dataset_clipped_labels(ds.get(), &clipped);
      if (clipped) spdlog::warn("{} label boxes were clipped to the image", clipped);
      return ds;
    }
    if (synthetic == 0) usage("either --data or --synthetic is required");
    check(rcb_dataset_generate(synthetic, num_classes, data_seed, image_size, imbalance.empty() ? nullptr : imbalance.data(),
                               imbalance.size(), &raw),
          "data");
    DatasetPtr ds(raw);
    check(rcb_dataset_split(ds.get(), data_seed, split[0], split[1], split[2]), "split");
    return ds;
  }
};

size_t count_split(const rcb_dataset* ds, const std::string& split) {
  size_t n = 0;
  check(rcb_dataset_count(ds, split.c_str(), &n), "data");
  return n;
}

ModelPtr load_model(const std::string& path) {
  rcb_model* raw = nullptr;
  check(rcb_model_load(path.c_str(), &raw), "weights");
  return ModelPtr(raw);
}

rcb_model_info info_of(rcb_model* m) {
  rcb_model_info info{};
  check(rcb_model_info_get(m, &info), "model");
  return info;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  ConfigArgs config;
  DataArgs data;
  std::string out = "runs/train";
  std::string weights;
  std::string train_split = "train", val_split = "val";
};

struct TrainLog {
  std::ofstream file;
};

void on_epoch(const rcb_epoch_record*, const char* line, void* user) {
  spdlog::info("{}", line);
  auto* log = static_cast<TrainLog*>(user);
  log->file << line << '\n';
  log->file.flush();
}

void on_note(const char* message, void*) { spdlog::info("note: {}", message); }

void run_train(const TrainArgs& a) {
  auto cfg = a.config.build();
  ModelPtr initial;
  if (!a.weights.empty()) {
    initial = load_model(a.weights);
    const auto info = info_of(initial.get());
    if (a.config.given("num_classes") && config_size(cfg.get(), "num_classes") != info.num_classes) {
      spdlog::error("weights have {} classes, config has {}", info.num_classes, config_size(cfg.get(), "num_classes"));
      throw Failure{RCB_ERR_DATA};
    }
    check(rcb_config_set(cfg.get(), "num_classes", std::to_string(info.num_classes).c_str()), "config");
    check(rcb_config_set(cfg.get(), "input_size", std::to_string(info.input_size).c_str()), "config");
  }
  const size_t nc = config_size(cfg.get(), "num_classes");
  const size_t size = config_size(cfg.get(), "input_size");
  auto ds = a.data.load(nc, size);
  const bool with_val = a.val_split != "none";
  spdlog::info("training on {} images{}", count_split(ds.get(), a.train_split),
               with_val ? fmt::format(", validating on {}", count_split(ds.get(), a.val_split)) : std::string());

  const fs::path out(a.out);
  fs::create_directories(out);
  const std::string rendered =
      fetch_text([&](char* b, size_t cap, size_t* n) { return rcb_config_render(cfg.get(), b, cap, n); }, "config");
  write_file(out / "config.txt", rendered);

  TrainLog log;
  log.file.open(out / "train_log.txt", std::ios::binary);
  if (!log.file) {
    spdlog::error("cannot write '{}'", (out / "train_log.txt").string());
    throw Failure{RCB_ERR_DATA};
  }
  rcb_model* last = nullptr;
  rcb_model* best = nullptr;
  check(rcb_train(cfg.get(), ds.get(), a.train_split.c_str(), with_val ? a.val_split.c_str() : nullptr, initial.get(),
                  on_epoch, on_note, &log, &last, &best),
        "train");
  ModelPtr last_p(last), best_p(best);
  check(rcb_model_save(last, (out / "last.rcbm").string().c_str()), "save");
  check(rcb_model_save(best, (out / "best.rcbm").string().c_str()), "save");
  std::printf("wrote %s and %s\n", (out / "best.rcbm").string().c_str(), (out / "last.rcbm").string().c_str());
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  ConfigArgs config;
  DataArgs data;
  std::string weights;
  std::string split = "test";
  std::string report;
};

void run_eval(const EvalArgs& a) {
  auto cfg = a.config.build();
  auto model = load_model(a.weights);
  const auto info = info_of(model.get());
  if (a.config.given("num_classes") && config_size(cfg.get(), "num_classes") != info.num_classes) {
    spdlog::error("weights have {} classes, config has {}", info.num_classes, config_size(cfg.get(), "num_classes"));
    throw Failure{RCB_ERR_DATA};
  }
  auto ds = a.data.load(info.num_classes, info.input_size);
  rcb_eval_summary s{};
  check(rcb_evaluate(model.get(), cfg.get(), ds.get(), a.split.c_str(), a.report.empty() ? nullptr : a.report.c_str(),
                     &s),
        "eval");
  std::printf("images %zu\ngt %zu\npredictions %zu\nmap50 %.4f\nmap5095 %.4f\nf1 %.4f\nparams %zu\nflops %llu\nms_per_image %.3f\n",
              s.images, s.gt, s.predictions, s.map50, s.map5095, s.f1, s.params,
              static_cast<unsigned long long>(s.flops), s.ms_per_image);
  if (!a.report.empty()) spdlog::info("reports written to {}", a.report);
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string weights, image, annotate;
  double conf = 0.25, iou = 0.45;
};

void run_predict(const PredictArgs& a) {
  auto model = load_model(a.weights);
  const auto info = info_of(model.get());
  size_t count = 0;
  check(rcb_predict_image(model.get(), a.image.c_str(), a.conf, a.iou, nullptr, 0, &count, nullptr), "predict");
  std::vector<rcb_detection> dets(count);
  check(rcb_predict_image(model.get(), a.image.c_str(), a.conf, a.iou, dets.data(), dets.size(), &count,
                          a.annotate.empty() ? nullptr : a.annotate.c_str()),
        "predict");
  for (const auto& d : dets) {
    std::printf("%s %.4f %.1f %.1f %.1f %.1f\n", class_name(info.num_classes, size_t(d.class_id)).c_str(), d.confidence,
                d.x1, d.y1, d.x2, d.y2);
  }
  spdlog::info("{} detections", dets.size());
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  size_t count = 20, classes = 2, size = 64;
  uint64_t seed = 0;
  std::vector<double> split{0.7, 0.2, 0.1};
  std::vector<double> imbalance;
};

void run_gen(const GenArgs& a) {
  rcb_dataset* raw = nullptr;
  check(rcb_dataset_generate(a.count, a.classes, a.seed, a.size, a.imbalance.empty() ? nullptr : a.imbalance.data(),
                             a.imbalance.size(), &raw),
        "gen-data");
  DatasetPtr ds(raw);
  check(rcb_dataset_split(ds.get(), a.seed, a.split[0], a.split[1], a.split[2]), "split");
  check(rcb_dataset_save(ds.get(), a.out.c_str()), "gen-data");
  std::printf("wrote %zu images (train %zu, val %zu, test %zu) to %s\n", a.count, count_split(ds.get(), "train"),
              count_split(ds.get(), "val"), count_split(ds.get(), "test"), a.out.c_str());
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  ConfigArgs config;
  DataArgs data;
  std::vector<size_t> sizes{64, 128};
  std::string train_split = "train", test_split = "test";
};

void run_ablate(const AblateArgs& a) {
  auto cfg = a.config.build();
  const size_t nc = config_size(cfg.get(), "num_classes");
  auto ds = a.data.load(nc, config_size(cfg.get(), "input_size"));
  check(rcb_ablate(cfg.get(), ds.get(), a.train_split.c_str(), a.test_split.c_str(), a.sizes.data(), a.sizes.size(),
                   text_to_stdout, nullptr),
        "ablate");
}

void init_logging() {
  auto logger = spdlog::stderr_color_mt("rescbam");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("RESCBAM_LOG")) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off") {
      spdlog::warn("RESCBAM_LOG='{}' is not a log level; keeping info", env);
    } else {
      spdlog::set_level(level);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"YOLOv8 detector with residual CBAM attention"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(rcb_version()));

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model and write best/last weights");
  train.config.attach(t);
  train.data.attach(t);
  t->add_option("--out", train.out, "Output directory");
  t->add_option("--weights", train.weights, "Start from these weights");
  t->add_option("--train-split", train.train_split, "Split to train on (train, val, test or all)");
  t->add_option("--val-split", train.val_split, "Split for best-model selection, or none");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate weights on a dataset split");
  eval.config.attach(e);
  eval.data.attach(e);
  e->add_option("--weights", eval.weights, "Weights file")->required();
  e->add_option("--split", eval.split, "Split to evaluate (train, val, test or all)");
  e->add_option("--report", eval.report, "Directory for report.txt, report.kv and pr_curve.csv");

  PredictArgs predict;
  auto* p = app.add_subcommand("predict", "Detect objects in one PPM/PGM image");
  p->add_option("--weights", predict.weights, "Weights file")->required();
  p->add_option("--image", predict.image, "Input image")->required();
  p->add_option("--conf", predict.conf, "Confidence threshold");
  p->add_option("--iou", predict.iou, "NMS IoU threshold");
  p->add_option("--annotate", predict.annotate, "Write a PPM copy with boxes drawn");

  std::string scope = "all";
  uint64_t gc_seed = 0;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  g->add_option("--scope", scope, "op, module, model or all")->check(CLI::IsMember({"op", "module", "model", "all"}));
  g->add_option("--seed", gc_seed, "Seed of the random draws");

  GenArgs gen;
  auto* d = app.add_subcommand("gen-data", "Write a synthetic dataset with a split manifest");
  d->add_option("--out", gen.out, "Output directory")->required();
  d->add_option("--count", gen.count, "Number of images");
  d->add_option("--classes", gen.classes, "Number of classes");
  d->add_option("--size", gen.size, "Image side in pixels");
  d->add_option("--seed", gen.seed, "Generator and split seed");
  d->add_option("--ratios", gen.split, "Train/val/test ratios")->expected(3);
  d->add_option("--imbalance", gen.imbalance, "Per-class weights");

  AblateArgs ablate;
  auto* b = app.add_subcommand("ablate", "Baseline vs +ResCBAM at several input sizes");
  ablate.config.attach(b);
  ablate.data.attach(b);
  b->add_option("--sizes", ablate.sizes, "Input sizes, multiples of 32");
  b->add_option("--train-split", ablate.train_split, "Training split");
  b->add_option("--test-split", ablate.test_split, "Evaluation split");

  ConfigArgs show;
  auto* s = app.add_subcommand("show-config", "Print the effective config");
  show.attach(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : RCB_ERR_USAGE;
  }

  try {
    if (t->parsed()) {
      run_train(train);
    } else if (e->parsed()) {
      run_eval(eval);
    } else if (p->parsed()) {
      run_predict(predict);
    } else if (g->parsed()) {
      const rcb_status st = rcb_gradcheck(scope.c_str(), gc_seed, text_to_stdout, nullptr);
      if (st == RCB_ERR_CHECK) spdlog::error("{}", rcb_last_error());
      check(st == RCB_ERR_CHECK ? RCB_OK : st, "gradcheck");
      return st;
    } else if (d->parsed()) {
      run_gen(gen);
    } else if (b->parsed()) {
      run_ablate(ablate);
    } else if (s->parsed()) {
      auto cfg = show.build();
      std::fputs(fetch_text([&](char* buf, size_t cap, size_t* n) { return rcb_config_render(cfg.get(), buf, cap, n); },
                            "config")
                     .c_str(),
                 stdout);
    }
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& ex) {
    spdlog::error("{}", ex.what());
    return RCB_ERR_INTERNAL;
  }
  return 0;
}

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

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rescbam/data.hpp"
#include "rescbam/losses.hpp"
#include "rescbam/metrics.hpp"
#include "rescbam/model.hpp"

namespace rescbam {

struct TrainConfig {
  std::string optimizer = "sgd";
  double lr0 = 1e-2;
  double lrf = 0.01;  // final learning rate as a fraction of lr0
  double momentum = 0.937;
  double weight_decay = 5e-4;
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  std::size_t input_size = 64;
  std::uint64_t seed = 0;

  std::string scale = "nano";
  AttentionKind attention = AttentionKind::rescbam;
  std::size_t num_classes = 9;
  std::size_t reg_max = 16;
  double bn_momentum = 0.03;

  LossWeights loss;
  std::size_t assign_top_k = 10;
  double cells_per_box = 2.0;

  bool augment = true;
  AugmentRanges augment_ranges;

  double conf_threshold = 0.25;   // predict
  double eval_conf_threshold = 0.001;
  double iou_threshold = 0.45;
  std::size_t max_detections = 300;
  ApMethod ap_method = ApMethod::interp101;

  /// Throws naming the first violated constraint.
  void validate() const;
  ModelSpec model_spec() const;

  /// Values used for the published full-scale runs.
  static TrainConfig paper();

  bool operator==(const TrainConfig&) const;
};

std::vector<std::string> config_keys();
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const TrainConfig& config, const std::string& key);

/// Flat "key = value" lines; '#' starts a comment.
std::string render_config(const TrainConfig& config);
TrainConfig parse_config(const std::string& text, TrainConfig base = {});

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  double loss = 0, bce = 0, dfl = 0, ciou = 0;  // means over batches
  double val_map50 = -1;                        // -1 without a validation set

  bool operator==(const EpochRecord&) const = default;
};

std::string render_epoch_record(const EpochRecord& record);

struct TrainOutcome {
  Model<float> last;
  Model<float> best;  // best validation mAP 50; equals last without validation data
  std::vector<EpochRecord> log;
  double best_val_map50 = -1;
  std::size_t batch_size = 0;
  std::vector<std::string> notes;
};

/// SGD with momentum, decoupled weight decay on weight tensors, and a linear
/// learning-rate decay from lr0 to lrf * lr0. Rejects data whose images do
/// not match the configured input size before any step.
TrainOutcome train_model(const TrainConfig& config, const std::vector<Sample>& train, const std::vector<Sample>& val,
                         const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Continues from existing weights instead of a fresh build.
TrainOutcome train_model(Model<float> initial, const TrainConfig& config, const std::vector<Sample>& train,
                         const std::vector<Sample>& val, const std::function<void(const EpochRecord&)>& on_epoch = {});

double learning_rate_at(const TrainConfig& config, std::size_t epoch_index);

struct PredictionRun {
  std::vector<std::vector<DetBox>> boxes;
  double ms_per_image = 0;
};

/// Eval-mode inference in batches.
PredictionRun predict_samples(Model<float>& model, const std::vector<Sample>& samples, const DecodeOptions& options,
                              std::size_t batch_size = 8);

struct EvalRun {
  EvalReport report;
  std::size_t params = 0;
  std::uint64_t flops = 0;
  double ms_per_image = 0;
};

EvalRun evaluate_model(Model<float>& model, const std::vector<Sample>& samples, const TrainConfig& config);

struct AblationRow {
  std::string variant;
  std::size_t input_size = 0;
  std::size_t params = 0;
  std::uint64_t flops = 0;
  double f1 = 0, map50 = 0, map5095 = 0, ms_per_image = 0;
};

/// Baseline and attention variants trained and evaluated at each input size.
/// Images are resized to each size; labels are size-independent.
std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::vector<std::size_t>& input_sizes,
                                      const std::vector<AttentionKind>& variants, const std::vector<Sample>& train,
                                      const std::vector<Sample>& test);
std::string render_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace rescbam

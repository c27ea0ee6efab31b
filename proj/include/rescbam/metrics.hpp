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

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rescbam/box.hpp"

namespace rescbam {

enum class ApMethod { interp101, all_point };

std::string to_string(ApMethod method);
ApMethod parse_ap_method(const std::string& text);

/// IoU thresholds 0.50, 0.55, ..., 0.95.
inline constexpr std::size_t kIouThresholdCount = 10;
double iou_threshold_at(std::size_t index);

/// Greedy matching for one image and class. `preds` must already be sorted
/// by confidence, descending. Each prediction takes the unmatched gt with the
/// highest IoU (first on ties) when that IoU reaches `iou_threshold`.
std::vector<std::uint8_t> match_detections(std::span<const DetBox> preds, std::span<const DetBox> gts,
                                           double iou_threshold);

struct PrPoint {
  double recall = 0, precision = 0;
};

/// Cumulative precision/recall after each prediction in descending
/// confidence order (stable on ties).
std::vector<PrPoint> pr_curve(std::span<const double> confidences, std::span<const std::uint8_t> tp, std::size_t n_gt);

/// nullopt when the class has neither gts nor predictions; 0 when it has
/// predictions but no gts.
std::optional<double> average_precision(std::span<const double> confidences, std::span<const std::uint8_t> tp,
                                        std::size_t n_gt, ApMethod method = ApMethod::interp101);

struct ClassReport {
  int class_id = 0;
  std::size_t gt = 0, predictions = 0;
  std::array<double, kIouThresholdCount> ap{};  // per IoU threshold
  std::vector<PrPoint> pr;                      // at IoU 0.5

  double ap50() const { return ap[0]; }
  double ap5095() const;
};

struct EvalReport {
  std::vector<ClassReport> classes;
  double map50 = 0, map5095 = 0;
  double f1 = 0, f1_precision = 0, f1_recall = 0, f1_confidence = 0;
  std::size_t gt = 0, predictions = 0, matched = 0;  // matched: true positives at IoU 0.5
  ApMethod method = ApMethod::interp101;
};

struct EvalOptions {
  ApMethod method = ApMethod::interp101;
};

EvalReport evaluate(const std::vector<std::vector<DetBox>>& preds, const std::vector<std::vector<DetBox>>& gts,
                    std::size_t num_classes, const EvalOptions& options = {});

/// Human-readable table.
std::string render_report_text(const EvalReport& report, const std::vector<std::string>& class_names);
/// key=value lines; extras (params, flops, timing) are appended as given.
std::string render_report_kv(const EvalReport& report,
                             const std::vector<std::pair<std::string, std::string>>& extras = {});
/// class,recall,precision with six decimals.
std::string render_pr_csv(const EvalReport& report);

}  // namespace rescbam

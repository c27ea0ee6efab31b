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
#include <span>
#include <vector>

#include "rescbam/box.hpp"
#include "rescbam/model.hpp"

namespace rescbam {

inline constexpr double kProbabilityEpsilon = 1e-7;

/// Mean over elements of -w [y log x + (1-y) log(1-x)], x clamped to
/// [eps, 1-eps].
double bce_loss(std::span<const double> probs, std::span<const double> labels, double weight = 1.0);
double bce_loss(double prob, double label, double weight = 1.0);

/// Bracketing bins of a continuous target y in [0, reg_max] and the linear
/// interpolation weights that put y at their weighted mean.
struct DflTarget {
  double y = 0;
  std::size_t lower = 0;  // y_n; the upper bin is lower + 1
  double weight_lower = 1;  // y_{n+1} - y
  double weight_upper = 0;  // y - y_n

  static DflTarget make(double y, std::size_t reg_max);
};

/// -[(y_{n+1}-y) log S_n + (y-y_n) log S_{n+1}] over a probability vector of
/// reg_max + 1 bins.
double dfl_loss(std::span<const double> bin_probs, double y);

/// Aspect-ratio consistency term (4/pi^2)(atan(w_gt/h_gt) - atan(w_p/h_p))^2.
double aspect_term_v(double w_gt, double h_gt, double w_p, double h_p);

/// 1 - IoU + d^2/c^2 + v^2/((1 - IoU) + v). The last term is 0 when its
/// denominator vanishes (identical boxes).
double ciou_loss(const DetBox& pred, const DetBox& gt);

struct LossWeights {
  double box = 7.5;
  double cls = 0.5;
  double dfl = 1.5;
};

/// One positive cell.
struct CellMatch {
  std::size_t image = 0;
  std::size_t scale = 0;
  std::size_t cell = 0;  // row-major index within the scale's grid
  int class_id = 0;
  DetBox gt;             // pixels
  std::array<DflTarget, 4> sides;  // l, t, r, b in grid units
  double assign_iou = 0;
};

struct AssignedTargets {
  std::vector<CellMatch> matches;
  std::size_t num_images = 0;
  std::size_t unassigned_gt = 0;  // gts without any candidate cell centre

  std::size_t matched_count() const { return matches.size(); }
};

struct AssignOptions {
  std::size_t top_k = 10;
  /// A gt prefers the scale where sqrt(w*h)/stride is closest (in log scale)
  /// to this many cells.
  double cells_per_box = 2.0;
};

/// Scale whose stride best fits a gt of the given size, followed by the
/// remaining scales in order of fit.
std::vector<std::size_t> scale_preference(const DetBox& gt, std::span<const int> strides, double cells_per_box);

/// Centre-inside candidates, top-k by IoU between each candidate's decoded
/// box and the gt at the best-fitting scale that has candidates; a cell keeps
/// the gt with the highest IoU (ties: smaller gt area).
template <typename T>
AssignedTargets assign_targets(const RawPrediction<T>& raw, const ModelSpec& spec,
                               const std::vector<std::vector<DetBox>>& gt_boxes, const AssignOptions& options = {});

template <typename T>
struct LossBreakdown {
  Tensor<T> bce, dfl, ciou, total;
  LossWeights weights;

  double bce_value() const { return double(bce.item()); }
  double dfl_value() const { return double(dfl.item()); }
  double ciou_value() const { return double(ciou.item()); }
  double total_value() const { return double(total.item()); }
};

/// BCE over every cell and class, DFL and CIoU over matched cells; each term
/// is normalised by max(1, matched cells).
template <typename T>
LossBreakdown<T> total_loss(const RawPrediction<T>& raw, const AssignedTargets& targets, const ModelSpec& spec,
                            const LossWeights& weights = {});

}  // namespace rescbam

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

// Detection network: C2f backbone with SPPF, FPN+PAN neck with an optional
// attention block after each of its four C2f stages, and an anchor-free
// decoupled head predicting class logits and per-side distance
// distributions on strides 8/16/32.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rescbam/attention.hpp"
#include "rescbam/box.hpp"
#include "rescbam/ops.hpp"

namespace rescbam {

struct ModelSpec {
  std::size_t num_classes = 9;
  AttentionKind attention = AttentionKind::rescbam;
  double width_mult = 0.25;
  double depth_mult = 1.0 / 3.0;
  std::size_t reg_max = 16;  // distribution bins - 1
  std::vector<int> strides{8, 16, 32};
  std::size_t input_size = 64;
  double bn_momentum = 0.03;
  bool attention_mlp_bias = false;

  /// Throws naming the first violated constraint.
  void validate() const;

  std::size_t bins() const { return reg_max + 1; }
  /// Stage widths [stem, stage2, P3, P4, P5] after width scaling.
  std::vector<std::size_t> stage_channels() const;
  /// Backbone C2f depths after depth scaling.
  std::vector<std::size_t> backbone_depths() const;
  std::size_t neck_depth() const;

  /// Width/depth presets: "nano", "s", "m", "l".
  static ModelSpec preset(const std::string& scale, std::size_t num_classes, AttentionKind attention,
                          std::size_t input_size = 64);

  bool operator==(const ModelSpec&) const = default;
};

enum class ParamRole { weight, bias, bn_gamma, bn_beta, buffer };

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  ParamRole role;

  bool trainable() const { return role != ParamRole::buffer; }
};

/// Name-ordered view over every tensor a model owns. Entries alias the
/// tensors inside the blocks.
template <typename T>
class ParamStore {
 public:
  void add(std::string name, Tensor<T> tensor, ParamRole role);
  const std::vector<NamedParam<T>>& entries() const { return entries_; }
  std::vector<NamedParam<T>>& entries() { return entries_; }
  const NamedParam<T>* find(const std::string& name) const;
  std::size_t trainable_count() const;
  void zero_grad();

 private:
  std::vector<NamedParam<T>> entries_;
};

template <typename T>
struct Cbs {
  Tensor<T> weight, gamma, beta;
  BatchNormState<T> bn;
  int stride = 1, padding = 0;

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
};

template <typename T>
struct Bottleneck {
  Cbs<T> cv1, cv2;
  bool shortcut = true;

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
};

template <typename T>
struct C2f {
  Cbs<T> cv1, cv2;
  std::vector<Bottleneck<T>> blocks;
  std::size_t hidden = 0;

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
};

template <typename T>
struct Sppf {
  Cbs<T> cv1, cv2;
  int pool = 5;

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
};

template <typename T>
struct Conv {
  Tensor<T> weight, bias;

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, 1, 0); }
};

template <typename T>
struct HeadBranch {
  Cbs<T> a, b;
  Conv<T> out;

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
};

template <typename T>
struct ScaleOutput {
  Tensor<T> cls_logits;  // [N, num_classes, h, w]
  Tensor<T> reg_logits;  // [N, 4 * (reg_max + 1), h, w], side-major: l, t, r, b
  int stride = 8;
};

template <typename T>
struct RawPrediction {
  std::vector<ScaleOutput<T>> scales;

  std::size_t batch() const { return scales.empty() ? 0 : scales.front().cls_logits.dim(0); }
};

struct TraceEntry {
  std::string node;
  Shape shape;

  bool operator==(const TraceEntry&) const = default;
};

// Parameter initialisation constants.
inline constexpr double kClassPriorProbability = 0.01;

template <typename T>
class Model {
 public:
  /// Deterministic under `seed`.
  static Model build(const ModelSpec& spec, std::uint64_t seed);

  /// images [N, 3, S, S] with S == spec.input_size. When `trace` is given,
  /// appends the output shape of every named block in execution order.
  RawPrediction<T> forward(const Tensor<T>& images, std::vector<TraceEntry>* trace = nullptr);

  const ModelSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  void set_training(bool training) { mode_ = training ? NormMode::train : NormMode::eval; }
  bool training() const { return mode_ == NormMode::train; }

  std::size_t parameter_count() const { return params_.trainable_count(); }
  /// Floating-point operations of one forward pass on a single image.
  std::uint64_t flops();
  std::size_t attention_block_count() const;

  /// Copy of every tensor value into a model of another precision.
  template <typename U>
  Model<U> convert() const;

  /// Copies values by name from `other`; both must share the same layout.
  void load_values_from(const ParamStore<T>& other);

 private:
  struct Blocks;

  ModelSpec spec_;
  ParamStore<T> params_;
  std::shared_ptr<Blocks> blocks_;
  NormMode mode_ = NormMode::train;
};

struct DecodeOptions {
  double conf_threshold = 0.25;
  double iou_threshold = 0.45;
  std::size_t max_detections = 300;
};

/// Expected distance (in grid units, 0..reg_max) of one side at one cell.
template <typename T>
double expected_side_distance(const Tensor<T>& reg_logits, std::size_t image, std::size_t side, std::size_t cell,
                              std::size_t bins);

/// Per-image boxes in input pixels, clipped to the image, sorted by
/// confidence descending after class-wise greedy suppression.
template <typename T>
std::vector<std::vector<DetBox>> decode_boxes(const RawPrediction<T>& raw, const ModelSpec& spec,
                                              const DecodeOptions& options = {});

/// Class-wise greedy IoU suppression; input order is irrelevant.
std::vector<DetBox> suppress_overlaps(std::vector<DetBox> boxes, double iou_threshold, std::size_t max_detections);

}  // namespace rescbam

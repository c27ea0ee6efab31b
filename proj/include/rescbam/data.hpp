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
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rescbam/box.hpp"
#include "rescbam/random.hpp"
#include "rescbam/tensor.hpp"

namespace rescbam {

/// Normalized YOLO-style label: centre, width and height in [0, 1].
struct LabelBox {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  DetBox to_pixels(double width, double height) const;
  bool operator==(const LabelBox&) const = default;
};

struct Sample {
  std::string id;
  Tensor<float> image;  // [3, H, W], values in [0, 1]
  std::vector<LabelBox> boxes;

  std::vector<DetBox> pixel_boxes() const;
};

std::vector<std::string> default_class_names(std::size_t num_classes);

struct LabelParseResult {
  std::vector<LabelBox> boxes;
  std::size_t clipped = 0;  // boxes clipped to the image (or dropped when nothing was left)
};

/// One "class cx cy w h" record per line; blank lines are skipped.
LabelParseResult parse_label_file(const std::string& text, std::size_t num_classes);
std::string render_label_file(const std::vector<LabelBox>& boxes);

struct SplitRatios {
  double train = 0.7, val = 0.2, test = 0.1;
  bool operator==(const SplitRatios&) const = default;
};

struct SplitManifest {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
  SplitRatios ratios;

  bool operator==(const SplitManifest&) const = default;
};

/// Partition sizes by largest remainder: floors first, then the leftover
/// ids go to the parts with the largest fractional shares (ties: train, val,
/// test).
std::array<std::size_t, 3> split_counts(std::size_t n, const SplitRatios& ratios);

/// Seeded shuffle, then contiguous slices of split_counts() sizes.
SplitManifest split_dataset(std::vector<std::string> ids, std::uint64_t seed, const SplitRatios& ratios = {});

std::string render_manifest(const SplitManifest& manifest);
SplitManifest parse_manifest(const std::string& text);

struct AugmentRanges {
  double alpha_min = 0.6, alpha_max = 1.4;
  double beta_min = -0.2, beta_max = 0.2;
};

/// clamp(alpha * pixel + beta, 0, 1).
Tensor<float> augment_brightness_contrast(const Tensor<float>& image, double alpha, double beta);
/// Draws alpha and beta from `ranges`.
Tensor<float> augment_random(const Tensor<float>& image, const AugmentRanges& ranges, Rng& rng);

struct SyntheticOptions {
  std::size_t image_size = 64;
  std::size_t min_objects = 1, max_objects = 4;
  std::size_t min_extent = 10, max_extent = 28;  // pixels
  double noise_sigma = 0.04;
  std::vector<double> imbalance;  // per-class weights; empty means uniform
};

/// Grayscale images of filled shapes on a noisy background. A class is a
/// (shape, intensity band) pair: class c draws shape c % 4 in band c / 4.
std::vector<Sample> generate_synthetic_dataset(std::size_t n, std::size_t num_classes, std::uint64_t seed,
                                               const SyntheticOptions& options = {});

/// Binary PPM (P6) or PGM (P5, replicated to three channels).
Tensor<float> load_image(const std::filesystem::path& path);
Tensor<float> decode_image(const std::string& bytes);
/// P6 with maxval 255; values are rounded after clamping to [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
std::string encode_ppm(const Tensor<float>& image);

/// Nearest-neighbour resize of a [3, H, W] image to [3, size, size].
Tensor<float> resize_square(const Tensor<float>& image, std::size_t size);

/// Copies `image` with one-pixel rectangle outlines drawn at `boxes`.
Tensor<float> draw_boxes(const Tensor<float>& image, const std::vector<DetBox>& boxes);

/// On-disk dataset: images/<id>.ppm|.pgm, labels/<id>.txt (missing label
/// file means no objects) and optionally split.txt.
struct Dataset {
  std::vector<Sample> samples;
  std::optional<SplitManifest> manifest;
  std::size_t clipped_labels = 0;

  /// Samples named by a manifest section ("train", "val", "test", or "all").
  std::vector<Sample> subset(const std::string& split) const;
};

Dataset load_dataset(const std::filesystem::path& dir, std::size_t num_classes, std::size_t image_size);
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                   const std::optional<SplitManifest>& manifest);

/// Stacks images into [N, 3, S, S].
Tensor<float> stack_images(const std::vector<const Sample*>& samples);

}  // namespace rescbam

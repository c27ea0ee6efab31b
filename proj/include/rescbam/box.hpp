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

namespace rescbam {

/// Axis-aligned box in pixels, center form, with class and confidence.
struct DetBox {
  double cx = 0, cy = 0, w = 0, h = 0;
  int class_id = 0;
  double confidence = 1.0;

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return w * h; }

  static DetBox from_corners(double x1, double y1, double x2, double y2, int class_id = 0, double confidence = 1.0) {
    return DetBox{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, class_id, confidence};
  }
};

/// Intersection over union. Rejects boxes with non-positive width or height.
double iou(const DetBox& a, const DetBox& b);

}  // namespace rescbam

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

#include "rescbam/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace rescbam {

// ---------------------------------------------------------------------------
// scalar losses

double bce_loss(double prob, double label, double weight) {
  const double x = std::clamp(prob, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
  return -weight * (label * std::log(x) + (1.0 - label) * std::log(1.0 - x));
}

double bce_loss(std::span<const double> probs, std::span<const double> labels, double weight) {
  if (probs.size() != labels.size()) fail("bce_loss: probabilities and labels differ in length");
  if (probs.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) acc += bce_loss(probs[i], labels[i], weight);
  return acc / double(probs.size());
}

DflTarget DflTarget::make(double y, std::size_t reg_max) {
  if (reg_max < 1) fail("dfl: reg_max must be >= 1");
  if (!(y >= 0.0 && y <= double(reg_max))) {
    fail("dfl: target " + std::to_string(y) + " outside [0, " + std::to_string(reg_max) + "]");
  }
  DflTarget t;
  t.y = y;
  t.lower = std::min(std::size_t(std::floor(y)), reg_max - 1);
  t.weight_lower = double(t.lower + 1) - y;
  t.weight_upper = y - double(t.lower);
  return t;
}

double dfl_loss(std::span<const double> bin_probs, double y) {
  if (bin_probs.size() < 2) fail("dfl_loss: need at least two bins");
  const auto t = DflTarget::make(y, bin_probs.size() - 1);
  auto term = [](double w, double p) { return w == 0.0 ? 0.0 : w * std::log(p); };
  return -(term(t.weight_lower, bin_probs[t.lower]) + term(t.weight_upper, bin_probs[t.lower + 1]));
}

namespace {

constexpr double kAspectScale = 4.0 / (std::numbers::pi * std::numbers::pi);

// Value plus gradient with respect to the four side distances l, t, r, b.
struct Dual {
  double v = 0;
  std::array<double, 4> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly
  static Dual var(double value, std::size_t i) {
    Dual x(value);
    x.d[i] = 1.0;
    return x;
  }
};

Dual operator+(const Dual& a, const Dual& b) {
  Dual r(a.v + b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r(a.v - b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r(a.v * b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r(a.v / b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
  return r;
}
Dual atan(const Dual& a) {
  Dual r(std::atan(a.v));
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] / (1.0 + a.v * a.v);
  return r;
}
const Dual& min(const Dual& a, const Dual& b) { return b.v < a.v ? b : a; }
const Dual& max(const Dual& a, const Dual& b) { return a.v < b.v ? b : a; }
double value(const Dual& a) { return a.v; }

double atan(double a) { return std::atan(a); }
double min(double a, double b) { return std::min(a, b); }
double max(double a, double b) { return std::max(a, b); }
double value(double a) { return a; }

// CIoU of a predicted corner box against a fixed gt box. `eps` keeps the
// aspect term finite for collapsed predictions during training.
template <typename S>
S ciou_corners(const S& px1, const S& py1, const S& px2, const S& py2, const DetBox& gt, double eps) {
  const double gx1 = gt.x1(), gy1 = gt.y1(), gx2 = gt.x2(), gy2 = gt.y2();
  const S pw = px2 - px1, ph = py2 - py1;
  S iw = min(px2, S(gx2)) - max(px1, S(gx1));
  S ih = min(py2, S(gy2)) - max(py1, S(gy1));
  if (value(iw) < 0.0) iw = S(0.0);
  if (value(ih) < 0.0) ih = S(0.0);
  const S inter = iw * ih;
  const S uni = pw * ph + S(gt.w * gt.h) - inter + S(eps);
  const S iou_v = inter / uni;

  const S dx = (px1 + px2) * S(0.5) - S(gt.cx);
  const S dy = (py1 + py2) * S(0.5) - S(gt.cy);
  const S center2 = dx * dx + dy * dy;
  const S cw = max(px2, S(gx2)) - min(px1, S(gx1));
  const S chh = max(py2, S(gy2)) - min(py1, S(gy1));
  const S diag2 = cw * cw + chh * chh + S(eps);

  const S diff = S(std::atan(gt.w / gt.h)) - atan(pw / (ph + S(eps)));
  const S v = S(kAspectScale) * diff * diff;
  const S denom = (S(1.0) - iou_v) + v;
  const S aspect = value(denom) > 0.0 ? v * v / denom : S(0.0);
  return S(1.0) - iou_v + center2 / diag2 + aspect;
}

}  // namespace

double aspect_term_v(double w_gt, double h_gt, double w_p, double h_p) {
  if (!(w_gt > 0 && h_gt > 0 && w_p > 0 && h_p > 0)) fail("aspect_term_v: widths and heights must be positive");
  const double diff = std::atan(w_gt / h_gt) - std::atan(w_p / h_p);
  return kAspectScale * diff * diff;
}

double ciou_loss(const DetBox& pred, const DetBox& gt) {
  if (!(pred.w > 0 && pred.h > 0 && gt.w > 0 && gt.h > 0)) fail("ciou_loss: boxes must have positive area");
  return ciou_corners<double>(pred.x1(), pred.y1(), pred.x2(), pred.y2(), gt, 0.0);
}

// ---------------------------------------------------------------------------
// assignment

std::vector<std::size_t> scale_preference(const DetBox& gt, std::span<const int> strides, double cells_per_box) {
  std::vector<std::size_t> order(strides.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const double size = std::sqrt(std::max(gt.w * gt.h, 1e-12));
  auto misfit = [&](std::size_t s) { return std::abs(std::log2(size / double(strides[s])) - std::log2(cells_per_box)); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return misfit(a) < misfit(b); });
  return order;
}

template <typename T>
AssignedTargets assign_targets(const RawPrediction<T>& raw, const ModelSpec& spec,
                               const std::vector<std::vector<DetBox>>& gt_boxes, const AssignOptions& options) {
  const std::size_t N = raw.batch();
  if (gt_boxes.size() != N) {
    fail("assign_targets: " + std::to_string(gt_boxes.size()) + " gt lists for a batch of " + std::to_string(N));
  }
  const double size = double(spec.input_size);
  AssignedTargets out;
  out.num_images = N;

  struct Candidate {
    std::size_t gt_index;
    double iou;
    double gt_area;
    CellMatch match;
  };

  for (std::size_t n = 0; n < N; ++n) {
    // (scale, cell) -> winning candidate
    std::map<std::pair<std::size_t, std::size_t>, Candidate> owner;
    for (std::size_t g = 0; g < gt_boxes[n].size(); ++g) {
      const DetBox& gt = gt_boxes[n][g];
      if (!(gt.w > 0 && gt.h > 0)) fail("assign_targets: gt box with non-positive size");
      if (gt.x1() < -1e-6 || gt.y1() < -1e-6 || gt.x2() > size + 1e-6 || gt.y2() > size + 1e-6) {
        fail("assign_targets: gt box outside image bounds");
      }
      std::vector<Candidate> picked;
      for (std::size_t s : scale_preference(gt, spec.strides, options.cells_per_box)) {
        const auto& out_s = raw.scales[s];
        const std::size_t H = out_s.cls_logits.dim(2), W = out_s.cls_logits.dim(3);
        const double stride = out_s.stride;
        std::vector<std::pair<Candidate, double>> cands;  // with centre distance
        for (std::size_t cell = 0; cell < H * W; ++cell) {
          const double cx = (double(cell % W) + 0.5) * stride, cy = (double(cell / W) + 0.5) * stride;
          if (!(cx > gt.x1() && cx < gt.x2() && cy > gt.y1() && cy < gt.y2())) continue;
          std::array<double, 4> d{};
          for (std::size_t side = 0; side < 4; ++side) {
            d[side] = expected_side_distance(out_s.reg_logits, n, side, cell, spec.bins()) * stride;
          }
          const DetBox pred = DetBox::from_corners(cx - d[0], cy - d[1], cx + d[2], cy + d[3]);
          const double overlap = pred.w > 0 && pred.h > 0 ? iou(pred, gt) : 0.0;
          CellMatch m;
          m.image = n;
          m.scale = s;
          m.cell = cell;
          m.class_id = gt.class_id;
          m.gt = gt;
          m.assign_iou = overlap;
          const double rm = double(spec.reg_max);
          m.sides = {DflTarget::make(std::clamp((cx - gt.x1()) / stride, 0.0, rm), spec.reg_max),
                     DflTarget::make(std::clamp((cy - gt.y1()) / stride, 0.0, rm), spec.reg_max),
                     DflTarget::make(std::clamp((gt.x2() - cx) / stride, 0.0, rm), spec.reg_max),
                     DflTarget::make(std::clamp((gt.y2() - cy) / stride, 0.0, rm), spec.reg_max)};
          const double dist = std::hypot(cx - gt.cx, cy - gt.cy);
          cands.push_back({Candidate{g, overlap, gt.area(), m}, dist});
        }
        if (cands.empty()) continue;
        std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
          if (a.first.iou != b.first.iou) return a.first.iou > b.first.iou;
          return a.second < b.second;
        });
        if (cands.size() > options.top_k) cands.resize(options.top_k);
        for (auto& c : cands) picked.push_back(std::move(c.first));
        break;
      }
      if (picked.empty()) {
        ++out.unassigned_gt;
        continue;
      }
      for (auto& c : picked) {
        const auto key = std::make_pair(c.match.scale, c.match.cell);
        auto it = owner.find(key);
        if (it == owner.end()) {
          owner.emplace(key, std::move(c));
        } else if (c.iou > it->second.iou || (c.iou == it->second.iou && c.gt_area < it->second.gt_area)) {
          it->second = std::move(c);
        }
      }
    }
    for (auto& [key, c] : owner) out.matches.push_back(std::move(c.match));
  }
  return out;
}

// ---------------------------------------------------------------------------
// training losses

namespace {

// Sum over elements of the clamped BCE of sigmoid(logits) against targets.
template <typename T>
Tensor<T> bce_with_logits_sum(const Tensor<T>& logits, const std::vector<T>& targets) {
  const auto z = logits.data();
  auto probs = std::make_shared<std::vector<double>>(z.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zi = z[i];
    const double p = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
    (*probs)[i] = p;
    acc += bce_loss(p, double(targets[i]));
  }
  Tensor<T> out = Tensor<T>::scalar(T(acc));
  if (Tape* tape = detail::recording_tape<T>({&logits})) {
    out.set_requires_grad(true);
    tape->record([logits, out, probs, targets]() {
      if (!out.has_grad()) return;
      const double gy = out.grad()[0];
      auto gx = logits.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double p = (*probs)[i];
        // The clamp has zero slope where it is active.
        if (p < kProbabilityEpsilon || p > 1.0 - kProbabilityEpsilon) continue;
        gx[i] += T(gy * (p - double(targets[i])));
      }
    });
  }
  return out;
}

struct RegressionTerms {
  double dfl = 0, ciou = 0;
};

// DFL and CIoU sums over the matches of one scale, with their gradients
// with respect to the regression logits.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> regression_sums(const Tensor<T>& reg_logits, const std::vector<const CellMatch*>& matches,
                                                int stride, std::size_t bins) {
  const std::size_t C = reg_logits.dim(1), HW = reg_logits.dim(2) * reg_logits.dim(3), W = reg_logits.dim(3);
  const auto z = reg_logits.data();
  // Per match, per side: softmax probabilities and d(ciou)/d(distance).
  auto probs = std::make_shared<std::vector<double>>(matches.size() * 4 * bins);
  auto ciou_grad = std::make_shared<std::vector<double>>(matches.size() * 4);
  double dfl_sum = 0.0, ciou_sum = 0.0;
  for (std::size_t m = 0; m < matches.size(); ++m) {
    const CellMatch& cm = *matches[m];
    std::array<double, 4> dist{};
    for (std::size_t side = 0; side < 4; ++side) {
      const std::size_t base = (cm.image * C + side * bins) * HW + cm.cell;
      double mx = z[base];
      for (std::size_t k = 1; k < bins; ++k) mx = std::max(mx, double(z[base + k * HW]));
      double total = 0.0;
      for (std::size_t k = 0; k < bins; ++k) total += std::exp(double(z[base + k * HW]) - mx);
      const double log_total = std::log(total);
      double expectation = 0.0;
      double* p = probs->data() + (m * 4 + side) * bins;
      for (std::size_t k = 0; k < bins; ++k) {
        p[k] = std::exp(double(z[base + k * HW]) - mx - log_total);
        expectation += p[k] * double(k);
      }
      const DflTarget& t = cm.sides[side];
      const double logp_lo = double(z[base + t.lower * HW]) - mx - log_total;
      const double logp_hi = double(z[base + (t.lower + 1) * HW]) - mx - log_total;
      dfl_sum += -(t.weight_lower * logp_lo + t.weight_upper * logp_hi) / 4.0;
      dist[side] = expectation * stride;
    }
    const double cx = (double(cm.cell % W) + 0.5) * stride, cy = (double(cm.cell / W) + 0.5) * stride;
    const Dual l = Dual::var(dist[0], 0), t = Dual::var(dist[1], 1), r = Dual::var(dist[2], 2),
               b = Dual::var(dist[3], 3);
    const Dual loss = ciou_corners<Dual>(Dual(cx) - l, Dual(cy) - t, Dual(cx) + r, Dual(cy) + b, cm.gt, 1e-9);
    ciou_sum += loss.v;
    for (std::size_t side = 0; side < 4; ++side) (*ciou_grad)[m * 4 + side] = loss.d[side];
  }

  Tensor<T> dfl_out = Tensor<T>::scalar(T(dfl_sum));
  Tensor<T> ciou_out = Tensor<T>::scalar(T(ciou_sum));
  if (Tape* tape = detail::recording_tape<T>({&reg_logits})) {
    dfl_out.set_requires_grad(true);
    ciou_out.set_requires_grad(true);
    auto owned = std::make_shared<std::vector<CellMatch>>();
    for (const CellMatch* m : matches) owned->push_back(*m);
    tape->record([reg_logits, dfl_out, ciou_out, owned, probs, ciou_grad, stride, bins, C, HW]() {
      const double g_dfl = dfl_out.has_grad() ? double(dfl_out.grad()[0]) : 0.0;
      const double g_ciou = ciou_out.has_grad() ? double(ciou_out.grad()[0]) : 0.0;
      if (g_dfl == 0.0 && g_ciou == 0.0) return;
      auto gx = reg_logits.grad_buffer();
      for (std::size_t m = 0; m < owned->size(); ++m) {
        const CellMatch& cm = (*owned)[m];
        for (std::size_t side = 0; side < 4; ++side) {
          const std::size_t base = (cm.image * C + side * bins) * HW + cm.cell;
          const double* p = probs->data() + (m * 4 + side) * bins;
          const DflTarget& t = cm.sides[side];
          double expectation = 0.0;
          for (std::size_t k = 0; k < bins; ++k) expectation += p[k] * double(k);
          const double gd = (*ciou_grad)[m * 4 + side] * stride;
          for (std::size_t k = 0; k < bins; ++k) {
            double d_dfl = (t.weight_lower + t.weight_upper) * p[k];
            if (k == t.lower) d_dfl -= t.weight_lower;
            if (k == t.lower + 1) d_dfl -= t.weight_upper;
            const double d_ciou = gd * p[k] * (double(k) - expectation);
            gx[base + k * HW] += T(g_dfl * d_dfl / 4.0 + g_ciou * d_ciou);
          }
        }
      }
    });
  }
  return {dfl_out, ciou_out};
}

}  // namespace

template <typename T>
LossBreakdown<T> total_loss(const RawPrediction<T>& raw, const AssignedTargets& targets, const ModelSpec& spec,
                            const LossWeights& weights) {
  if (raw.scales.size() != spec.strides.size()) fail("total_loss: prediction has the wrong number of scales");
  const T norm = T(1) / T(std::max<std::size_t>(1, targets.matched_count()));
  std::vector<Tensor<T>> bce_terms, dfl_terms, ciou_terms;
  for (std::size_t s = 0; s < raw.scales.size(); ++s) {
    const auto& out = raw.scales[s];
    const std::size_t nc = out.cls_logits.dim(1), HW = out.cls_logits.dim(2) * out.cls_logits.dim(3);
    if (nc != spec.num_classes || out.reg_logits.dim(1) != 4 * spec.bins()) {
      fail("total_loss: prediction channels do not match the model spec");
    }
    std::vector<T> cls_target(out.cls_logits.numel(), T(0));
    std::vector<const CellMatch*> here;
    for (const auto& m : targets.matches) {
      if (m.scale != s) continue;
      if (m.image >= raw.batch() || m.cell >= HW || m.class_id < 0 || std::size_t(m.class_id) >= nc) {
        fail("total_loss: assigned target inconsistent with prediction shapes");
      }
      cls_target[(m.image * nc + std::size_t(m.class_id)) * HW + m.cell] = T(1);
      here.push_back(&m);
    }
    bce_terms.push_back(bce_with_logits_sum(out.cls_logits, cls_target));
    if (!here.empty()) {
      auto [dfl, ciou] = regression_sums(out.reg_logits, here, out.stride, spec.bins());
      dfl_terms.push_back(dfl);
      ciou_terms.push_back(ciou);
    }
  }
  auto normalised = [norm](const std::vector<Tensor<T>>& terms) {
    if (terms.empty()) return Tensor<T>::scalar(T(0));
    return weighted_sum(terms, std::vector<T>(terms.size(), norm));
  };
  LossBreakdown<T> out;
  out.weights = weights;
  out.bce = normalised(bce_terms);
  out.dfl = normalised(dfl_terms);
  out.ciou = normalised(ciou_terms);
  out.total = weighted_sum<T>({out.bce, out.dfl, out.ciou}, {T(weights.cls), T(weights.dfl), T(weights.box)});
  return out;
}

#define RESCBAM_INSTANTIATE_LOSSES(T)                                                                       \
  template AssignedTargets assign_targets(const RawPrediction<T>&, const ModelSpec&,                       \
                                          const std::vector<std::vector<DetBox>>&, const AssignOptions&);   \
  template LossBreakdown<T> total_loss(const RawPrediction<T>&, const AssignedTargets&, const ModelSpec&, \
                                       const LossWeights&);

RESCBAM_INSTANTIATE_LOSSES(float)
RESCBAM_INSTANTIATE_LOSSES(double)

}  // namespace rescbam

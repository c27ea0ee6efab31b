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

#include "rescbam/metrics.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>

#include "rescbam/error.hpp"

namespace rescbam {

std::string to_string(ApMethod method) { return method == ApMethod::interp101 ? "101-point" : "all-point"; }

ApMethod parse_ap_method(const std::string& text) {
  if (text == "101-point" || text == "101") return ApMethod::interp101;
  if (text == "all-point" || text == "all") return ApMethod::all_point;
  fail("unknown AP method '" + text + "' (expected 101-point or all-point)");
}

double iou_threshold_at(std::size_t index) { return 0.5 + 0.05 * double(index); }

namespace {

double safe_iou(const DetBox& a, const DetBox& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) return 0.0;
  return iou(a, b);
}

}  // namespace

std::vector<std::uint8_t> match_detections(std::span<const DetBox> preds, std::span<const DetBox> gts,
                                           double iou_threshold) {
  std::vector<std::uint8_t> tp(preds.size(), 0);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t p = 0; p < preds.size(); ++p) {
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double o = safe_iou(preds[p], gts[g]);
      if (o > best) {
        best = o;
        best_gt = g;
      }
    }
    if (best_gt < gts.size() && best >= iou_threshold) {
      taken[best_gt] = true;
      tp[p] = 1;
    }
  }
  return tp;
}

std::vector<PrPoint> pr_curve(std::span<const double> confidences, std::span<const std::uint8_t> tp, std::size_t n_gt) {
  if (confidences.size() != tp.size()) fail("pr_curve: confidences and flags differ in length");
  std::vector<std::size_t> order(tp.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return confidences[a] > confidences[b]; });
  std::vector<PrPoint> out;
  out.reserve(order.size());
  std::size_t tps = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tps += tp[order[k]];
    out.push_back({n_gt ? double(tps) / double(n_gt) : 0.0, double(tps) / double(k + 1)});
  }
  return out;
}

std::optional<double> average_precision(std::span<const double> confidences, std::span<const std::uint8_t> tp,
                                        std::size_t n_gt, ApMethod method) {
  if (n_gt == 0) return tp.empty() ? std::nullopt : std::optional<double>(0.0);
  const auto curve = pr_curve(confidences, tp, n_gt);
  // Precision envelope: best precision at this recall or beyond.
  std::vector<double> envelope(curve.size());
  double best = 0.0;
  for (std::size_t k = curve.size(); k-- > 0;) {
    best = std::max(best, curve[k].precision);
    envelope[k] = best;
  }
  double ap = 0.0;
  if (method == ApMethod::interp101) {
    std::size_t k = 0;
    for (int i = 0; i <= 100; ++i) {
      const double r = double(i) / 100.0;
      while (k < curve.size() && curve[k].recall < r) ++k;
      if (k == curve.size()) break;
      ap += envelope[k];
    }
    ap /= 101.0;
  } else {
    double prev = 0.0;
    for (std::size_t k = 0; k < curve.size(); ++k) {
      ap += (curve[k].recall - prev) * envelope[k];
      prev = curve[k].recall;
    }
  }
  return ap;
}

double ClassReport::ap5095() const {
  double s = 0.0;
  for (double a : ap) s += a;
  return s / double(kIouThresholdCount);
}

EvalReport evaluate(const std::vector<std::vector<DetBox>>& preds, const std::vector<std::vector<DetBox>>& gts,
                    std::size_t num_classes, const EvalOptions& options) {
  if (preds.size() != gts.size()) {
    fail(fmt::format("evaluate: {} prediction lists for {} images", preds.size(), gts.size()));
  }
  EvalReport report;
  report.method = options.method;
  auto check_class = [num_classes](int c) {
    if (c < 0 || std::size_t(c) >= num_classes) fail(fmt::format("evaluate: class id {} outside [0, {})", c, num_classes));
  };

  struct Flagged {
    double confidence;
    std::array<std::uint8_t, kIouThresholdCount> tp;
  };
  std::vector<std::vector<Flagged>> per_class(num_classes);
  std::vector<std::size_t> gt_count(num_classes, 0);

  for (std::size_t img = 0; img < preds.size(); ++img) {
    for (const auto& g : gts[img]) {
      check_class(g.class_id);
      ++gt_count[std::size_t(g.class_id)];
    }
    for (const auto& p : preds[img]) check_class(p.class_id);
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::vector<DetBox> cp, cg;
      for (const auto& p : preds[img]) {
        if (std::size_t(p.class_id) == c) cp.push_back(p);
      }
      if (cp.empty()) continue;
      for (const auto& g : gts[img]) {
        if (std::size_t(g.class_id) == c) cg.push_back(g);
      }
      std::stable_sort(cp.begin(), cp.end(), [](const DetBox& a, const DetBox& b) { return a.confidence > b.confidence; });
      std::vector<Flagged> flagged(cp.size());
      for (std::size_t t = 0; t < kIouThresholdCount; ++t) {
        const auto tp = match_detections(cp, cg, iou_threshold_at(t));
        for (std::size_t k = 0; k < cp.size(); ++k) flagged[k].tp[t] = tp[k];
      }
      for (std::size_t k = 0; k < cp.size(); ++k) {
        flagged[k].confidence = cp[k].confidence;
        per_class[c].push_back(flagged[k]);
      }
    }
  }

  std::size_t classes_with_gt = 0;
  double sum50 = 0.0, sum5095 = 0.0;
  std::vector<std::pair<double, std::uint8_t>> pooled;
  for (std::size_t c = 0; c < num_classes; ++c) {
    ClassReport cr;
    cr.class_id = int(c);
    cr.gt = gt_count[c];
    cr.predictions = per_class[c].size();
    std::vector<double> conf;
    for (const auto& f : per_class[c]) conf.push_back(f.confidence);
    for (std::size_t t = 0; t < kIouThresholdCount; ++t) {
      std::vector<std::uint8_t> tp;
      for (const auto& f : per_class[c]) tp.push_back(f.tp[t]);
      cr.ap[t] = average_precision(conf, tp, cr.gt, options.method).value_or(0.0);
      if (t == 0) {
        cr.pr = pr_curve(conf, tp, cr.gt);
        for (std::size_t k = 0; k < tp.size(); ++k) {
          pooled.emplace_back(conf[k], tp[k]);
          report.matched += tp[k];
        }
      }
    }
    if (cr.gt > 0) {
      ++classes_with_gt;
      sum50 += cr.ap50();
      sum5095 += cr.ap5095();
    }
    report.gt += cr.gt;
    report.predictions += cr.predictions;
    report.classes.push_back(std::move(cr));
  }
  if (classes_with_gt) {
    report.map50 = sum50 / double(classes_with_gt);
    report.map5095 = sum5095 / double(classes_with_gt);
  }

  // F1 over confidence thresholds, evaluated only between distinct confidences.
  std::stable_sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::size_t tps = 0;
  for (std::size_t k = 0; k < pooled.size(); ++k) {
    tps += pooled[k].second;
    if (k + 1 < pooled.size() && pooled[k + 1].first == pooled[k].first) continue;
    const double precision = double(tps) / double(k + 1);
    const double recall = report.gt ? double(tps) / double(report.gt) : 0.0;
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    if (f1 > report.f1) {
      report.f1 = f1;
      report.f1_precision = precision;
      report.f1_recall = recall;
      report.f1_confidence = pooled[k].first;
    }
  }
  return report;
}

std::string render_report_text(const EvalReport& r, const std::vector<std::string>& names) {
  std::string out = fmt::format("{:<14} {:>6} {:>6} {:>8} {:>10}\n", "class", "gt", "preds", "AP50", "AP50-95");
  for (const auto& c : r.classes) {
    const std::string name = std::size_t(c.class_id) < names.size() ? names[std::size_t(c.class_id)]
                                                                      : fmt::format("class{}", c.class_id);
    out += fmt::format("{:<14} {:>6} {:>6} {:>8.4f} {:>10.4f}\n", name, c.gt, c.predictions, c.ap50(), c.ap5095());
  }
  out += fmt::format("{:<14} {:>6} {:>6} {:>8.4f} {:>10.4f}\n", "all", r.gt, r.predictions, r.map50, r.map5095);
  out += fmt::format("F1 {:.4f} (P {:.4f}, R {:.4f}, conf {:.4f}); AP integration {}\n", r.f1, r.f1_precision,
                     r.f1_recall, r.f1_confidence, to_string(r.method));
  return out;
}

std::string render_report_kv(const EvalReport& r, const std::vector<std::pair<std::string, std::string>>& extras) {
  std::string out;
  out += fmt::format("map50={:.6f}\nmap5095={:.6f}\nf1={:.6f}\n", r.map50, r.map5095, r.f1);
  out += fmt::format("f1_precision={:.6f}\nf1_recall={:.6f}\nf1_confidence={:.6f}\n", r.f1_precision, r.f1_recall,
                     r.f1_confidence);
  out += fmt::format("gt={}\npredictions={}\nmatched={}\nap_method={}\n", r.gt, r.predictions, r.matched,
                     to_string(r.method));
  for (const auto& c : r.classes) {
    out += fmt::format("class{}.gt={}\nclass{}.ap50={:.6f}\nclass{}.ap5095={:.6f}\n", c.class_id, c.gt, c.class_id,
                       c.ap50(), c.class_id, c.ap5095());
  }
  for (const auto& [k, v] : extras) out += fmt::format("{}={}\n", k, v);
  return out;
}

std::string render_pr_csv(const EvalReport& r) {
  std::string out = "class,recall,precision\n";
  for (const auto& c : r.classes) {
    for (const auto& p : c.pr) out += fmt::format("{},{:.6f},{:.6f}\n", c.class_id, p.recall, p.precision);
  }
  return out;
}

}  // namespace rescbam

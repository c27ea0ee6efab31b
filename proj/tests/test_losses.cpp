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

#include <cmath>
#include <numbers>
#include <set>

#include <doctest.h>

#include "oracles.hpp"
#include "rescbam/gradcheck.hpp"
#include "rescbam/losses.hpp"

using namespace rescbam;

namespace {

ModelSpec tiny_spec(std::size_t input = 64) {
  ModelSpec s = ModelSpec::preset("nano", 2, AttentionKind::none, input);
  s.width_mult = 1.0 / 16;
  s.reg_max = 8;
  return s;
}

RawPrediction<double> blank_raw(const ModelSpec& spec, std::size_t batch = 1) {
  RawPrediction<double> raw;
  for (int stride : spec.strides) {
    const std::size_t g = spec.input_size / std::size_t(stride);
    ScaleOutput<double> s;
    s.cls_logits = Tensor<double>::full({batch, spec.num_classes, g, g}, -20.0);
    s.reg_logits = Tensor<double>::zeros({batch, 4 * spec.bins(), g, g});
    s.stride = stride;
    raw.scales.push_back(s);
  }
  return raw;
}

DetBox corners(double x1, double y1, double x2, double y2, int cls = 0) {
  return DetBox::from_corners(x1, y1, x2, y2, cls);
}

}  // namespace

TEST_CASE("bce examples") {
  CHECK(bce_loss(1.0, 1.0) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(bce_loss(0.5, 1.0, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_loss(0.5, 0.0, 2.0) == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
  // clamping keeps certain-but-wrong predictions finite
  CHECK(bce_loss(0.0, 1.0) == doctest::Approx(-std::log(kProbabilityEpsilon)));
  const std::vector<double> p{0.5, 0.5}, y{1.0, 0.0};
  CHECK(bce_loss(p, y) == doctest::Approx(std::log(2.0)));
  Rng rng(1);
  for (int i = 0; i < 200; ++i) CHECK(bce_loss(rng.uniform(), rng.uniform()) >= 0.0);
}

TEST_CASE("dfl examples and target bracketing") {
  std::vector<double> onehot(9, 0.0);
  onehot[3] = 1.0;
  CHECK(dfl_loss(onehot, 3.0) == 0.0);
  std::vector<double> half(9, 0.0);
  half[2] = half[3] = 0.5;
  CHECK(dfl_loss(half, 2.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(dfl_loss(half, 8.5), Error);
  CHECK_THROWS_AS(dfl_loss(half, -0.1), Error);

  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const double y = rng.uniform(0, 8);
    const auto t = DflTarget::make(y, 8);
    CHECK(double(t.lower) <= y);
    CHECK(y <= double(t.lower + 1));
    CHECK(t.weight_lower + t.weight_upper == doctest::Approx(1.0));
    CHECK(t.weight_lower * double(t.lower) + t.weight_upper * double(t.lower + 1) == doctest::Approx(y));
  }
  CHECK(DflTarget::make(8.0, 8).lower == 7);
}

TEST_CASE("dfl is minimised on the simplex at the interpolation weights") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const double y = rng.uniform(0, 7.999);
    const auto t = DflTarget::make(y, 8);
    double best_p = 0, best = INFINITY;
    for (int i = 1; i < 10000; ++i) {
      const double p = i / 10000.0;
      std::vector<double> probs(9, 0.0);
      probs[t.lower] = p;
      probs[t.lower + 1] = 1 - p;
      const double v = dfl_loss(probs, y);
      if (v < best) best = v, best_p = p;
    }
    CHECK(std::abs(best_p - t.weight_lower) < 1e-3);
  }
}

TEST_CASE("dfl by gradient descent on logits reaches expectation y") {
  for (double y : {0.3, 2.5, 4.75, 7.2}) {
    const auto t = DflTarget::make(y, 8);
    std::vector<double> z(9, 0.0), p(9);
    auto softmax = [&] {
      double mx = *std::max_element(z.begin(), z.end()), s = 0;
      for (std::size_t k = 0; k < 9; ++k) s += (p[k] = std::exp(z[k] - mx));
      for (auto& v : p) v /= s;
    };
    softmax();
    const double start = dfl_loss(p, y);
    for (int step = 0; step < 20000; ++step) {
      for (std::size_t k = 0; k < 9; ++k) {
        double g = p[k];
        if (k == t.lower) g -= t.weight_lower;
        if (k == t.lower + 1) g -= t.weight_upper;
        z[k] -= 1.0 * g;
      }
      softmax();
    }
    double expectation = 0;
    for (std::size_t k = 0; k < 9; ++k) expectation += double(k) * p[k];
    CHECK(dfl_loss(p, y) < start);
    CHECK(expectation == doctest::Approx(y).epsilon(1e-2));
  }
}

TEST_CASE("ciou examples") {
  const auto a = corners(2, 3, 7, 5);
  CHECK(ciou_loss(a, a) == 0.0);
  CHECK(ciou_loss(corners(0, 0, 1, 1), corners(10, 0, 11, 1)) == doctest::Approx(1.0 + 100.0 / 122.0).epsilon(1e-12));
  CHECK(ciou_loss(corners(0, 0, 1, 1), corners(10, 0, 11, 1)) == doctest::Approx(1.8197).epsilon(1e-4));
  const double v = aspect_term_v(1, 1, 2, 1);
  CHECK(v == doctest::Approx(0.04196).epsilon(1e-3));
  const double expected = 0.5 + v * v / (0.5 + v);
  CHECK(ciou_loss(DetBox{5, 5, 2, 1}, DetBox{5, 5, 1, 1}) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(ciou_loss(DetBox{5, 5, 2, 1}, DetBox{5, 5, 1, 1}) == doctest::Approx(0.50325).epsilon(1e-4));
  CHECK_THROWS_AS(ciou_loss(DetBox{0, 0, 0, 1}, a), Error);
  CHECK(aspect_term_v(3, 2, 6, 4) == 0.0);
  CHECK(aspect_term_v(1, 1, 2, 1) == aspect_term_v(2, 1, 1, 1));
  CHECK_THROWS_AS(aspect_term_v(0, 1, 1, 1), Error);
}

TEST_CASE("ciou matches the oracle, stays in [0, 3) and is zero only for identical boxes") {
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const DetBox p{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 30), rng.uniform(0.5, 30)};
    const DetBox g{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 30), rng.uniform(0.5, 30)};
    const double l = ciou_loss(p, g);
    CHECK(l == doctest::Approx(oracle::ciou(p, g)).epsilon(1e-12));
    CHECK(l > 1e-9);
    CHECK(l < 3.0);
    const double v = aspect_term_v(g.w, g.h, p.w, p.h);
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("ciou is scale invariant") {
  Rng rng(5);
  const DetBox p{10, 12, 6, 9}, g{13, 11, 8, 4};
  const double base = ciou_loss(p, g);
  for (int i = 0; i < 100; ++i) {
    const double s = std::exp(rng.uniform(-5, 5));
    const DetBox ps{p.cx * s, p.cy * s, p.w * s, p.h * s}, gs{g.cx * s, g.cy * s, g.w * s, g.h * s};
    CHECK(ciou_loss(ps, gs) == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("ciou with the aspect term as defined is symmetric in (pred, gt)") {
  // Every term is unchanged by swapping the boxes; v squares a difference.
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const DetBox p{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 30), rng.uniform(0.5, 30)};
    const DetBox g{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 30), rng.uniform(0.5, 30)};
    CHECK(ciou_loss(p, g) == doctest::Approx(ciou_loss(g, p)).epsilon(1e-12));
  }
}

TEST_CASE("assigner: a box around one cell centre matches exactly that cell") {
  const auto spec = tiny_spec();
  const auto raw = blank_raw(spec);
  const auto t = assign_targets(raw, spec, {{corners(12, 12, 28, 28, 1)}});
  REQUIRE(t.matched_count() == 1);
  const auto& m = t.matches.front();
  CHECK(m.scale == 0);
  CHECK(m.cell == 2 * 8 + 2);
  CHECK(m.class_id == 1);
  for (const auto& s : m.sides) {
    CHECK(s.y == 1.0);
    CHECK(s.weight_lower + s.weight_upper == 1.0);
  }
  CHECK(t.unassigned_gt == 0);
}

TEST_CASE("assigner: zero gts give no matches and a bce-only loss") {
  const auto spec = tiny_spec();
  const auto raw = blank_raw(spec, 2);
  const auto t = assign_targets(raw, spec, {{}, {}});
  CHECK(t.matched_count() == 0);
  const auto l = total_loss(raw, t, spec);
  CHECK(l.dfl_value() == 0.0);
  CHECK(l.ciou_value() == 0.0);
  CHECK(l.bce_value() > 0.0);
  CHECK(l.total_value() == doctest::Approx(0.5 * l.bce_value()));
}

TEST_CASE("assigner: boxes of very different size land on different scales") {
  const auto spec = tiny_spec(128);
  const auto raw = blank_raw(spec);
  const DetBox small = corners(8, 8, 24, 24, 0), big = corners(64, 64, 128, 128, 1);
  const auto t = assign_targets(raw, spec, {{small, big}});

  // Exhaustive enumeration: the candidates are every cell centre strictly
  // inside the box on the scale whose stride best fits sqrt(area) / 2.
  std::set<std::tuple<std::size_t, std::size_t, int>> expected, got;
  for (const auto& g : {small, big}) {
    std::size_t best = 0;
    double fit = INFINITY;
    for (std::size_t s = 0; s < 3; ++s) {
      const double f = std::abs(std::log2(std::sqrt(g.w * g.h) / spec.strides[s]) - 1.0);
      if (f < fit) fit = f, best = s;
    }
    const int stride = spec.strides[best];
    const std::size_t grid = 128 / std::size_t(stride);
    for (std::size_t cell = 0; cell < grid * grid; ++cell) {
      const double cx = (double(cell % grid) + 0.5) * stride, cy = (double(cell / grid) + 0.5) * stride;
      if (cx > g.x1() && cx < g.x2() && cy > g.y1() && cy < g.y2()) expected.insert({best, cell, g.class_id});
    }
  }
  for (const auto& m : t.matches) got.insert({m.scale, m.cell, m.class_id});
  CHECK(got == expected);
  std::set<std::size_t> scales;
  for (const auto& m : t.matches) scales.insert(m.scale);
  CHECK(scales == std::set<std::size_t>{0, 2});
}

TEST_CASE("assigner: top-k cap and one gt per cell") {
  const auto spec = tiny_spec();
  const auto raw = blank_raw(spec);
  // 48 px box: best at stride 16 (3 cells), holding 9 centres; a nested
  // smaller box of the same scale competes for the middle cells.
  const auto t = assign_targets(raw, spec, {{corners(8, 8, 56, 56, 0), corners(16, 16, 48, 48, 1)}},
                                AssignOptions{4, 2.0});
  std::set<std::pair<std::size_t, std::size_t>> cells;
  for (const auto& m : t.matches) CHECK(cells.insert({m.scale, m.cell}).second);
  CHECK(t.matched_count() <= 8);
  CHECK_THROWS_AS(assign_targets(raw, spec, {{corners(-10, 0, 20, 20)}}), Error);
  CHECK_THROWS_AS(assign_targets(raw, spec, {{}, {}}), Error);
}

TEST_CASE("perfect predictions give a near-zero total") {
  const auto spec = tiny_spec();
  auto raw = blank_raw(spec);
  const auto t = assign_targets(raw, spec, {{corners(12, 12, 28, 28, 1)}});
  REQUIRE(t.matched_count() == 1);
  const std::size_t cell = t.matches.front().cell;
  raw.scales[0].cls_logits.mutable_data()[1 * 64 + cell] = 20.0;
  for (std::size_t side = 0; side < 4; ++side) raw.scales[0].reg_logits.mutable_data()[(side * 9 + 1) * 64 + cell] = 60.0;
  const auto l = total_loss(raw, t, spec);
  CHECK(l.total_value() < 1e-3);
  CHECK(l.ciou_value() < 1e-9);
}

TEST_CASE("total equals the weighted sum of its terms on a model fixture") {
  auto m = Model<double>::build(tiny_spec(), 7);
  Rng rng(7);
  auto x = Tensor<double>::zeros({2, 3, 64, 64});
  for (auto& v : x.mutable_data()) v = rng.uniform();
  NoGradScope ng;
  const auto raw = m.forward(x);
  const std::vector<std::vector<DetBox>> gts{{corners(4, 6, 30, 40, 0), corners(33, 20, 60, 50, 1)}, {corners(10, 10, 20, 22, 1)}};
  const auto t = assign_targets(raw, m.spec(), gts);
  CHECK(t.matched_count() > 0);
  for (const LossWeights w : {LossWeights{}, LossWeights{1.0, 2.0, 3.0}}) {
    const auto l = total_loss(raw, t, m.spec(), w);
    CHECK(std::isfinite(l.total_value()));
    CHECK(l.bce_value() >= 0.0);
    CHECK(l.dfl_value() >= 0.0);
    CHECK(l.ciou_value() >= 0.0);
    CHECK(l.total_value() ==
          doctest::Approx(w.cls * l.bce_value() + w.dfl * l.dfl_value() + w.box * l.ciou_value()).epsilon(1e-12));
  }
}

TEST_CASE("total loss gradient check") {
  const auto reports = run_gradcheck(gradcheck_suite("module"), 11);
  bool found = false;
  for (const auto& r : reports) {
    if (r.name.find("total_loss") == std::string::npos) continue;
    found = true;
    INFO(r.worst);
    CHECK(r.passed());
    CHECK(r.max_rel_error < 1e-3);
  }
  CHECK(found);
}

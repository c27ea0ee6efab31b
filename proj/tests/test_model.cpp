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
#include <map>

#include <doctest.h>

#include "rescbam/model.hpp"
#include "rescbam/random.hpp"

using namespace rescbam;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  auto t = Tensor<double>::zeros(std::move(s));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

Cbs<double> make_cbs(Rng& rng, std::size_t c_in, std::size_t c_out, std::size_t k, int stride) {
  Cbs<double> b;
  b.weight = random_tensor(rng, {c_out, c_in, k, k}, -0.5, 0.5);
  b.gamma = random_tensor(rng, {c_out}, 0.5, 1.5);
  b.beta = random_tensor(rng, {c_out}, -0.2, 0.2);
  b.bn = BatchNormState<double>::create(c_out);
  b.stride = stride;
  b.padding = int(k / 2);
  return b;
}

ModelSpec tiny_spec(AttentionKind kind, std::size_t nc = 2) {
  ModelSpec s = ModelSpec::preset("nano", nc, kind, 64);
  s.width_mult = 1.0 / 16;
  s.reg_max = 8;
  return s;
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("cbs: conv, batchnorm, silu in that order") {
  Rng rng(1);
  auto b = make_cbs(rng, 3, 4, 3, 2);
  auto x = random_tensor(rng, {1, 3, 8, 8});
  auto y = b.forward(x, NormMode::train);
  CHECK(y.shape() == Shape{1, 4, 4, 4});

  // Eval-mode batchnorm that is the identity map.
  std::fill(b.gamma.mutable_data().begin(), b.gamma.mutable_data().end(), 1.0);
  std::fill(b.beta.mutable_data().begin(), b.beta.mutable_data().end(), 0.0);
  std::fill(b.bn.running_mean.mutable_data().begin(), b.bn.running_mean.mutable_data().end(), 0.0);
  std::fill(b.bn.running_var.mutable_data().begin(), b.bn.running_var.mutable_data().end(), 1.0 - b.bn.eps);
  const auto e = b.forward(x, NormMode::eval);
  const auto ref = silu(conv2d(x, b.weight, Tensor<double>(), 2, 1));
  for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(e.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("c2f: degenerate chain and zero-weight bottlenecks") {
  Rng rng(2);
  C2f<double> c;
  c.hidden = 2;
  c.cv1 = make_cbs(rng, 3, 4, 1, 1);
  c.cv2 = make_cbs(rng, 4, 4, 1, 1);
  auto x = random_tensor(rng, {2, 3, 6, 6});
  const auto y = c.forward(x, NormMode::eval);
  CHECK(y.shape() == Shape{2, 4, 6, 6});
  // n = 0: split halves concatenate back to cv1's output.
  const auto ref = c.cv2.forward(c.cv1.forward(x, NormMode::eval), NormMode::eval);
  CHECK(values(y) == values(ref));

  Bottleneck<double> m;
  m.cv1 = make_cbs(rng, 2, 2, 3, 1);
  m.cv2 = make_cbs(rng, 2, 2, 3, 1);
  for (auto* cbs : {&m.cv1, &m.cv2}) {
    std::fill(cbs->weight.mutable_data().begin(), cbs->weight.mutable_data().end(), 0.0);
    std::fill(cbs->beta.mutable_data().begin(), cbs->beta.mutable_data().end(), 0.0);
  }
  m.shortcut = true;
  auto h = random_tensor(rng, {2, 2, 6, 6});
  CHECK(values(m.forward(h, NormMode::train)) == values(h));

  c.blocks.push_back(m);
  c.cv2 = make_cbs(rng, 6, 4, 1, 1);
  const auto y2 = c.forward(x, NormMode::eval);
  CHECK(y2.shape() == Shape{2, 4, 6, 6});
  const auto a = c.cv1.forward(x, NormMode::eval);
  const auto half = slice(a, 1, 2, 2);
  const auto ref2 = c.cv2.forward(concat<double>({a, half}, 1), NormMode::eval);
  for (std::size_t i = 0; i < ref2.numel(); ++i) CHECK(y2.data()[i] == doctest::Approx(ref2.data()[i]).epsilon(1e-12));
}

TEST_CASE("sppf: shape, constant planes and compositional oracle") {
  Rng rng(3);
  Sppf<double> s;
  s.cv1 = make_cbs(rng, 4, 2, 1, 1);
  s.cv2 = make_cbs(rng, 8, 4, 1, 1);
  auto x = random_tensor(rng, {1, 4, 5, 7});
  const auto y = s.forward(x, NormMode::eval);
  CHECK(y.shape() == Shape{1, 4, 5, 7});
  const auto a = s.cv1.forward(x, NormMode::eval);
  const auto p1 = maxpool2d(a, 5, 1, 2), p2 = maxpool2d(p1, 5, 1, 2), p3 = maxpool2d(p2, 5, 1, 2);
  CHECK(values(y) == values(s.cv2.forward(concat<double>({a, p1, p2, p3}, 1), NormMode::eval)));

  auto flat = Tensor<double>::full({1, 2, 5, 5}, 0.7);
  const auto q1 = maxpool2d(flat, 5, 1, 2), q2 = maxpool2d(q1, 5, 1, 2), q3 = maxpool2d(q2, 5, 1, 2);
  CHECK(values(q1) == values(flat));
  CHECK(values(q3) == values(flat));
}

TEST_CASE("build: attention blocks, parameter ordering, determinism") {
  auto none = Model<float>::build(ModelSpec::preset("nano", 2, AttentionKind::none), 0);
  auto cbam = Model<float>::build(ModelSpec::preset("nano", 2, AttentionKind::cbam), 0);
  auto res = Model<float>::build(ModelSpec::preset("nano", 2, AttentionKind::rescbam), 0);
  CHECK(none.attention_block_count() == 0);
  CHECK(res.attention_block_count() == 4);
  CHECK(cbam.attention_block_count() == 4);
  std::size_t attn_tensors = 0;
  for (const auto& e : res.params().entries()) {
    if (e.name.find(".attn.") == std::string::npos) continue;
    ++attn_tensors;
    CHECK(e.name.rfind("neck.", 0) == 0);
  }
  CHECK(attn_tensors == 4 * 4);  // mlp_w1, mlp_w2, conv weight, conv bias
  CHECK(res.params().find("neck.c2f1.attn.mlp_w1") != nullptr);
  CHECK(none.parameter_count() < res.parameter_count());
  CHECK(cbam.parameter_count() == res.parameter_count());

  auto again = Model<float>::build(ModelSpec::preset("nano", 2, AttentionKind::rescbam), 0);
  const auto& a = res.params().entries();
  const auto& b = again.params().entries();
  REQUIRE(a.size() == b.size());
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same = same && a[i].name == b[i].name &&
           std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin());
  }
  CHECK(same);

  // The scales keep the ordering direction.
  for (const char* scale : {"s", "m"}) {
    const auto n = Model<float>::build(ModelSpec::preset(scale, 9, AttentionKind::none), 0).parameter_count();
    const auto r = Model<float>::build(ModelSpec::preset(scale, 9, AttentionKind::rescbam), 0).parameter_count();
    CHECK(n < r);
  }
}

TEST_CASE("spec validation names the violated constraint") {
  auto s = ModelSpec::preset("nano", 2, AttentionKind::none);
  s.input_size = 48;
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("input_size"), Error);
  s = ModelSpec::preset("nano", 0, AttentionKind::none);
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("num_classes"), Error);
  s = ModelSpec::preset("nano", 2, AttentionKind::none);
  s.reg_max = 0;
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("reg_max"), Error);
  CHECK_THROWS_AS(ModelSpec::preset("xl", 2, AttentionKind::none), Error);
}

TEST_CASE("forward: grids, finiteness, input size check") {
  auto m = Model<double>::build(tiny_spec(AttentionKind::rescbam), 4);
  Rng rng(4);
  auto x = random_tensor(rng, {2, 3, 64, 64}, 0, 1);
  const auto raw = m.forward(x);
  REQUIRE(raw.scales.size() == 3);
  const std::size_t grids[3] = {8, 4, 2};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& s = raw.scales[i];
    CHECK(s.cls_logits.shape() == Shape{2, 2, grids[i], grids[i]});
    CHECK(s.reg_logits.shape() == Shape{2, 4 * 9, grids[i], grids[i]});
    for (double v : s.cls_logits.data()) CHECK(std::isfinite(v));
    for (double v : s.reg_logits.data()) CHECK(std::isfinite(v));
  }
  CHECK_THROWS_AS(m.forward(random_tensor(rng, {1, 3, 32, 32})), Error);
}

TEST_CASE("drop-in: identical shapes at every traced node") {
  std::map<AttentionKind, std::vector<TraceEntry>> traces;
  for (auto kind : {AttentionKind::none, AttentionKind::cbam, AttentionKind::rescbam}) {
    auto m = Model<float>::build(ModelSpec::preset("nano", 3, kind), 1);
    m.set_training(false);
    NoGradScope ng;
    m.forward(Tensor<float>::full({1, 3, 64, 64}, 0.5f), &traces[kind]);
  }
  CHECK(traces[AttentionKind::none].size() > 20);
  CHECK(traces[AttentionKind::none] == traces[AttentionKind::cbam]);
  CHECK(traces[AttentionKind::none] == traces[AttentionKind::rescbam]);
}

TEST_CASE("rescbam output differs from the baseline with shared weights copied") {
  auto base = Model<double>::build(tiny_spec(AttentionKind::none), 2);
  auto res = Model<double>::build(tiny_spec(AttentionKind::rescbam), 2);
  for (auto& e : res.params().entries()) {
    if (const auto* src = base.params().find(e.name)) {
      std::copy(src->tensor.data().begin(), src->tensor.data().end(), e.tensor.mutable_data().begin());
    }
  }
  // Batch statistics keep activations at unit scale through the untrained stack.
  base.set_training(true);
  res.set_training(true);
  NoGradScope ng;
  Rng rng(5);
  auto x = random_tensor(rng, {1, 3, 64, 64}, 0, 1);
  const auto a = base.forward(x), b = res.forward(x);
  double diff = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < a.scales[i].reg_logits.numel(); ++k) {
      diff = std::max(diff, std::abs(a.scales[i].reg_logits.data()[k] - b.scales[i].reg_logits.data()[k]));
    }
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("flops are counted and grow with attention") {
  auto none = Model<float>::build(ModelSpec::preset("nano", 2, AttentionKind::none), 0);
  auto res = Model<float>::build(ModelSpec::preset("nano", 2, AttentionKind::rescbam), 0);
  CHECK(none.flops() > 1000000u);
  CHECK(res.flops() > none.flops());
}

namespace {

// Hand-made raw prediction with every class logit at -20 and uniform bins.
RawPrediction<double> blank_raw(const ModelSpec& spec) {
  RawPrediction<double> raw;
  for (int stride : spec.strides) {
    const std::size_t g = spec.input_size / std::size_t(stride);
    ScaleOutput<double> s;
    s.cls_logits = Tensor<double>::full({1, spec.num_classes, g, g}, -20.0);
    s.reg_logits = Tensor<double>::zeros({1, 4 * spec.bins(), g, g});
    s.stride = stride;
    raw.scales.push_back(s);
  }
  return raw;
}

}  // namespace

TEST_CASE("decode: uniform and one-hot bins") {
  const auto spec = tiny_spec(AttentionKind::none);
  auto raw = blank_raw(spec);
  for (std::size_t side = 0; side < 4; ++side) {
    CHECK(expected_side_distance(raw.scales[0].reg_logits, 0, side, 5, spec.bins()) ==
          doctest::Approx(spec.reg_max / 2.0));
  }
  // one-hot bin 3 on every side of cell 5
  auto& reg = raw.scales[0].reg_logits;
  for (std::size_t side = 0; side < 4; ++side) reg.mutable_data()[(side * spec.bins() + 3) * 64 + 5] = 60.0;
  for (std::size_t side = 0; side < 4; ++side) {
    CHECK(expected_side_distance(reg, 0, side, 5, spec.bins()) == doctest::Approx(3.0).epsilon(1e-12));
  }
  CHECK(decode_boxes(raw, spec).front().empty());
}

TEST_CASE("decode: a single confident cell gives one box centred on it") {
  const auto spec = tiny_spec(AttentionKind::none);
  auto raw = blank_raw(spec);
  const std::size_t cell = 2 * 4 + 1;  // row 2, column 1 of the stride-16 grid
  raw.scales[1].cls_logits.mutable_data()[1 * 16 + cell] = 5.0;
  auto& reg = raw.scales[1].reg_logits;
  const int bins[4] = {1, 2, 1, 1};
  for (std::size_t side = 0; side < 4; ++side) reg.mutable_data()[(side * spec.bins() + bins[side]) * 16 + cell] = 60.0;
  const auto boxes = decode_boxes(raw, spec);
  REQUIRE(boxes.front().size() == 1);
  const auto& b = boxes.front().front();
  CHECK(b.class_id == 1);
  CHECK(b.confidence == doctest::Approx(1.0 / (1.0 + std::exp(-5.0))));
  CHECK(b.x1() == doctest::Approx(24.0 - 16.0));
  CHECK(b.y1() == doctest::Approx(40.0 - 32.0));
  CHECK(b.x2() == doctest::Approx(24.0 + 16.0));
  CHECK(b.y2() == doctest::Approx(40.0 + 16.0));
}

TEST_CASE("decode: distances stay within [0, reg_max * stride]") {
  auto m = Model<double>::build(tiny_spec(AttentionKind::rescbam), 6);
  m.set_training(false);
  Rng rng(6);
  const auto raw = m.forward(random_tensor(rng, {1, 3, 64, 64}, 0, 1));
  for (const auto& s : raw.scales) {
    const std::size_t cells = s.reg_logits.dim(2) * s.reg_logits.dim(3);
    for (std::size_t c = 0; c < cells; ++c)
      for (std::size_t side = 0; side < 4; ++side) {
        const double d = expected_side_distance(s.reg_logits, 0, side, c, m.spec().bins());
        CHECK(d >= 0.0);
        CHECK(d <= double(m.spec().reg_max));
      }
  }
  DecodeOptions open;
  open.conf_threshold = 0.0;
  const auto boxes = decode_boxes(raw, m.spec(), open);
  CHECK_FALSE(boxes.front().empty());
  for (const auto& b : boxes.front()) {
    CHECK(b.x1() >= 0.0);
    CHECK(b.x2() <= 64.0);
  }
}

TEST_CASE("suppression is class-wise and keeps the most confident") {
  std::vector<DetBox> boxes{DetBox{10, 10, 10, 10, 0, 0.6}, DetBox{11, 10, 10, 10, 0, 0.9},
                            DetBox{11, 10, 10, 10, 1, 0.5}, DetBox{40, 40, 10, 10, 0, 0.3}};
  const auto kept = suppress_overlaps(boxes, 0.45, 300);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].confidence == 0.9);
  CHECK(kept[1].class_id == 1);
  CHECK(kept[2].cx == 40.0);
}

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

#include "rescbam/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "rescbam/random.hpp"

namespace rescbam {

// ---------------------------------------------------------------------------
// ModelSpec

namespace {

constexpr std::array<std::size_t, 5> kBaseChannels{64, 128, 256, 512, 512};
constexpr std::array<std::size_t, 4> kBaseBackboneDepths{1, 2, 2, 1};
constexpr std::size_t kBaseNeckDepth = 1;

std::size_t scale_depth(std::size_t n, double mult) {
  return std::max<std::size_t>(1, std::size_t(std::ceil(double(n) * mult - 1e-9)));
}

}  // namespace

void ModelSpec::validate() const {
  if (num_classes < 1) fail("model spec: num_classes must be >= 1");
  if (reg_max < 1) fail("model spec: reg_max must be >= 1");
  if (input_size == 0 || input_size % 32 != 0) {
    fail("model spec: input_size must be a positive multiple of 32, got " + std::to_string(input_size));
  }
  if (!(width_mult > 0.0) || !(depth_mult > 0.0)) fail("model spec: width_mult and depth_mult must be positive");
  if (strides != std::vector<int>{8, 16, 32}) fail("model spec: strides must be [8,16,32]");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) fail("model spec: bn_momentum must be in (0,1]");
}

std::vector<std::size_t> ModelSpec::stage_channels() const {
  std::vector<std::size_t> out;
  for (std::size_t c : kBaseChannels) {
    const auto scaled = std::size_t(std::ceil(double(c) * width_mult / 4.0 - 1e-9)) * 4;
    out.push_back(std::max<std::size_t>(4, scaled));
  }
  return out;
}

std::vector<std::size_t> ModelSpec::backbone_depths() const {
  std::vector<std::size_t> out;
  for (std::size_t n : kBaseBackboneDepths) out.push_back(scale_depth(n, depth_mult));
  return out;
}

std::size_t ModelSpec::neck_depth() const { return scale_depth(kBaseNeckDepth, depth_mult); }

ModelSpec ModelSpec::preset(const std::string& scale, std::size_t num_classes, AttentionKind attention,
                            std::size_t input_size) {
  ModelSpec s;
  s.num_classes = num_classes;
  s.attention = attention;
  s.input_size = input_size;
  if (scale == "nano" || scale == "n") {
    s.width_mult = 0.25;
    s.depth_mult = 1.0 / 3.0;
  } else if (scale == "s") {
    s.width_mult = 0.5;
    s.depth_mult = 1.0 / 3.0;
  } else if (scale == "m") {
    s.width_mult = 0.75;
    s.depth_mult = 2.0 / 3.0;
  } else if (scale == "l") {
    s.width_mult = 1.0;
    s.depth_mult = 1.0;
  } else {
    fail("unknown model scale '" + scale + "' (expected nano, s, m or l)");
  }
  return s;
}

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
void ParamStore<T>::add(std::string name, Tensor<T> tensor, ParamRole role) {
  if (find(name)) fail("duplicate parameter name '" + name + "'");
  tensor.set_requires_grad(role != ParamRole::buffer);
  entries_.push_back({std::move(name), std::move(tensor), role});
}

template <typename T>
const NamedParam<T>* ParamStore<T>::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

template <typename T>
std::size_t ParamStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable()) n += e.tensor.numel();
  }
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) {
    if (e.tensor.has_grad()) e.tensor.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// blocks

template <typename T>
Tensor<T> Cbs<T>::forward(const Tensor<T>& x, NormMode mode) {
  return silu(batchnorm2d(conv2d(x, weight, Tensor<T>(), stride, padding), gamma, beta, bn, mode));
}

template <typename T>
Tensor<T> Bottleneck<T>::forward(const Tensor<T>& x, NormMode mode) {
  auto y = cv2.forward(cv1.forward(x, mode), mode);
  return shortcut ? add(x, y) : y;
}

template <typename T>
Tensor<T> C2f<T>::forward(const Tensor<T>& x, NormMode mode) {
  const auto y = cv1.forward(x, mode);
  std::vector<Tensor<T>> parts{slice(y, 1, 0, hidden), slice(y, 1, hidden, hidden)};
  for (auto& block : blocks) parts.push_back(block.forward(parts.back(), mode));
  return cv2.forward(concat(parts, 1), mode);
}

template <typename T>
Tensor<T> Sppf<T>::forward(const Tensor<T>& x, NormMode mode) {
  std::vector<Tensor<T>> parts{cv1.forward(x, mode)};
  for (int i = 0; i < 3; ++i) parts.push_back(maxpool2d(parts.back(), pool, 1, pool / 2));
  return cv2.forward(concat(parts, 1), mode);
}

template <typename T>
Tensor<T> HeadBranch<T>::forward(const Tensor<T>& x, NormMode mode) {
  return out.forward(b.forward(a.forward(x, mode), mode));
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct Model<T>::Blocks {
  Cbs<T> stem0, stem1, down2, down3, down4;
  C2f<T> stage1, stage_p3, stage_p4, stage_p5;
  Sppf<T> sppf;
  C2f<T> top_down1, top_down2, bottom_up1, bottom_up2;
  Cbs<T> bottom_down1, bottom_down2;
  std::vector<CbamParams<T>> attention;  // empty when the spec has none
  std::vector<HeadBranch<T>> reg_heads, cls_heads;
};

namespace {

template <typename T>
class Builder {
 public:
  Builder(ParamStore<T>& store, std::uint64_t seed, double bn_momentum)
      : store_(store), rng_(seed), momentum_(bn_momentum) {}

  Tensor<T> uniform(Shape shape, double bound) {
    auto t = Tensor<T>::zeros(std::move(shape));
    for (T& v : t.mutable_data()) v = T(rng_.uniform(-bound, bound));
    return t;
  }

  Cbs<T> cbs(const std::string& name, std::size_t c_in, std::size_t c_out, int k, int stride) {
    Cbs<T> b;
    b.weight = uniform({c_out, c_in, std::size_t(k), std::size_t(k)}, 1.0 / std::sqrt(double(c_in * k * k)));
    b.gamma = Tensor<T>::full({c_out}, T(1));
    b.beta = Tensor<T>::zeros({c_out});
    b.bn = BatchNormState<T>::create(c_out, momentum_);
    b.stride = stride;
    b.padding = k / 2;
    store_.add(name + ".conv.weight", b.weight, ParamRole::weight);
    store_.add(name + ".bn.weight", b.gamma, ParamRole::bn_gamma);
    store_.add(name + ".bn.bias", b.beta, ParamRole::bn_beta);
    store_.add(name + ".bn.running_mean", b.bn.running_mean, ParamRole::buffer);
    store_.add(name + ".bn.running_var", b.bn.running_var, ParamRole::buffer);
    return b;
  }

  C2f<T> c2f(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t n, bool shortcut) {
    if (c_out % 2 != 0) fail("c2f '" + name + "': output channels " + std::to_string(c_out) + " cannot split evenly");
    C2f<T> b;
    b.hidden = c_out / 2;
    b.cv1 = cbs(name + ".cv1", c_in, 2 * b.hidden, 1, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::string prefix = name + ".m" + std::to_string(i);
      Bottleneck<T> m;
      m.cv1 = cbs(prefix + ".cv1", b.hidden, b.hidden, 3, 1);
      m.cv2 = cbs(prefix + ".cv2", b.hidden, b.hidden, 3, 1);
      m.shortcut = shortcut;
      b.blocks.push_back(std::move(m));
    }
    b.cv2 = cbs(name + ".cv2", (2 + n) * b.hidden, c_out, 1, 1);
    return b;
  }

  Sppf<T> sppf(const std::string& name, std::size_t c_in, std::size_t c_out) {
    Sppf<T> b;
    const std::size_t hidden = std::max<std::size_t>(1, c_in / 2);
    b.cv1 = cbs(name + ".cv1", c_in, hidden, 1, 1);
    b.cv2 = cbs(name + ".cv2", 4 * hidden, c_out, 1, 1);
    return b;
  }

  CbamParams<T> attention(const std::string& name, std::size_t channels, bool mlp_bias) {
    auto p = CbamParams<T>::create(channels, kDefaultReduction, mlp_bias);
    const std::size_t hidden = p.channel.mlp_w1.dim(0);
    p.channel.mlp_w1 = uniform({hidden, channels}, 1.0 / std::sqrt(double(channels)));
    p.channel.mlp_w2 = uniform({channels, hidden}, 1.0 / std::sqrt(double(hidden)));
    p.spatial.conv_weight =
        uniform({1, 2, kSpatialKernel, kSpatialKernel}, 1.0 / std::sqrt(double(2 * kSpatialKernel * kSpatialKernel)));
    store_.add(name + ".mlp_w1", p.channel.mlp_w1, ParamRole::weight);
    store_.add(name + ".mlp_w2", p.channel.mlp_w2, ParamRole::weight);
    if (mlp_bias) {
      store_.add(name + ".mlp_b1", p.channel.mlp_b1, ParamRole::bias);
      store_.add(name + ".mlp_b2", p.channel.mlp_b2, ParamRole::bias);
    }
    store_.add(name + ".conv_weight", p.spatial.conv_weight, ParamRole::weight);
    store_.add(name + ".conv_bias", p.spatial.conv_bias, ParamRole::bias);
    return p;
  }

  HeadBranch<T> head(const std::string& name, std::size_t c_in, std::size_t hidden, std::size_t c_out,
                     double bias_value, bool fixed_bias) {
    HeadBranch<T> h;
    h.a = cbs(name + ".0", c_in, hidden, 3, 1);
    h.b = cbs(name + ".1", hidden, hidden, 3, 1);
    const double bound = 1.0 / std::sqrt(double(hidden));
    h.out.weight = uniform({c_out, hidden, 1, 1}, bound);
    h.out.bias = fixed_bias ? Tensor<T>::full({c_out}, T(bias_value)) : uniform({c_out}, bound);
    store_.add(name + ".2.weight", h.out.weight, ParamRole::weight);
    store_.add(name + ".2.bias", h.out.bias, ParamRole::bias);
    return h;
  }

 private:
  ParamStore<T>& store_;
  Rng rng_;
  double momentum_;
};

std::size_t round_up4(std::size_t c) { return (c + 3) / 4 * 4; }

}  // namespace

template <typename T>
Model<T> Model<T>::build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  m.blocks_ = std::make_shared<Blocks>();
  Blocks& b = *m.blocks_;
  Builder<T> build(m.params_, seed, spec.bn_momentum);

  const auto ch = spec.stage_channels();
  const auto depth = spec.backbone_depths();
  const std::size_t nd = spec.neck_depth();

  b.stem0 = build.cbs("backbone.stem0", 3, ch[0], 3, 2);
  b.stem1 = build.cbs("backbone.stem1", ch[0], ch[1], 3, 2);
  b.stage1 = build.c2f("backbone.c2f1", ch[1], ch[1], depth[0], true);
  b.down2 = build.cbs("backbone.down2", ch[1], ch[2], 3, 2);
  b.stage_p3 = build.c2f("backbone.c2f2", ch[2], ch[2], depth[1], true);
  b.down3 = build.cbs("backbone.down3", ch[2], ch[3], 3, 2);
  b.stage_p4 = build.c2f("backbone.c2f3", ch[3], ch[3], depth[2], true);
  b.down4 = build.cbs("backbone.down4", ch[3], ch[4], 3, 2);
  b.stage_p5 = build.c2f("backbone.c2f4", ch[4], ch[4], depth[3], true);
  b.sppf = build.sppf("backbone.sppf", ch[4], ch[4]);

  const bool attn = spec.attention != AttentionKind::none;
  b.top_down1 = build.c2f("neck.c2f1", ch[4] + ch[3], ch[3], nd, false);
  if (attn) b.attention.push_back(build.attention("neck.c2f1.attn", ch[3], spec.attention_mlp_bias));
  b.top_down2 = build.c2f("neck.c2f2", ch[3] + ch[2], ch[2], nd, false);
  if (attn) b.attention.push_back(build.attention("neck.c2f2.attn", ch[2], spec.attention_mlp_bias));
  b.bottom_down1 = build.cbs("neck.down1", ch[2], ch[2], 3, 2);
  b.bottom_up1 = build.c2f("neck.c2f3", ch[2] + ch[3], ch[3], nd, false);
  if (attn) b.attention.push_back(build.attention("neck.c2f3.attn", ch[3], spec.attention_mlp_bias));
  b.bottom_down2 = build.cbs("neck.down2", ch[3], ch[3], 3, 2);
  b.bottom_up2 = build.c2f("neck.c2f4", ch[3] + ch[4], ch[4], nd, false);
  if (attn) b.attention.push_back(build.attention("neck.c2f4.attn", ch[4], spec.attention_mlp_bias));

  const std::array<std::size_t, 3> head_in{ch[2], ch[3], ch[4]};
  const std::size_t reg_hidden = round_up4(std::max({std::size_t(16), head_in[0] / 4, 4 * spec.reg_max}));
  const std::size_t cls_hidden = round_up4(std::max(head_in[0], std::min<std::size_t>(spec.num_classes, 100)));
  const double cls_bias = -std::log((1.0 - kClassPriorProbability) / kClassPriorProbability);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string scale = "head.p" + std::to_string(i + 3);
    b.reg_heads.push_back(build.head(scale + ".reg", head_in[i], reg_hidden, 4 * spec.bins(), 0.0, false));
    b.cls_heads.push_back(build.head(scale + ".cls", head_in[i], cls_hidden, spec.num_classes, cls_bias, true));
  }
  return m;
}

template <typename T>
RawPrediction<T> Model<T>::forward(const Tensor<T>& images, std::vector<TraceEntry>* trace) {
  const std::size_t S = spec_.input_size;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != S || images.dim(3) != S) {
    fail("model input must be [N,3," + std::to_string(S) + "," + std::to_string(S) + "], got " +
         shape_str(images.shape()));
  }
  Blocks& b = *blocks_;
  const NormMode mode = mode_;
  auto mark = [trace](const char* node, const Tensor<T>& t) {
    if (trace) trace->push_back({node, t.shape()});
    return t;
  };
  auto attend = [&](std::size_t i, const char* node, const Tensor<T>& x) {
    const auto y = b.attention.empty() ? x : attention_apply(spec_.attention, x, b.attention[i]);
    return mark(node, y);
  };

  auto x = mark("backbone.stem0", b.stem0.forward(images, mode));
  x = mark("backbone.stem1", b.stem1.forward(x, mode));
  x = mark("backbone.c2f1", b.stage1.forward(x, mode));
  x = mark("backbone.down2", b.down2.forward(x, mode));
  const auto p3 = mark("backbone.c2f2", b.stage_p3.forward(x, mode));
  x = mark("backbone.down3", b.down3.forward(p3, mode));
  const auto p4 = mark("backbone.c2f3", b.stage_p4.forward(x, mode));
  x = mark("backbone.down4", b.down4.forward(p4, mode));
  x = mark("backbone.c2f4", b.stage_p5.forward(x, mode));
  const auto p5 = mark("backbone.sppf", b.sppf.forward(x, mode));

  x = mark("neck.c2f1", b.top_down1.forward(concat<T>({upsample_nearest2x(p5), p4}, 1), mode));
  const auto n4 = attend(0, "neck.c2f1.attn", x);
  x = mark("neck.c2f2", b.top_down2.forward(concat<T>({upsample_nearest2x(n4), p3}, 1), mode));
  const auto out3 = attend(1, "neck.c2f2.attn", x);
  x = mark("neck.down1", b.bottom_down1.forward(out3, mode));
  x = mark("neck.c2f3", b.bottom_up1.forward(concat<T>({x, n4}, 1), mode));
  const auto out4 = attend(2, "neck.c2f3.attn", x);
  x = mark("neck.down2", b.bottom_down2.forward(out4, mode));
  x = mark("neck.c2f4", b.bottom_up2.forward(concat<T>({x, p5}, 1), mode));
  const auto out5 = attend(3, "neck.c2f4.attn", x);

  static constexpr std::array<const char*, 3> kRegNames{"head.p3.reg", "head.p4.reg", "head.p5.reg"};
  static constexpr std::array<const char*, 3> kClsNames{"head.p3.cls", "head.p4.cls", "head.p5.cls"};
  const std::array<Tensor<T>, 3> levels{out3, out4, out5};
  RawPrediction<T> raw;
  for (std::size_t i = 0; i < 3; ++i) {
    ScaleOutput<T> s;
    s.reg_logits = mark(kRegNames[i], b.reg_heads[i].forward(levels[i], mode));
    s.cls_logits = mark(kClsNames[i], b.cls_heads[i].forward(levels[i], mode));
    s.stride = spec_.strides[i];
    raw.scales.push_back(std::move(s));
  }
  return raw;
}

template <typename T>
std::uint64_t Model<T>::flops() {
  const NormMode saved = mode_;
  mode_ = NormMode::eval;
  OpCounter counter;
  {
    NoGradScope no_grad;
    OpCountScope scope(counter);
    forward(Tensor<T>::zeros({1, 3, spec_.input_size, spec_.input_size}));
  }
  mode_ = saved;
  return counter.flops;
}

template <typename T>
std::size_t Model<T>::attention_block_count() const {
  return blocks_->attention.size();
}

template <typename T>
void Model<T>::load_values_from(const ParamStore<T>& other) {
  auto& mine = params_.entries();
  if (mine.size() != other.entries().size()) {
    fail("parameter layout mismatch: " + std::to_string(other.entries().size()) + " tensors supplied, model has " +
         std::to_string(mine.size()));
  }
  for (auto& e : mine) {
    const auto* src = other.find(e.name);
    if (!src) fail("parameter '" + e.name + "' missing from source");
    if (src->tensor.shape() != e.tensor.shape()) {
      fail("parameter '" + e.name + "' has shape " + shape_str(src->tensor.shape()) + ", model expects " +
           shape_str(e.tensor.shape()));
    }
    std::copy(src->tensor.data().begin(), src->tensor.data().end(), e.tensor.mutable_data().begin());
  }
}

template <typename T>
template <typename U>
Model<U> Model<T>::convert() const {
  Model<U> out = Model<U>::build(spec_, 0);
  for (auto& e : out.params().entries()) {
    const auto* src = params_.find(e.name);
    if (!src) fail("parameter '" + e.name + "' missing during precision conversion");
    auto dst = e.tensor.mutable_data();
    const auto values = src->tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = U(values[i]);
  }
  out.set_training(training());
  return out;
}

// ---------------------------------------------------------------------------
// decoding

template <typename T>
double expected_side_distance(const Tensor<T>& reg_logits, std::size_t image, std::size_t side, std::size_t cell,
                              std::size_t bins) {
  const std::size_t C = reg_logits.dim(1), HW = reg_logits.dim(2) * reg_logits.dim(3);
  const auto data = reg_logits.data();
  const std::size_t base = (image * C + side * bins) * HW + cell;
  double mx = data[base];
  for (std::size_t k = 1; k < bins; ++k) mx = std::max(mx, double(data[base + k * HW]));
  double z = 0.0, e = 0.0;
  for (std::size_t k = 0; k < bins; ++k) {
    const double p = std::exp(double(data[base + k * HW]) - mx);
    z += p;
    e += p * double(k);
  }
  return e / z;
}

std::vector<DetBox> suppress_overlaps(std::vector<DetBox> boxes, double iou_threshold, std::size_t max_detections) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const DetBox& a, const DetBox& b) { return a.confidence > b.confidence; });
  std::vector<DetBox> kept;
  for (const auto& box : boxes) {
    if (kept.size() >= max_detections) break;
    bool overlaps = false;
    for (const auto& k : kept) {
      if (k.class_id == box.class_id && iou(k, box) > iou_threshold) {
        overlaps = true;
        break;
      }
    }
    if (!overlaps) kept.push_back(box);
  }
  return kept;
}

template <typename T>
std::vector<std::vector<DetBox>> decode_boxes(const RawPrediction<T>& raw, const ModelSpec& spec,
                                              const DecodeOptions& options) {
  const std::size_t N = raw.batch();
  const double size = double(spec.input_size);
  std::vector<std::vector<DetBox>> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<DetBox> candidates;
    for (const auto& s : raw.scales) {
      const std::size_t nc = s.cls_logits.dim(1), H = s.cls_logits.dim(2), W = s.cls_logits.dim(3);
      const auto cls = s.cls_logits.data();
      for (std::size_t cell = 0; cell < H * W; ++cell) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < nc; ++c) {
          if (cls[(n * nc + c) * H * W + cell] > cls[(n * nc + best) * H * W + cell]) best = c;
        }
        const double logit = cls[(n * nc + best) * H * W + cell];
        const double score = 1.0 / (1.0 + std::exp(-logit));
        if (score < options.conf_threshold) continue;
        const double stride = s.stride;
        const double cx = (double(cell % W) + 0.5) * stride, cy = (double(cell / W) + 0.5) * stride;
        std::array<double, 4> d{};
        for (std::size_t side = 0; side < 4; ++side) {
          d[side] = expected_side_distance(s.reg_logits, n, side, cell, spec.bins()) * stride;
        }
        const double x1 = std::clamp(cx - d[0], 0.0, size), y1 = std::clamp(cy - d[1], 0.0, size);
        const double x2 = std::clamp(cx + d[2], 0.0, size), y2 = std::clamp(cy + d[3], 0.0, size);
        if (x2 <= x1 || y2 <= y1) continue;
        candidates.push_back(DetBox::from_corners(x1, y1, x2, y2, int(best), score));
      }
    }
    out[n] = suppress_overlaps(std::move(candidates), options.iou_threshold, options.max_detections);
  }
  return out;
}

#define RESCBAM_INSTANTIATE_MODEL(T)                                                                            \
  template class ParamStore<T>;                                                                                 \
  template struct Cbs<T>;                                                                                       \
  template struct Bottleneck<T>;                                                                                \
  template struct C2f<T>;                                                                                       \
  template struct Sppf<T>;                                                                                      \
  template struct HeadBranch<T>;                                                                                \
  template class Model<T>;                                                                                      \
  template double expected_side_distance(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
  template std::vector<std::vector<DetBox>> decode_boxes(const RawPrediction<T>&, const ModelSpec&,             \
                                                         const DecodeOptions&);

RESCBAM_INSTANTIATE_MODEL(float)
RESCBAM_INSTANTIATE_MODEL(double)

template Model<double> Model<float>::convert<double>() const;
template Model<float> Model<double>::convert<float>() const;
template Model<float> Model<float>::convert<float>() const;
template Model<double> Model<double>::convert<double>() const;

}  // namespace rescbam

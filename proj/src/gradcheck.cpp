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

#include "rescbam/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <fmt/format.h>

#include "rescbam/attention.hpp"
#include "rescbam/error.hpp"
#include "rescbam/losses.hpp"
#include "rescbam/model.hpp"
#include "rescbam/ops.hpp"

namespace rescbam {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradcheckStats compare_gradients(const std::function<Tensor<double>()>& loss, const std::vector<Tensor<double>>& inputs,
                                 double tolerance, const GradcheckOptions& options,
                                 const std::vector<std::vector<std::size_t>>& coords) {
  if (!coords.empty() && coords.size() != inputs.size()) fail("compare_gradients: coords must match inputs");
  for (const auto& t : inputs) {
    if (!t.requires_grad()) fail("compare_gradients: every input must require grad");
    if (t.has_grad()) t.zero_grad();
  }
  {
    Tape tape;
    Tensor<double> value;
    {
      TapeScope scope(tape);
      value = loss();
    }
    tape.backward(value);
  }
  GradcheckStats stats;
  NoGradScope no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double> t = inputs[i];
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<std::size_t> all;
    const std::vector<std::size_t>* which = coords.empty() || coords[i].empty() ? nullptr : &coords[i];
    if (!which) {
      all.resize(t.numel());
      for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
      which = &all;
    }
    for (std::size_t j : *which) {
      auto central = [&](double h) {
        auto data = t.mutable_data();
        const double saved = data[j];
        data[j] = saved + h;
        const double plus = loss().item();
        data[j] = saved - h;
        const double minus = loss().item();
        data[j] = saved;
        return (plus - minus) / (2.0 * h);
      };
      double numeric = central(options.step);
      double err = relative_error(analytic[j], numeric, options.floor);
      ++stats.coordinates;
      for (int k = 1; k <= 2 && !(err <= tolerance); ++k) {
        const double finer = central(options.step / (k == 1 ? 10.0 : 100.0));
        const double e = relative_error(analytic[j], finer, options.floor);
        if (e <= tolerance) {
          numeric = finer;
          err = e;
          ++stats.refined;
        }
      }
      if (!(err <= tolerance)) ++stats.failures;
      if (!(err <= stats.max_rel_error)) {
        stats.max_rel_error = err;
        stats.worst = fmt::format("input {}[{}]: analytic {:.9g}, numeric {:.9g}", i, j, analytic[j], numeric);
      }
    }
  }
  return stats;
}

namespace {

using T = double;
using Fn = std::function<Tensor<T>()>;

void merge(GradcheckStats& into, const GradcheckStats& s) {
  into.coordinates += s.coordinates;
  into.failures += s.failures;
  into.refined += s.refined;
  if (s.max_rel_error >= into.max_rel_error) {
    into.max_rel_error = s.max_rel_error;
    into.worst = s.worst;
  }
}

Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// Shuffled values at least 0.05 apart, so no max-like op sits near a tie.
Tensor<T> distinct_tensor(Rng& rng, Shape shape) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = (double(i) - double(d.size()) / 2) * 0.1 + rng.uniform(0.0, 0.05);
  rng.shuffle(d.begin(), d.end());
  return t;
}

// Values with |x| in [0.1, 2], away from the rectifier's kink.
Tensor<T> off_zero_tensor(Rng& rng, Shape shape) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 2.0);
  return t;
}

// sum(out * R) for a fixed random R, so every output element carries a
// distinct weight.
GradcheckStats readout_check(Rng& rng, const std::vector<Tensor<T>>& inputs, const Fn& forward, double tol,
                             const GradcheckOptions& opt) {
  Shape shape;
  {
    NoGradScope no_grad;
    shape = forward().shape();
  }
  auto weights = Tensor<T>::zeros(shape);
  for (auto& v : weights.mutable_data()) v = rng.uniform(-1.0, 1.0);
  return compare_gradients([&] { return sum(mul(forward(), weights)); }, inputs, tol, opt);
}

GradcheckCase op_case(std::string name, std::function<GradcheckStats(Rng&, double, const GradcheckOptions&)> run) {
  return GradcheckCase{std::move(name), "op", 1e-4, 20, std::move(run)};
}

std::vector<GradcheckCase> op_cases() {
  std::vector<GradcheckCase> cases;
  cases.push_back(op_case("conv2d", [](Rng& rng, double tol, const GradcheckOptions& o) {
    const int stride = 1 + int(rng.index(2)), pad = int(rng.index(2));
    auto x = random_tensor(rng, {2, 3, 5, 5}), w = random_tensor(rng, {4, 3, 3, 3}), b = random_tensor(rng, {4});
    return readout_check(rng, {x, w, b}, [=] { return conv2d(x, w, b, stride, pad); }, tol, o);
  }));
  cases.push_back(op_case("batchnorm2d.train", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 3, 4, 4}), g = random_tensor(rng, {3}, 0.5, 1.5), b = random_tensor(rng, {3});
    auto state = std::make_shared<BatchNormState<T>>(BatchNormState<T>::create(3));
    return readout_check(rng, {x, g, b}, [=] { return batchnorm2d(x, g, b, *state, NormMode::train); }, tol, o);
  }));
  cases.push_back(op_case("batchnorm2d.eval", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 3, 4, 4}), g = random_tensor(rng, {3}, 0.5, 1.5), b = random_tensor(rng, {3});
    auto state = std::make_shared<BatchNormState<T>>(BatchNormState<T>::create(3));
    for (auto& v : state->running_mean.mutable_data()) v = rng.uniform(-1, 1);
    for (auto& v : state->running_var.mutable_data()) v = rng.uniform(0.5, 2);
    return readout_check(rng, {x, g, b}, [=] { return batchnorm2d(x, g, b, *state, NormMode::eval); }, tol, o);
  }));
  for (auto [name, kind] : {std::pair{"silu", Activation::silu}, std::pair{"sigmoid", Activation::sigmoid},
                            std::pair{"relu", Activation::relu}}) {
    cases.push_back(op_case(name, [kind = kind](Rng& rng, double tol, const GradcheckOptions& o) {
      auto x = kind == Activation::relu ? off_zero_tensor(rng, {2, 3, 4}) : random_tensor(rng, {2, 3, 4}, -6, 6);
      return readout_check(rng, {x}, [=] { return activation(x, kind); }, tol, o);
    }));
  }
  for (auto [name, kind] : {std::pair{"pool_global.avg", PoolKind::avg}, std::pair{"pool_global.max", PoolKind::max}}) {
    cases.push_back(op_case(name, [kind = kind](Rng& rng, double tol, const GradcheckOptions& o) {
      auto x = distinct_tensor(rng, {2, 3, 4, 5});
      return readout_check(rng, {x}, [=] { return pool_global(x, kind); }, tol, o);
    }));
  }
  for (auto [name, kind] : {std::pair{"pool_channel.avg", PoolKind::avg}, std::pair{"pool_channel.max", PoolKind::max}}) {
    cases.push_back(op_case(name, [kind = kind](Rng& rng, double tol, const GradcheckOptions& o) {
      auto x = distinct_tensor(rng, {2, 4, 3, 3});
      return readout_check(rng, {x}, [=] { return pool_channel(x, kind); }, tol, o);
    }));
  }
  cases.push_back(op_case("maxpool2d", [](Rng& rng, double tol, const GradcheckOptions& o) {
    const bool sppf_like = rng.uniform() < 0.5;
    auto x = distinct_tensor(rng, {1, 2, 6, 6});
    return readout_check(
        rng, {x}, [=] { return sppf_like ? maxpool2d(x, 5, 1, 2) : maxpool2d(x, 2, 2, 0); }, tol, o);
  }));
  cases.push_back(op_case("concat", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto a = random_tensor(rng, {2, 2, 3, 3}), b = random_tensor(rng, {2, 3, 3, 3});
    return readout_check(rng, {a, b}, [=] { return concat<T>({a, b}, 1); }, tol, o);
  }));
  cases.push_back(op_case("slice", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 5, 3, 3});
    return readout_check(rng, {x}, [=] { return slice(x, 1, 1, 3); }, tol, o);
  }));
  cases.push_back(op_case("upsample_nearest2x", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 2, 3, 3});
    return readout_check(rng, {x}, [=] { return upsample_nearest2x(x); }, tol, o);
  }));
  cases.push_back(op_case("linear", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {3, 5}), w = random_tensor(rng, {4, 5}), b = random_tensor(rng, {4});
    return readout_check(rng, {x, w, b}, [=] { return linear(x, w, b); }, tol, o);
  }));
  cases.push_back(op_case("softmax_axis", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 5, 3}, -4, 4);
    const std::size_t axis = rng.index(3);
    return readout_check(rng, {x}, [=] { return softmax_axis(x, axis); }, tol, o);
  }));
  cases.push_back(op_case("add", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {2, 3, 4});
    return readout_check(rng, {a, b}, [=] { return add(a, b); }, tol, o);
  }));
  cases.push_back(op_case("mul", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {2, 3, 4});
    return readout_check(rng, {a, b}, [=] { return mul(a, b); }, tol, o);
  }));
  cases.push_back(op_case("scale", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto a = random_tensor(rng, {2, 3, 4});
    const double f = rng.uniform(-2, 2);
    return readout_check(rng, {a}, [=] { return scale(a, f); }, tol, o);
  }));
  cases.push_back(op_case("scale_channels", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 3, 4, 4}), g = random_tensor(rng, {2, 3, 1, 1});
    return readout_check(rng, {x, g}, [=] { return scale_channels(x, g); }, tol, o);
  }));
  cases.push_back(op_case("scale_spatial", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 3, 4, 4}), g = random_tensor(rng, {2, 1, 4, 4});
    return readout_check(rng, {x, g}, [=] { return scale_spatial(x, g); }, tol, o);
  }));
  cases.push_back(op_case("sum", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 3, 4});
    return readout_check(rng, {x}, [=] { return sum(x); }, tol, o);
  }));
  cases.push_back(op_case("mean", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto x = random_tensor(rng, {2, 3, 4});
    return readout_check(rng, {x}, [=] { return mean(x); }, tol, o);
  }));
  cases.push_back(op_case("weighted_sum", [](Rng& rng, double tol, const GradcheckOptions& o) {
    auto a = random_tensor(rng, {1}), b = random_tensor(rng, {1}), c = random_tensor(rng, {1});
    const std::vector<T> w{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    return readout_check(rng, {a, b, c}, [=] { return weighted_sum<T>({a, b, c}, w); }, tol, o);
  }));
  return cases;
}

CbamParams<T> random_cbam(Rng& rng, std::size_t channels, std::vector<Tensor<T>>& inputs) {
  auto p = CbamParams<T>::create(channels);
  auto fill = [&](Tensor<T>& t, double bound) {
    t = random_tensor(rng, t.shape(), -bound, bound);
    inputs.push_back(t);
  };
  fill(p.channel.mlp_w1, 1.0);
  fill(p.channel.mlp_w2, 1.0);
  fill(p.spatial.conv_weight, 0.3);
  fill(p.spatial.conv_bias, 0.3);
  return p;
}

std::vector<GradcheckCase> module_cases() {
  std::vector<GradcheckCase> cases;
  auto module_case = [](std::string name, std::function<GradcheckStats(Rng&, double, const GradcheckOptions&)> run) {
    return GradcheckCase{std::move(name), "module", 1e-4, 20, std::move(run)};
  };
  cases.push_back(module_case("channel_attention", [](Rng& rng, double tol, const GradcheckOptions& o) {
    std::vector<Tensor<T>> in{random_tensor(rng, {2, 8, 3, 3})};
    const auto p = random_cbam(rng, 8, in);
    const auto x = in[0];
    return readout_check(rng, {in[0], in[1], in[2]}, [=] { return channel_attention(x, p.channel); }, tol, o);
  }));
  cases.push_back(module_case("spatial_attention", [](Rng& rng, double tol, const GradcheckOptions& o) {
    std::vector<Tensor<T>> in{distinct_tensor(rng, {2, 3, 4, 4})};
    const auto p = random_cbam(rng, 3, in);
    const auto x = in[0];
    return readout_check(rng, {in[0], in[3], in[4]}, [=] { return spatial_attention(x, p.spatial); }, tol, o);
  }));
  for (auto kind : {AttentionKind::cbam, AttentionKind::rescbam}) {
    cases.push_back(module_case(to_string(kind), [kind](Rng& rng, double tol, const GradcheckOptions& o) {
      std::vector<Tensor<T>> in{random_tensor(rng, {2, 8, 4, 4})};
      const auto p = random_cbam(rng, 8, in);
      const auto x = in[0];
      return readout_check(rng, in, [=] { return attention_apply(kind, x, p); }, tol, o);
    }));
  }
  cases.push_back(module_case("total_loss", [](Rng& rng, double tol, const GradcheckOptions& o) {
    ModelSpec spec;
    spec.num_classes = 2;
    spec.reg_max = 4;
    spec.input_size = 64;
    RawPrediction<T> raw;
    std::vector<Tensor<T>> inputs;
    for (int stride : spec.strides) {
      const std::size_t g = spec.input_size / std::size_t(stride);
      ScaleOutput<T> s;
      s.cls_logits = random_tensor(rng, {1, spec.num_classes, g, g}, -3, 3);
      s.reg_logits = random_tensor(rng, {1, 4 * spec.bins(), g, g}, -2, 2);
      s.stride = stride;
      inputs.push_back(s.cls_logits);
      inputs.push_back(s.reg_logits);
      raw.scales.push_back(s);
    }
    std::vector<DetBox> gts;
    const std::size_t count = 1 + rng.index(3);
    for (std::size_t k = 0; k < count; ++k) {
      const double w = rng.uniform(6, 40), h = rng.uniform(6, 40);
      const double x1 = rng.uniform(0, 64 - w), y1 = rng.uniform(0, 64 - h);
      gts.push_back(DetBox::from_corners(x1, y1, x1 + w, y1 + h, int(rng.index(2))));
    }
    AssignedTargets targets;
    {
      NoGradScope no_grad;
      targets = assign_targets(raw, spec, {gts});
    }
    return compare_gradients([&] { return total_loss(raw, targets, spec).total; }, inputs, tol, o);
  }));
  return cases;
}

GradcheckCase model_case() {
  GradcheckCase c;
  c.name = "model.total_loss";
  c.scope = "model";
  c.tolerance = 1e-3;
  c.draws = 1;
  c.run = [](Rng& rng, double tol, const GradcheckOptions& o) {
    // Full graph at 64x64 with narrow stages to keep the sweep short.
    ModelSpec spec = ModelSpec::preset("nano", 2, AttentionKind::rescbam, 64);
    spec.width_mult = 1.0 / 16.0;
    spec.reg_max = 8;
    auto model = Model<T>::build(spec, rng.next());
    model.set_training(true);
    auto images = Tensor<T>::zeros({2, 3, 64, 64});
    for (auto& v : images.mutable_data()) v = rng.uniform(0, 1);
    const std::vector<std::vector<DetBox>> gts{
        {DetBox::from_corners(8, 10, 30, 40, 0), DetBox::from_corners(40, 6, 60, 20, 1)},
        {DetBox::from_corners(20, 20, 44, 52, 1)}};
    AssignedTargets targets;
    {
      NoGradScope no_grad;
      targets = assign_targets(model.forward(images), spec, gts);
    }
    std::vector<Tensor<T>> inputs;
    std::vector<std::vector<std::size_t>> coords;
    for (auto& e : model.params().entries()) {
      if (!e.trainable()) continue;
      inputs.push_back(e.tensor);
      // 1% of every tensor, at least one entry.
      const std::size_t n = e.tensor.numel(), take = std::max<std::size_t>(1, (n + 99) / 100);
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(take);
      std::sort(idx.begin(), idx.end());
      coords.push_back(std::move(idx));
    }
    return compare_gradients([&] { return total_loss(model.forward(images), targets, spec).total; }, inputs, tol, o,
                             coords);
  };
  return c;
}

}  // namespace

std::vector<GradcheckCase> gradcheck_suite(const std::string& scope) {
  if (scope != "op" && scope != "module" && scope != "model" && scope != "all") {
    fail("gradcheck scope must be op, module, model or all, got '" + scope + "'");
  }
  std::vector<GradcheckCase> cases;
  if (scope == "op" || scope == "all") {
    for (auto& c : op_cases()) cases.push_back(std::move(c));
  }
  if (scope == "module" || scope == "all") {
    for (auto& c : module_cases()) cases.push_back(std::move(c));
  }
  if (scope == "model" || scope == "all") cases.push_back(model_case());
  return cases;
}

std::vector<GradcheckReport> run_gradcheck(const std::vector<GradcheckCase>& cases, std::uint64_t seed,
                                           const GradcheckOptions& options) {
  std::vector<GradcheckReport> out;
  Rng rng(seed);
  for (const auto& c : cases) {
    GradcheckReport r;
    r.name = c.name;
    r.scope = c.scope;
    r.tolerance = c.tolerance;
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckStats total;
    for (std::size_t d = 0; d < c.draws; ++d) {
      Rng draw(rng.next());
      merge(total, c.run(draw, c.tolerance, options));
      ++r.draws;
    }
    r.coordinates = total.coordinates;
    r.failures = total.failures;
    r.refined = total.refined;
    r.max_rel_error = total.max_rel_error;
    r.worst = total.worst;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

std::string render_gradcheck_table(const std::vector<GradcheckReport>& reports) {
  std::string out = fmt::format("{:<22} {:<7} {:>6} {:>8} {:>12} {:>9} {:>7}  {}\n", "check", "scope", "draws",
                                "coords", "max_rel_err", "tol", "sec", "result");
  std::size_t refined = 0;
  for (const auto& r : reports) {
    out += fmt::format("{:<22} {:<7} {:>6} {:>8} {:>12.3e} {:>9.0e} {:>7.2f}  {}\n", r.name, r.scope, r.draws,
                       r.coordinates, r.max_rel_error, r.tolerance, r.seconds, r.passed() ? "PASS" : "FAIL");
    if (!r.passed() && !r.worst.empty()) out += fmt::format("  worst {}\n", r.worst);
    refined += r.refined;
  }
  if (refined > 0) out += fmt::format("{} coordinate(s) agreed only at a finer step\n", refined);
  return out;
}

}  // namespace rescbam

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
#include <limits>

#include <doctest.h>

#include "oracles.hpp"
#include "rescbam/attention.hpp"
#include "rescbam/gradcheck.hpp"

using namespace rescbam;

namespace {

template <typename T>
void fill(Rng& rng, Tensor<T>& t, double lo = -1, double hi = 1) {
  for (auto& v : t.mutable_data()) v = T(rng.uniform(lo, hi));
}

Tensor<double> random_features(Rng& rng, Shape s) {
  auto t = Tensor<double>::zeros(std::move(s));
  fill(rng, t, -2, 2);
  return t;
}

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Step-by-step channel gate on plain vectors.
std::vector<double> channel_gate_ref(const Tensor<double>& f, const ChannelAttentionParams<double>& p) {
  const std::size_t N = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3), Hd = p.mlp_w1.dim(0);
  std::vector<double> out(N * C);
  auto mlp = [&](const std::vector<double>& d) {
    std::vector<double> h(Hd), o(C);
    for (std::size_t j = 0; j < Hd; ++j) {
      double a = 0;
      for (std::size_t c = 0; c < C; ++c) a += p.mlp_w1.data()[j * C + c] * d[c];
      h[j] = std::max(0.0, a);
    }
    for (std::size_t c = 0; c < C; ++c) {
      double a = 0;
      for (std::size_t j = 0; j < Hd; ++j) a += p.mlp_w2.data()[c * Hd + j] * h[j];
      o[c] = a;
    }
    return o;
  };
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> avg(C), mx(C);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0, m = -INFINITY;
      for (std::size_t i = 0; i < HW; ++i) {
        const double v = f.data()[(n * C + c) * HW + i];
        s += v;
        m = std::max(m, v);
      }
      avg[c] = s / double(HW);
      mx[c] = m;
    }
    const auto a = mlp(avg), b = mlp(mx);
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = sigma(a[c] + b[c]);
  }
  return out;
}

std::vector<double> spatial_gate_ref(const Tensor<double>& f, const SpatialAttentionParams<double>& p) {
  const std::size_t N = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  std::vector<double> pooled(N * 2 * H * W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < H * W; ++i) {
      double s = 0, m = -INFINITY;
      for (std::size_t c = 0; c < C; ++c) {
        const double v = f.data()[(n * C + c) * H * W + i];
        s += v;
        m = std::max(m, v);
      }
      pooled[(n * 2) * H * W + i] = s / double(C);
      pooled[(n * 2 + 1) * H * W + i] = m;
    }
  const std::vector<double> w(p.conv_weight.data().begin(), p.conv_weight.data().end());
  const std::vector<double> b(p.conv_bias.data().begin(), p.conv_bias.data().end());
  std::size_t OH = 0, OW = 0;
  auto z = oracle::conv2d(pooled, N, 2, H, W, w, 1, 7, 7, &b, 1, 3, OH, OW);
  for (auto& v : z) v = sigma(v);
  return z;
}

CbamParams<double> random_params(Rng& rng, std::size_t C, std::size_t r = 4) {
  auto p = CbamParams<double>::create(C, r);
  fill(rng, p.channel.mlp_w1);
  fill(rng, p.channel.mlp_w2);
  fill(rng, p.spatial.conv_weight, -0.3, 0.3);
  fill(rng, p.spatial.conv_bias);
  return p;
}

}  // namespace

TEST_CASE("zero parameters: gates are 0.5, cbam scales by 0.25, rescbam by 1.25") {
  Rng rng(1);
  auto f = random_features(rng, {2, 16, 5, 6});
  auto p = CbamParams<double>::create(16);
  const auto mc = channel_attention(f, p.channel);
  const auto ms = spatial_attention(f, p.spatial);
  for (double v : mc.data()) CHECK(v == 0.5);
  for (double v : ms.data()) CHECK(v == 0.5);
  const auto c = cbam_apply(f, p);
  const auto r = rescbam_apply(f, p);
  for (std::size_t i = 0; i < f.numel(); ++i) {
    CHECK(std::abs(c.data()[i] - 0.25 * f.data()[i]) < 1e-6);
    CHECK(std::abs(r.data()[i] - 1.25 * f.data()[i]) < 1e-6);
  }
}

TEST_CASE("zero input gives zero output") {
  Rng rng(2);
  auto f = Tensor<double>::zeros({1, 8, 4, 4});
  auto p = random_params(rng, 8);
  const auto c = cbam_apply(f, p);
  const auto r = rescbam_apply(f, p);
  for (double v : c.data()) CHECK(v == 0.0);
  for (double v : r.data()) CHECK(v == 0.0);
}

TEST_CASE("constant planes: GAP equals GMP so the gate is sigma(2 MLP(GAP))") {
  Rng rng(3);
  auto f = Tensor<double>::zeros({1, 8, 3, 3});
  auto fs = f.mutable_data();
  std::vector<double> level(8);
  for (auto& l : level) l = rng.uniform(-1, 1);
  for (std::size_t i = 0; i < fs.size(); ++i) fs[i] = level[i / 9];
  auto p = random_params(rng, 8);
  const auto gate = channel_attention(f, p.channel);
  const std::size_t Hd = p.channel.mlp_w1.dim(0);
  for (std::size_t c = 0; c < 8; ++c) {
    double out = 0;
    for (std::size_t j = 0; j < Hd; ++j) {
      double h = 0;
      for (std::size_t k = 0; k < 8; ++k) h += p.channel.mlp_w1.data()[j * 8 + k] * level[k];
      out += p.channel.mlp_w2.data()[c * Hd + j] * std::max(0.0, h);
    }
    CHECK(gate.data()[c] == doctest::Approx(sigma(2 * out)).epsilon(1e-12));
  }
}

TEST_CASE("channel and spatial gates match the step-by-step oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 4 * (1 + rng.index(4));
    auto f = random_features(rng, {1 + rng.index(2), C, 2 + rng.index(7), 2 + rng.index(7)});
    auto p = random_params(rng, C);
    const auto mc = channel_attention(f, p.channel);
    const auto ref_c = channel_gate_ref(f, p.channel);
    for (std::size_t i = 0; i < ref_c.size(); ++i) {
      CHECK(mc.data()[i] == doctest::Approx(ref_c[i]).epsilon(1e-12));
      CHECK(mc.data()[i] > 0.0);
      CHECK(mc.data()[i] < 1.0);
    }
    const auto ms = spatial_attention(f, p.spatial);
    const auto ref_s = spatial_gate_ref(f, p.spatial);
    CHECK(ms.shape() == Shape{f.dim(0), 1, f.dim(2), f.dim(3)});
    for (std::size_t i = 0; i < ref_s.size(); ++i) CHECK(ms.data()[i] == doctest::Approx(ref_s[i]).epsilon(1e-12));
  }
}

TEST_CASE("single channel: both channel-pooled maps equal the input") {
  Rng rng(5);
  auto f = random_features(rng, {1, 1, 5, 5});
  for (auto kind : {PoolKind::avg, PoolKind::max}) {
    const auto m = pool_channel(f, kind);
    for (std::size_t i = 0; i < f.numel(); ++i) CHECK(m.data()[i] == f.data()[i]);
  }
}

TEST_CASE("cbam never amplifies; shapes are preserved; residual is exact") {
  Rng rng(6);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t C = 8;
    auto f = random_features(rng, {2, C, 4, 5});
    auto p = random_params(rng, C);
    const auto c = cbam_apply(f, p);
    const auto r = rescbam_apply(f, p);
    CHECK(c.shape() == f.shape());
    CHECK(r.shape() == f.shape());
    bool bounded = true, residual = true, difference = true;
    for (std::size_t i = 0; i < f.numel(); ++i) {
      bounded = bounded && std::abs(c.data()[i]) <= std::abs(f.data()[i]);
      residual = residual && r.data()[i] == f.data()[i] + c.data()[i];
      // r - c carries one more rounding than r = f + c
      difference = difference && std::abs((r.data()[i] - c.data()[i]) - f.data()[i]) <=
                                     std::numeric_limits<double>::epsilon() * std::abs(r.data()[i]);
    }
    CHECK(bounded);
    CHECK(residual);
    CHECK(difference);
  }
}

TEST_CASE("channel gate is invariant to spatial permutations") {
  Rng rng(7);
  auto f = random_features(rng, {1, 8, 4, 4});
  auto p = random_params(rng, 8);
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  auto g = f.clone();
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < 16; ++i) g.mutable_data()[c * 16 + i] = f.data()[c * 16 + perm[i]];
  const auto a = channel_attention(f, p.channel), b = channel_attention(g, p.channel);
  for (std::size_t i = 0; i < 8; ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-14));
}

TEST_CASE("reduction ratio is clamped and must divide the channels") {
  CHECK(effective_reduction(8) == 8);
  CHECK(effective_reduction(64) == 16);
  CHECK_THROWS_AS(effective_reduction(24), Error);
  CHECK(CbamParams<float>::create(8).channel.mlp_w1.shape() == Shape{1, 8});
  CHECK(parse_attention_kind("cbam") == AttentionKind::cbam);
  CHECK_THROWS_AS(parse_attention_kind("gam"), Error);
}

TEST_CASE("module-level gradient checks pass") {
  const auto reports = run_gradcheck(gradcheck_suite("module"), 9);
  CHECK(reports.size() >= 4);
  for (const auto& r : reports) {
    INFO(r.name << " max rel " << r.max_rel_error << " " << r.worst);
    CHECK(r.passed());
    CHECK(r.max_rel_error < 1e-4);
  }
}

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

#include "rescbam/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace rescbam {

namespace {

thread_local OpCounter* g_counter = nullptr;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    fail(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " + shape_str(s));
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Strides of an axis split: outer * extent * inner == numel.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) fail("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

namespace detail {

void count_flops(std::uint64_t flops) {
  if (g_counter) {
    g_counter->flops += flops;
    g_counter->ops += 1;
  }
}

template <typename T>
Tape* recording_tape(std::initializer_list<const Tensor<T>*> operands) {
  Tape* tape = Tape::active();
  if (!tape) return nullptr;
  for (const Tensor<T>* t : operands) {
    if (t && t->requires_grad()) return tape;
  }
  return nullptr;
}

}  // namespace detail

OpCountScope::OpCountScope(OpCounter& counter) : previous_(g_counter) { g_counter = &counter; }
OpCountScope::~OpCountScope() { g_counter = previous_; }

template <typename T>
BatchNormState<T> BatchNormState<T>::create(std::size_t channels, double momentum, double eps) {
  BatchNormState s;
  s.running_mean = Tensor<T>::zeros({channels});
  s.running_var = Tensor<T>::full({channels}, T(1));
  s.momentum = momentum;
  s.eps = eps;
  return s;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

// Unfolds one image into col[q][p], q = (c, kh, kw), p = (oh, ow); padded
// taps are zero.
template <typename T>
void im2col(const T* x, long C, long H, long W, long KH, long KW, long S, long P, long OH, long OW, T* col) {
  for (long c = 0; c < C; ++c) {
    for (long i = 0; i < KH; ++i) {
      for (long j = 0; j < KW; ++j) {
        T* dst = col + ((c * KH + i) * KW + j) * OH * OW;
        for (long oh = 0; oh < OH; ++oh) {
          const long ih = oh * S - P + i;
          T* drow = dst + oh * OW;
          if (ih < 0 || ih >= H) {
            std::fill(drow, drow + OW, T(0));
            continue;
          }
          const T* xrow = x + (c * H + ih) * W;
          for (long ow = 0; ow < OW; ++ow) {
            const long iw = ow * S - P + j;
            drow[ow] = (iw >= 0 && iw < W) ? xrow[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, long C, long H, long W, long KH, long KW, long S, long P, long OH, long OW, T* gx) {
  for (long c = 0; c < C; ++c) {
    for (long i = 0; i < KH; ++i) {
      for (long j = 0; j < KW; ++j) {
        const T* src = col + ((c * KH + i) * KW + j) * OH * OW;
        for (long oh = 0; oh < OH; ++oh) {
          const long ih = oh * S - P + i;
          if (ih < 0 || ih >= H) continue;
          T* grow = gx + (c * H + ih) * W;
          const T* srow = src + oh * OW;
          for (long ow = 0; ow < OW; ++ow) {
            const long iw = ow * S - P + j;
            if (iw >= 0 && iw < W) grow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

constexpr long kRowBlock = 4;
constexpr long kColChunk = 64;

// out[r][p] = sum_q a(r, q) * b[q][p] for r in [0, R), q ascending. `a` is
// addressed as a[r * a_r + q * a_q] so the same kernel serves W and W^T.
template <typename T>
void gemm_rows(const T* a, long a_r, long a_q, const T* b, long R, long Q, long Pn, T* out) {
  for (long r0 = 0; r0 < R; r0 += kRowBlock) {
    const long rb = std::min(kRowBlock, R - r0);
    for (long p0 = 0; p0 < Pn; p0 += kColChunk) {
      const long pc = std::min(kColChunk, Pn - p0);
      T acc[kRowBlock][kColChunk] = {};
      for (long q = 0; q < Q; ++q) {
        const T* brow = b + q * Pn + p0;
        if (rb == kRowBlock) {
          const T w0 = a[(r0 + 0) * a_r + q * a_q], w1 = a[(r0 + 1) * a_r + q * a_q];
          const T w2 = a[(r0 + 2) * a_r + q * a_q], w3 = a[(r0 + 3) * a_r + q * a_q];
          for (long p = 0; p < pc; ++p) {
            const T v = brow[p];
            acc[0][p] += w0 * v;
            acc[1][p] += w1 * v;
            acc[2][p] += w2 * v;
            acc[3][p] += w3 * v;
          }
        } else {
          for (long r = 0; r < rb; ++r) {
            const T wv = a[(r0 + r) * a_r + q * a_q];
            for (long p = 0; p < pc; ++p) acc[r][p] += wv * brow[p];
          }
        }
      }
      for (long r = 0; r < rb; ++r) std::copy(acc[r], acc[r] + pc, out + (r0 + r) * Pn + p0);
    }
  }
}

// gw[k][q] += sum_p go[k][p] * col[q][p], p ascending within eight fixed lanes.
template <typename T>
void accumulate_weight_grad(const T* go, const T* col, long K, long Q, long Pn, T* gw) {
  constexpr long L = 8;
  for (long k = 0; k < K; ++k) {
    const T* g = go + k * Pn;
    for (long q = 0; q < Q; ++q) {
      const T* c = col + q * Pn;
      T lanes[L] = {};
      long p = 0;
      for (; p + L <= Pn; p += L) {
        for (long l = 0; l < L; ++l) lanes[l] += g[p + l] * c[p + l];
      }
      for (long l = 0; p < Pn; ++p, ++l) lanes[l] += g[p] * c[p];
      T total = T(0);
      for (long l = 0; l < L; ++l) total += lanes[l];
      gw[k * Q + q] += total;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
  require_rank(input.shape(), 4, "conv2d");
  require_rank(weight.shape(), 4, "conv2d weight");
  if (stride < 1) fail("conv2d: stride must be >= 1");
  if (padding < 0) fail("conv2d: padding must be >= 0");
  const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const long K = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  if (static_cast<long>(weight.dim(1)) != C) {
    fail("conv2d: input has " + std::to_string(C) + " channels but weight " + shape_str(weight.shape()) + " expects " +
         std::to_string(weight.dim(1)));
  }
  if (KH > H + 2 * padding || KW > W + 2 * padding) {
    fail("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " + shape_str(input.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || static_cast<long>(bias.dim(0)) != K)) {
    fail("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(K) + " filters");
  }
  const long S = stride, P = padding;
  const long OH = (H + 2 * P - KH) / S + 1, OW = (W + 2 * P - KW) / S + 1;
  const long Q = C * KH * KW, Pn = OH * OW;
  const bool direct = KH == 1 && KW == 1 && S == 1 && P == 0;

  Tensor<T> out = Tensor<T>::zeros({std::size_t(N), std::size_t(K), std::size_t(OH), std::size_t(OW)});
  const T* x = input.data().data();
  const T* w = weight.data().data();
  T* o = out.mutable_data().data();

  // Per output element the accumulation order is (c, kh, kw) ascending, then
  // the bias.
  std::vector<T> col(direct ? 0 : std::size_t(Q * Pn));
  for (long n = 0; n < N; ++n) {
    const T* xn = x + n * C * H * W;
    if (!direct) im2col(xn, C, H, W, KH, KW, S, P, OH, OW, col.data());
    T* on = o + n * K * Pn;
    gemm_rows(w, Q, 1, direct ? xn : col.data(), K, Q, Pn, on);
    if (bias.defined()) {
      const T* b = bias.data().data();
      for (long k = 0; k < K; ++k) {
        for (long p = 0; p < Pn; ++p) on[k * Pn + p] += b[k];
      }
    }
  }
  detail::count_flops(std::uint64_t(2) * N * K * OH * OW * C * KH * KW);

  if (Tape* tape = detail::recording_tape<T>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record([input, weight, bias, out, S, P, direct]() mutable {
      if (!out.has_grad()) return;
      const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
      const long K = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
      const long OH = out.dim(2), OW = out.dim(3);
      const long Q = C * KH * KW, Pn = OH * OW;
      const T* go = out.grad().data();
      const T* x = input.data().data();
      const T* w = weight.data().data();
      T* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      T* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      std::vector<T> col(direct ? 0 : std::size_t(Q * Pn)), gcol(gx ? std::size_t(Q * Pn) : 0);
      for (long n = 0; n < N; ++n) {
        const T* gon = go + n * K * Pn;
        const T* xn = x + n * C * H * W;
        if (gw) {
          if (!direct) im2col(xn, C, H, W, KH, KW, S, P, OH, OW, col.data());
          accumulate_weight_grad(gon, direct ? xn : col.data(), K, Q, Pn, gw);
        }
        if (gx) {
          gemm_rows(w, 1, Q, gon, Q, K, Pn, gcol.data());
          T* gxn = gx + n * C * H * W;
          if (direct) {
            for (long i = 0; i < Q * Pn; ++i) gxn[i] += gcol[std::size_t(i)];
          } else {
            col2im_add(gcol.data(), C, H, W, KH, KW, S, P, OH, OW, gxn);
          }
        }
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (long n = 0; n < N; ++n) {
          for (long k = 0; k < K; ++k) {
            const T* gplane = go + (n * K + k) * OH * OW;
            T acc = T(0);
            for (long p = 0; p < OH * OW; ++p) acc += gplane[p];
            gb[k] += acc;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      NormMode mode) {
  require_rank(input.shape(), 4, "batchnorm2d");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.numel() != C || beta.numel() != C || state.running_mean.numel() != C || state.running_var.numel() != C) {
    fail("batchnorm2d: parameters do not match " + std::to_string(C) + " channels");
  }
  const std::size_t M = N * HW;
  if (mode == NormMode::train && M < 2) {
    fail("batchnorm2d: train mode needs at least 2 values per channel, got shape " + shape_str(input.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.mutable_data().data();
  auto xhat = std::make_shared<std::vector<T>>(input.numel());
  auto invstd = std::make_shared<std::vector<double>>(C);

  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (mode == NormMode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      mu = s / double(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = double(p[i]) - mu;
          ss += d * d;
        }
      }
      var = ss / double(M);
      auto rm = state.running_mean.mutable_data();
      auto rv = state.running_var.mutable_data();
      const double m = state.momentum;
      rm[c] = T((1.0 - m) * rm[c] + m * mu);
      rv[c] = T((1.0 - m) * rv[c] + m * var * double(M) / double(M - 1));
    } else {
      mu = state.running_mean.data()[c];
      var = state.running_var.data()[c];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    (*invstd)[c] = is;
    const double g = gamma.data()[c], b = beta.data()[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const double h = (double(x[off + i]) - mu) * is;
        (*xhat)[off + i] = T(h);
        y[off + i] = T(g * h + b);
      }
    }
  }
  detail::count_flops(std::uint64_t(4) * input.numel());

  if (Tape* tape = detail::recording_tape<T>({&input, &gamma, &beta})) {
    out.set_requires_grad(true);
    const bool train = mode == NormMode::train;
    tape->record([input, gamma, beta, out, xhat, invstd, train]() mutable {
      if (!out.has_grad()) return;
      const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
      const double M = double(N * HW);
      const T* gy = out.grad().data();
      const T* h = xhat->data();
      T* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      T* gg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
      T* gb = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
      for (std::size_t c = 0; c < C; ++c) {
        double sum_gy = 0.0, sum_gyh = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            sum_gy += gy[off + i];
            sum_gyh += double(gy[off + i]) * h[off + i];
          }
        }
        if (gg) gg[c] += T(sum_gyh);
        if (gb) gb[c] += T(sum_gy);
        if (!gx) continue;
        const double g = gamma.data()[c];
        const double is = (*invstd)[c];
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            if (train) {
              gx[off + i] += T(g * is * (double(gy[off + i]) - sum_gy / M - double(h[off + i]) * sum_gyh / M));
            } else {
              gx[off + i] += T(g * is * double(gy[off + i]));
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// element-wise

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    switch (kind) {
      case Activation::sigmoid: y[i] = stable_sigmoid(x[i]); break;
      case Activation::silu: y[i] = x[i] * stable_sigmoid(x[i]); break;
      case Activation::relu: y[i] = x[i] > T(0) ? x[i] : T(0); break;
    }
  }
  detail::count_flops(std::uint64_t(4) * input.numel());
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out, kind]() mutable {
      if (!out.has_grad()) return;
      const auto x = input.data();
      const auto y = out.data();
      const auto gy = out.grad();
      auto gx = input.grad_buffer();
      for (std::size_t i = 0; i < x.size(); ++i) {
        switch (kind) {
          case Activation::sigmoid: gx[i] += gy[i] * y[i] * (T(1) - y[i]); break;
          case Activation::silu: {
            const T s = stable_sigmoid(x[i]);
            gx[i] += gy[i] * (s + x[i] * s * (T(1) - s));
            break;
          }
          case Activation::relu: gx[i] += x[i] > T(0) ? gy[i] : T(0); break;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) fail("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  detail::count_flops(a.numel());
  if (Tape* tape = detail::recording_tape<T>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) fail("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  detail::count_flops(a.numel());
  if (Tape* tape = detail::recording_tape<T>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * a.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = input.data()[i] * factor;
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto g = input.grad_buffer();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& input, const Tensor<T>& gate) {
  require_rank(input.shape(), 4, "scale_channels");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gate.shape() != Shape{N, C, 1, 1}) {
    fail("scale_channels: gate " + shape_str(gate.shape()) + " does not broadcast over " + shape_str(input.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  auto y = out.mutable_data();
  const auto x = input.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T g = gate.data()[nc];
    for (std::size_t i = 0; i < HW; ++i) y[nc * HW + i] = x[nc * HW + i] * g;
  }
  detail::count_flops(input.numel());
  if (Tape* tape = detail::recording_tape<T>({&input, &gate})) {
    out.set_requires_grad(true);
    tape->record([input, gate, out, NC = N * C, HW]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto x = input.data();
      T* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      T* gg = gate.requires_grad() ? gate.grad_buffer().data() : nullptr;
      for (std::size_t nc = 0; nc < NC; ++nc) {
        const T g = gate.data()[nc];
        T acc = T(0);
        for (std::size_t i = 0; i < HW; ++i) {
          if (gx) gx[nc * HW + i] += gy[nc * HW + i] * g;
          acc += gy[nc * HW + i] * x[nc * HW + i];
        }
        if (gg) gg[nc] += acc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale_spatial(const Tensor<T>& input, const Tensor<T>& gate) {
  require_rank(input.shape(), 4, "scale_spatial");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gate.shape() != Shape{N, 1, input.dim(2), input.dim(3)}) {
    fail("scale_spatial: gate " + shape_str(gate.shape()) + " does not broadcast over " + shape_str(input.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  auto y = out.mutable_data();
  const auto x = input.data();
  const auto g = gate.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) y[off + i] = x[off + i] * g[n * HW + i];
    }
  }
  detail::count_flops(input.numel());
  if (Tape* tape = detail::recording_tape<T>({&input, &gate})) {
    out.set_requires_grad(true);
    tape->record([input, gate, out, N, C, HW]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto x = input.data();
      const auto g = gate.data();
      T* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      T* gg = gate.requires_grad() ? gate.grad_buffer().data() : nullptr;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t off = (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            if (gx) gx[off + i] += gy[off + i] * g[n * HW + i];
            if (gg) gg[n * HW + i] += gy[off + i] * x[off + i];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  T acc = T(0);
  for (T v : input.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out]() mutable {
      if (!out.has_grad()) return;
      const T gy = out.grad()[0];
      for (T& g : input.grad_buffer()) g += gy;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& input) {
  return scale(sum(input), T(1) / T(input.numel()));
}

template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size() || terms.empty()) fail("weighted_sum: terms and weights must pair up");
  T acc = T(0);
  bool grad = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].numel() != 1) fail("weighted_sum: terms must be scalars");
    acc += weights[i] * terms[i].item();
    grad = grad || terms[i].requires_grad();
  }
  Tensor<T> out = Tensor<T>::scalar(acc);
  Tape* tape = Tape::active();
  if (tape && grad) {
    out.set_requires_grad(true);
    tape->record([terms, weights, out]() mutable {
      if (!out.has_grad()) return;
      const T gy = out.grad()[0];
      for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].requires_grad()) terms[i].grad_buffer()[0] += gy * weights[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    fail("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::vector<T>(input.data().begin(), input.data().end()));
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out]() mutable {
      if (!out.has_grad()) return;
      auto g = input.grad_buffer();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
Tensor<T> pool_global(const Tensor<T>& input, PoolKind kind) {
  require_rank(input.shape(), 4, "pool_global");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  Tensor<T> out = Tensor<T>::zeros({N, C, 1, 1});
  auto y = out.mutable_data();
  const auto x = input.data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(kind == PoolKind::max ? N * C : 0);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* p = x.data() + nc * HW;
    if (kind == PoolKind::avg) {
      T acc = T(0);
      for (std::size_t i = 0; i < HW; ++i) acc += p[i];
      y[nc] = acc / T(HW);
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < HW; ++i) {
        if (p[i] > p[best]) best = i;
      }
      (*argmax)[nc] = best;
      y[nc] = p[best];
    }
  }
  detail::count_flops(input.numel());
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out, kind, argmax, NC = N * C, HW]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = input.grad_buffer();
      for (std::size_t nc = 0; nc < NC; ++nc) {
        if (kind == PoolKind::avg) {
          const T g = gy[nc] / T(HW);
          for (std::size_t i = 0; i < HW; ++i) gx[nc * HW + i] += g;
        } else {
          gx[nc * HW + (*argmax)[nc]] += gy[nc];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pool_channel(const Tensor<T>& input, PoolKind kind) {
  require_rank(input.shape(), 4, "pool_channel");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3), HW = H * W;
  Tensor<T> out = Tensor<T>::zeros({N, 1, H, W});
  auto y = out.mutable_data();
  const auto x = input.data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(kind == PoolKind::max ? N * HW : 0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < HW; ++i) {
      const T* p = x.data() + n * C * HW + i;
      if (kind == PoolKind::avg) {
        T acc = T(0);
        for (std::size_t c = 0; c < C; ++c) acc += p[c * HW];
        y[n * HW + i] = acc / T(C);
      } else {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
          if (p[c * HW] > p[best * HW]) best = c;
        }
        (*argmax)[n * HW + i] = best;
        y[n * HW + i] = p[best * HW];
      }
    }
  }
  detail::count_flops(input.numel());
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out, kind, argmax, N, C, HW]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = input.grad_buffer();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
          const T g = gy[n * HW + i];
          if (kind == PoolKind::avg) {
            for (std::size_t c = 0; c < C; ++c) gx[(n * C + c) * HW + i] += g / T(C);
          } else {
            gx[(n * C + (*argmax)[n * HW + i]) * HW + i] += g;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kernel, int stride, int padding) {
  require_rank(input.shape(), 4, "maxpool2d");
  if (kernel < 1 || stride < 1 || padding < 0) fail("maxpool2d: kernel and stride must be >= 1, padding >= 0");
  if (2 * padding > kernel) fail("maxpool2d: padding must be at most half the kernel");
  const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const long K = kernel, S = stride, P = padding;
  if (K > H + 2 * P || K > W + 2 * P) fail("maxpool2d: kernel larger than padded input");
  const long OH = (H + 2 * P - K) / S + 1, OW = (W + 2 * P - K) / S + 1;
  Tensor<T> out = Tensor<T>::zeros({std::size_t(N), std::size_t(C), std::size_t(OH), std::size_t(OW)});
  auto y = out.mutable_data();
  const auto x = input.data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  for (long nc = 0; nc < N * C; ++nc) {
    const T* plane = x.data() + nc * H * W;
    for (long oh = 0; oh < OH; ++oh) {
      for (long ow = 0; ow < OW; ++ow) {
        long best = -1;
        for (long i = 0; i < K; ++i) {
          const long ih = oh * S - P + i;
          if (ih < 0 || ih >= H) continue;
          for (long j = 0; j < K; ++j) {
            const long iw = ow * S - P + j;
            if (iw < 0 || iw >= W) continue;
            const long idx = ih * W + iw;
            if (best < 0 || plane[idx] > plane[best]) best = idx;
          }
        }
        const long o = (nc * OH + oh) * OW + ow;
        (*argmax)[o] = std::size_t(best);
        y[o] = plane[best];
      }
    }
  }
  detail::count_flops(std::uint64_t(out.numel()) * K * K);
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out, argmax, NC = N * C, HW = H * W, OHW = OH * OW]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = input.grad_buffer();
      for (long nc = 0; nc < NC; ++nc) {
        for (long o = 0; o < OHW; ++o) gx[nc * HW + (*argmax)[nc * OHW + o]] += gy[nc * OHW + o];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layout

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& inputs, std::size_t axis) {
  if (inputs.empty()) fail("concat: no inputs");
  const Shape& first = inputs.front().shape();
  if (axis >= first.size()) fail("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : inputs) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) fail("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first) + " along axis " +
                  std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  auto y = out.mutable_data();
  std::size_t offset = 0;
  for (const auto& t : inputs) {
    const std::size_t chunk = t.dim(axis) * os.inner;
    const auto x = t.data();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(x.data() + o * chunk, chunk, y.data() + o * os.extent * os.inner + offset);
    }
    offset += chunk;
  }
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  Tape* tape = Tape::active();
  if (tape && any) {
    out.set_requires_grad(true);
    tape->record([inputs, out, axis]() mutable {
      if (!out.has_grad()) return;
      const AxisSplit os = split_at(out.shape(), axis);
      const auto gy = out.grad();
      std::size_t offset = 0;
      for (auto& t : inputs) {
        const std::size_t chunk = t.dim(axis) * os.inner;
        if (t.requires_grad()) {
          auto gx = t.grad_buffer();
          for (std::size_t o = 0; o < os.outer; ++o) {
            const T* src = gy.data() + o * os.extent * os.inner + offset;
            for (std::size_t i = 0; i < chunk; ++i) gx[o * chunk + i] += src[i];
          }
        }
        offset += chunk;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& input, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit is = split_at(input.shape(), axis);
  if (length == 0 || start + length > is.extent) {
    fail("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) + ") outside axis of " +
         std::to_string(is.extent));
  }
  Shape out_shape = input.shape();
  out_shape[axis] = length;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const std::size_t chunk = length * is.inner;
  auto y = out.mutable_data();
  const auto x = input.data();
  for (std::size_t o = 0; o < is.outer; ++o) {
    std::copy_n(x.data() + (o * is.extent + start) * is.inner, chunk, y.data() + o * chunk);
  }
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out, is, start, chunk]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = input.grad_buffer();
      for (std::size_t o = 0; o < is.outer; ++o) {
        T* dst = gx.data() + (o * is.extent + start) * is.inner;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += gy[o * chunk + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input) {
  require_rank(input.shape(), 4, "upsample_nearest2x");
  const std::size_t NC = input.dim(0) * input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor<T> out = Tensor<T>::zeros({input.dim(0), input.dim(1), 2 * H, 2 * W});
  auto y = out.mutable_data();
  const auto x = input.data();
  for (std::size_t nc = 0; nc < NC; ++nc) {
    for (std::size_t oh = 0; oh < 2 * H; ++oh) {
      for (std::size_t ow = 0; ow < 2 * W; ++ow) {
        y[(nc * 2 * H + oh) * 2 * W + ow] = x[(nc * H + oh / 2) * W + ow / 2];
      }
    }
  }
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out, NC, H, W]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = input.grad_buffer();
      for (std::size_t nc = 0; nc < NC; ++nc) {
        for (std::size_t oh = 0; oh < 2 * H; ++oh) {
          for (std::size_t ow = 0; ow < 2 * W; ++ow) {
            gx[(nc * H + oh / 2) * W + ow / 2] += gy[(nc * 2 * H + oh) * 2 * W + ow];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dense

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t D = input.shape().back(), E = weight.dim(0);
  if (weight.dim(1) != D) {
    fail("linear: input trailing extent " + std::to_string(D) + " does not match weight " +
         shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != E)) {
    fail("linear: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(E) + " outputs");
  }
  const std::size_t M = input.numel() / D;
  Shape out_shape = input.shape();
  out_shape.back() = E;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const auto x = input.data();
  const auto w = weight.data();
  auto y = out.mutable_data();
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t e = 0; e < E; ++e) {
      T acc = T(0);
      for (std::size_t d = 0; d < D; ++d) acc += x[m * D + d] * w[e * D + d];
      if (bias.defined()) acc += bias.data()[e];
      y[m * E + e] = acc;
    }
  }
  detail::count_flops(std::uint64_t(2) * M * D * E);
  if (Tape* tape = detail::recording_tape<T>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record([input, weight, bias, out, M, D, E]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto x = input.data();
      const auto w = weight.data();
      T* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      T* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      T* gb = bias.defined() && bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t e = 0; e < E; ++e) {
          const T g = gy[m * E + e];
          if (gb) gb[e] += g;
          for (std::size_t d = 0; d < D; ++d) {
            if (gx) gx[m * D + d] += g * w[e * D + d];
            if (gw) gw[e * D + d] += g * x[m * D + d];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& input, std::size_t axis) {
  const AxisSplit s = split_at(input.shape(), axis);
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = x[base];
      for (std::size_t a = 1; a < s.extent; ++a) mx = std::max(mx, x[base + a * s.inner]);
      T z = T(0);
      for (std::size_t a = 0; a < s.extent; ++a) {
        const T e = std::exp(x[base + a * s.inner] - mx);
        y[base + a * s.inner] = e;
        z += e;
      }
      for (std::size_t a = 0; a < s.extent; ++a) y[base + a * s.inner] /= z;
    }
  }
  detail::count_flops(std::uint64_t(3) * input.numel());
  if (Tape* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([input, out, s]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto y = out.data();
      auto gx = input.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          T dot = T(0);
          for (std::size_t a = 0; a < s.extent; ++a) dot += gy[base + a * s.inner] * y[base + a * s.inner];
          for (std::size_t a = 0; a < s.extent; ++a) {
            const std::size_t i = base + a * s.inner;
            gx[i] += y[i] * (gy[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

#define RESCBAM_INSTANTIATE_OPS(T)                                                                              \
  template struct BatchNormState<T>;                                                                            \
  template Tape* detail::recording_tape<T>(std::initializer_list<const Tensor<T>*>);                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                    \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&,      \
                                 NormMode);                                                                     \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                                  \
  template Tensor<T> pool_global(const Tensor<T>&, PoolKind);                                                   \
  template Tensor<T> pool_channel(const Tensor<T>&, PoolKind);                                                  \
  template Tensor<T> maxpool2d(const Tensor<T>&, int, int, int);                                                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                        \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                            \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> softmax_axis(const Tensor<T>&, std::size_t);                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale_spatial(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                                    \
  template Tensor<T> weighted_sum(const std::vector<Tensor<T>>&, const std::vector<T>&);

RESCBAM_INSTANTIATE_OPS(float)
RESCBAM_INSTANTIATE_OPS(double)

}  // namespace rescbam

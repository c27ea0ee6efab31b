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

// Differentiable forward ops. Feature maps are N,C,H,W row-major.
// Every op records its backward rule on the active tape when an operand
// requires grad. Instantiated for float and double.

#include <cstdint>
#include <vector>

#include "rescbam/tensor.hpp"

namespace rescbam {

enum class PoolKind { avg, max };
enum class Activation { silu, sigmoid, relu };
enum class NormMode { train, eval };

/// Running statistics of a batch-norm layer. The tensors are shared handles,
/// so a copy of this struct updates the same buffers.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.03;
  double eps = 1e-3;

  static BatchNormState create(std::size_t channels, double momentum = 0.03, double eps = 1e-3);
};

/// Cross-correlation; bias may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding);

/// Train mode normalises with batch statistics and updates `state`;
/// eval mode uses the running statistics.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      NormMode mode);

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  return activation(input, Activation::sigmoid);
}
template <typename T>
Tensor<T> silu(const Tensor<T>& input) {
  return activation(input, Activation::silu);
}
template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  return activation(input, Activation::relu);
}

/// [N,C,H,W] -> [N,C,1,1]. Max ties route the gradient to the first index.
template <typename T>
Tensor<T> pool_global(const Tensor<T>& input, PoolKind kind);

/// [N,C,H,W] -> [N,1,H,W], reducing across channels per pixel.
template <typename T>
Tensor<T> pool_channel(const Tensor<T>& input, PoolKind kind);

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kernel, int stride, int padding);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& inputs, std::size_t axis);

/// Contiguous sub-range [start, start+length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& input, std::size_t axis, std::size_t start, std::size_t length);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input);

/// input [..., D], weight [E, D], bias [E] or undefined -> [..., E].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& input, std::size_t axis);

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor);

/// x[N,C,H,W] * gate[N,C,1,1], broadcast over H,W.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& input, const Tensor<T>& gate);

/// x[N,C,H,W] * gate[N,1,H,W], broadcast over C.
template <typename T>
Tensor<T> scale_spatial(const Tensor<T>& input, const Tensor<T>& gate);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

template <typename T>
Tensor<T> mean(const Tensor<T>& input);

/// Element-wise weighted sum of scalars: sum_i weights[i] * terms[i].
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& terms, const std::vector<T>& weights);

/// Floating-point work of the ops executed while a counter is installed.
struct OpCounter {
  std::uint64_t flops = 0;
  std::uint64_t ops = 0;
};

class OpCountScope {
 public:
  explicit OpCountScope(OpCounter& counter);
  ~OpCountScope();
  OpCountScope(const OpCountScope&) = delete;
  OpCountScope& operator=(const OpCountScope&) = delete;

 private:
  OpCounter* previous_;
};

namespace detail {
void count_flops(std::uint64_t flops);
/// Active tape if any operand requires grad, else nullptr.
template <typename T>
Tape* recording_tape(std::initializer_list<const Tensor<T>*> operands);
}  // namespace detail

}  // namespace rescbam

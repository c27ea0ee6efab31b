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

// Convolutional block attention: a channel gate followed by a spatial gate,
// optionally wrapped in an identity residual (ResCBAM).

#include <string>

#include "rescbam/ops.hpp"

namespace rescbam {

enum class AttentionKind { none, cbam, rescbam };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& text);

inline constexpr std::size_t kDefaultReduction = 16;
inline constexpr std::size_t kSpatialKernel = 7;

/// min(reduction, channels); rejects channel counts the ratio does not divide.
std::size_t effective_reduction(std::size_t channels, std::size_t reduction = kDefaultReduction);

/// Shared two-layer MLP applied to both pooled descriptors.
template <typename T>
struct ChannelAttentionParams {
  Tensor<T> mlp_w1;  // [C/r, C]
  Tensor<T> mlp_w2;  // [C, C/r]
  Tensor<T> mlp_b1;  // [C/r], undefined unless biases are enabled
  Tensor<T> mlp_b2;  // [C]
  std::size_t reduction = kDefaultReduction;

  std::size_t channels() const { return mlp_w1.dim(1); }

  /// Zero-initialised parameters.
  static ChannelAttentionParams create(std::size_t channels, std::size_t reduction = kDefaultReduction,
                                       bool with_bias = false);
};

template <typename T>
struct SpatialAttentionParams {
  Tensor<T> conv_weight;  // [1, 2, 7, 7]
  Tensor<T> conv_bias;    // [1]

  static SpatialAttentionParams create();
};

template <typename T>
struct CbamParams {
  ChannelAttentionParams<T> channel;
  SpatialAttentionParams<T> spatial;

  static CbamParams create(std::size_t channels, std::size_t reduction = kDefaultReduction, bool mlp_bias = false);
};

/// sigma(MLP(GAP(F)) + MLP(GMP(F))), [N,C,H,W] -> [N,C,1,1].
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& features, const ChannelAttentionParams<T>& params);

/// sigma(conv7x7([mean_c(F); max_c(F)])), [N,C,H,W] -> [N,1,H,W].
template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& features, const SpatialAttentionParams<T>& params);

/// Channel-refined then spatially-refined features.
template <typename T>
Tensor<T> cbam_apply(const Tensor<T>& features, const CbamParams<T>& params);

/// features + cbam_apply(features).
template <typename T>
Tensor<T> rescbam_apply(const Tensor<T>& features, const CbamParams<T>& params);

template <typename T>
Tensor<T> attention_apply(AttentionKind kind, const Tensor<T>& features, const CbamParams<T>& params);

}  // namespace rescbam

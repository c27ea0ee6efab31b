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

#include "rescbam/attention.hpp"

#include <algorithm>

namespace rescbam {

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::none: return "none";
    case AttentionKind::cbam: return "cbam";
    case AttentionKind::rescbam: return "rescbam";
  }
  return "none";
}

AttentionKind parse_attention_kind(const std::string& text) {
  if (text == "none") return AttentionKind::none;
  if (text == "cbam") return AttentionKind::cbam;
  if (text == "rescbam") return AttentionKind::rescbam;
  fail("unknown attention variant '" + text + "' (expected none, cbam or rescbam)");
}

std::size_t effective_reduction(std::size_t channels, std::size_t reduction) {
  if (channels == 0 || reduction == 0) fail("attention: channels and reduction ratio must be positive");
  const std::size_t r = std::min(reduction, channels);
  if (channels % r != 0) {
    fail("attention: reduction ratio " + std::to_string(r) + " does not divide " + std::to_string(channels) +
         " channels");
  }
  return r;
}

template <typename T>
ChannelAttentionParams<T> ChannelAttentionParams<T>::create(std::size_t channels, std::size_t reduction,
                                                            bool with_bias) {
  ChannelAttentionParams p;
  p.reduction = effective_reduction(channels, reduction);
  const std::size_t hidden = channels / p.reduction;
  p.mlp_w1 = Tensor<T>::zeros({hidden, channels});
  p.mlp_w2 = Tensor<T>::zeros({channels, hidden});
  if (with_bias) {
    p.mlp_b1 = Tensor<T>::zeros({hidden});
    p.mlp_b2 = Tensor<T>::zeros({channels});
  }
  return p;
}

template <typename T>
SpatialAttentionParams<T> SpatialAttentionParams<T>::create() {
  SpatialAttentionParams p;
  p.conv_weight = Tensor<T>::zeros({1, 2, kSpatialKernel, kSpatialKernel});
  p.conv_bias = Tensor<T>::zeros({1});
  return p;
}

template <typename T>
CbamParams<T> CbamParams<T>::create(std::size_t channels, std::size_t reduction, bool mlp_bias) {
  return CbamParams{ChannelAttentionParams<T>::create(channels, reduction, mlp_bias),
                    SpatialAttentionParams<T>::create()};
}

namespace {

template <typename T>
Tensor<T> shared_mlp(const Tensor<T>& descriptor, const ChannelAttentionParams<T>& p) {
  return linear(relu(linear(descriptor, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
}

}  // namespace

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& features, const ChannelAttentionParams<T>& params) {
  if (features.rank() != 4) fail("channel_attention: expected [N,C,H,W], got " + shape_str(features.shape()));
  const std::size_t N = features.dim(0), C = features.dim(1);
  if (params.channels() != C) {
    fail("channel_attention: parameters built for " + std::to_string(params.channels()) + " channels, input has " +
         std::to_string(C));
  }
  const auto avg = reshape(pool_global(features, PoolKind::avg), {N, C});
  const auto max = reshape(pool_global(features, PoolKind::max), {N, C});
  const auto logits = add(shared_mlp(avg, params), shared_mlp(max, params));
  return reshape(sigmoid(logits), {N, C, 1, 1});
}

template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& features, const SpatialAttentionParams<T>& params) {
  if (features.rank() != 4) fail("spatial_attention: expected [N,C,H,W], got " + shape_str(features.shape()));
  const auto pooled = concat<T>({pool_channel(features, PoolKind::avg), pool_channel(features, PoolKind::max)}, 1);
  const int pad = int(kSpatialKernel / 2);
  return sigmoid(conv2d(pooled, params.conv_weight, params.conv_bias, 1, pad));
}

template <typename T>
Tensor<T> cbam_apply(const Tensor<T>& features, const CbamParams<T>& params) {
  const auto refined_channels = scale_channels(features, channel_attention(features, params.channel));
  return scale_spatial(refined_channels, spatial_attention(refined_channels, params.spatial));
}

template <typename T>
Tensor<T> rescbam_apply(const Tensor<T>& features, const CbamParams<T>& params) {
  return add(features, cbam_apply(features, params));
}

template <typename T>
Tensor<T> attention_apply(AttentionKind kind, const Tensor<T>& features, const CbamParams<T>& params) {
  switch (kind) {
    case AttentionKind::cbam: return cbam_apply(features, params);
    case AttentionKind::rescbam: return rescbam_apply(features, params);
    case AttentionKind::none: break;
  }
  return features;
}

#define RESCBAM_INSTANTIATE_ATTENTION(T)                                                                    \
  template struct ChannelAttentionParams<T>;                                                                \
  template struct SpatialAttentionParams<T>;                                                                \
  template struct CbamParams<T>;                                                                            \
  template Tensor<T> channel_attention(const Tensor<T>&, const ChannelAttentionParams<T>&);                 \
  template Tensor<T> spatial_attention(const Tensor<T>&, const SpatialAttentionParams<T>&);                 \
  template Tensor<T> cbam_apply(const Tensor<T>&, const CbamParams<T>&);                                    \
  template Tensor<T> rescbam_apply(const Tensor<T>&, const CbamParams<T>&);                                 \
  template Tensor<T> attention_apply(AttentionKind, const Tensor<T>&, const CbamParams<T>&);

RESCBAM_INSTANTIATE_ATTENTION(float)
RESCBAM_INSTANTIATE_ATTENTION(double)

}  // namespace rescbam

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

// Weights container:
//   "RCBM" | u32 version | u32 entry count |
//   per entry: u32 name length | name bytes | u32 rank | u32 extents[rank] | f32 values
// All integers and floats little-endian. The first entry, "meta.spec", holds
// the model spec as key=value text, one byte per value.

#include <filesystem>
#include <string>

#include "rescbam/model.hpp"

namespace rescbam {

inline constexpr std::uint32_t kWeightsVersion = 1;

std::string render_spec(const ModelSpec& spec);
ModelSpec parse_spec(const std::string& text);

std::string encode_weights(const Model<float>& model);
Model<float> decode_weights(const std::string& bytes);

void save_weights(const std::filesystem::path& path, const Model<float>& model);
Model<float> load_weights(const std::filesystem::path& path);

}  // namespace rescbam

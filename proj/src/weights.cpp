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

#include "rescbam/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "rescbam/error.hpp"

namespace rescbam {

namespace {

constexpr char kMagic[4] = {'R', 'C', 'B', 'M'};
constexpr const char* kSpecEntry = "meta.spec";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (bytes.size() - pos < n) {
      fail_data(fmt::format("weights file truncated reading {} at byte offset {}", what, pos));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
};

void put_entry(std::string& out, const std::string& name, const Shape& shape, std::span<const float> values) {
  put_u32(out, std::uint32_t(name.size()));
  out += name;
  put_u32(out, std::uint32_t(shape.size()));
  for (auto d : shape) put_u32(out, std::uint32_t(d));
  for (float v : values) put_f32(out, v);
}

}  // namespace

std::string render_spec(const ModelSpec& s) {
  return fmt::format(
      "num_classes={}\nattention={}\nwidth_mult={}\ndepth_mult={}\nreg_max={}\ninput_size={}\n"
      "bn_momentum={}\nattention_mlp_bias={}\n",
      s.num_classes, to_string(s.attention), s.width_mult, s.depth_mult, s.reg_max, s.input_size, s.bn_momentum,
      s.attention_mlp_bias ? 1 : 0);
}

ModelSpec parse_spec(const std::string& text) {
  ModelSpec s;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail_data("model spec: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "num_classes") s.num_classes = std::stoul(value);
      else if (key == "attention") s.attention = parse_attention_kind(value);
      else if (key == "width_mult") s.width_mult = std::stod(value);
      else if (key == "depth_mult") s.depth_mult = std::stod(value);
      else if (key == "reg_max") s.reg_max = std::stoul(value);
      else if (key == "input_size") s.input_size = std::stoul(value);
      else if (key == "bn_momentum") s.bn_momentum = std::stod(value);
      else if (key == "attention_mlp_bias") s.attention_mlp_bias = value == "1";
      else fail_data("model spec: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      fail_data("model spec: bad value for '" + key + "'");
    }
  }
  s.validate();
  return s;
}

std::string encode_weights(const Model<float>& model) {
  std::string out(kMagic, 4);
  put_u32(out, kWeightsVersion);
  const auto& entries = model.params().entries();
  put_u32(out, std::uint32_t(entries.size() + 1));
  const std::string spec = render_spec(model.spec());
  std::vector<float> spec_bytes(spec.begin(), spec.end());
  put_entry(out, kSpecEntry, {spec_bytes.size()}, spec_bytes);
  for (const auto& e : entries) put_entry(out, e.name, e.tensor.shape(), e.tensor.data());
  return out;
}

Model<float> decode_weights(const std::string& bytes) {
  Reader r{bytes};
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail_data("not a weights file (bad magic)");
  r.pos = 4;
  const auto version = r.u32("version");
  if (version != kWeightsVersion) fail_data(fmt::format("unsupported weights version {}", version));
  const auto count = r.u32("entry count");

  std::map<std::string, std::pair<Shape, std::vector<float>>> entries;
  std::vector<std::string> order;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u32("name length");
    r.need(len, "name");
    std::string name = bytes.substr(r.pos, len);
    r.pos += len;
    const auto rank = r.u32("rank");
    if (rank == 0 || rank > 8) fail_data(fmt::format("entry '{}' has unsupported rank {}", name, rank));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(r.u32("extent"));
      if (shape.back() == 0) fail_data(fmt::format("entry '{}' has a zero extent", name));
      numel *= shape.back();
    }
    r.need(numel * 4, "values");
    std::vector<float> values(numel);
    for (auto& v : values) v = r.f32("values");
    if (!entries.emplace(name, std::make_pair(shape, std::move(values))).second) {
      fail_data(fmt::format("duplicate entry '{}'", name));
    }
    order.push_back(name);
  }
  if (r.pos != bytes.size()) fail_data(fmt::format("trailing bytes after entry {} at offset {}", count, r.pos));
  if (order.empty() || order.front() != kSpecEntry) fail_data("weights file lacks the model spec entry");

  const auto& spec_values = entries[kSpecEntry].second;
  const ModelSpec spec = parse_spec(std::string(spec_values.begin(), spec_values.end()));
  Model<float> model = Model<float>::build(spec, 0);
  if (model.params().entries().size() + 1 != count) {
    fail_data(fmt::format("weights hold {} tensors, model spec needs {}", count - 1, model.params().entries().size()));
  }
  for (auto& e : model.params().entries()) {
    auto it = entries.find(e.name);
    if (it == entries.end()) fail_data(fmt::format("weights lack tensor '{}'", e.name));
    if (it->second.first != e.tensor.shape()) {
      fail_data(fmt::format("tensor '{}' has shape {}, model expects {}", e.name, shape_str(it->second.first),
                            shape_str(e.tensor.shape())));
    }
    std::copy(it->second.second.begin(), it->second.second.end(), e.tensor.mutable_data().begin());
  }
  return model;
}

void save_weights(const std::filesystem::path& path, const Model<float>& model) {
  const std::string bytes = encode_weights(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_data(fmt::format("cannot write '{}'", path.string()));
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) fail_data(fmt::format("write to '{}' failed", path.string()));
}

Model<float> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_weights(ss.str());
  } catch (const Error& e) {
    fail_data(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace rescbam

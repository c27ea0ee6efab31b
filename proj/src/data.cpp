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

#include "rescbam/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "rescbam/error.hpp"

namespace rescbam {

namespace fs = std::filesystem;

DetBox LabelBox::to_pixels(double width, double height) const {
  return DetBox{cx * width, cy * height, w * width, h * height, class_id, 1.0};
}

std::vector<DetBox> Sample::pixel_boxes() const {
  const double W = double(image.dim(2)), H = double(image.dim(1));
  std::vector<DetBox> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(b.to_pixels(W, H));
  return out;
}

std::vector<std::string> default_class_names(std::size_t num_classes) {
  static const char* known[] = {"fracture", "text", "metal", "bone_anomaly", "soft_tissue"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < num_classes; ++i) names.push_back(i < 5 ? known[i] : fmt::format("class{}", i));
  return names;
}

// ---------------------------------------------------------------------------
// labels

LabelParseResult parse_label_file(const std::string& text, std::size_t num_classes) {
  LabelParseResult out;
  std::istringstream lines(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(lines, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    long long cls = 0;
    double v[4];
    std::string extra;
    if (!(fields >> cls >> v[0] >> v[1] >> v[2] >> v[3]) || (fields >> extra)) {
      fail_data(fmt::format("label line {}: expected 'class cx cy w h', got '{}'", number, line));
    }
    if (cls < 0 || std::size_t(cls) >= num_classes) {
      fail_data(fmt::format("label line {}: class id {} outside [0, {})", number, cls, num_classes));
    }
    for (double x : v) {
      if (!std::isfinite(x)) fail_data(fmt::format("label line {}: non-finite coordinate", number));
    }
    if (v[2] <= 0 || v[3] <= 0) fail_data(fmt::format("label line {}: width and height must be positive", number));
    double x1 = v[0] - v[2] / 2, x2 = v[0] + v[2] / 2, y1 = v[1] - v[3] / 2, y2 = v[1] + v[3] / 2;
    if (x1 >= 0 && y1 >= 0 && x2 <= 1 && y2 <= 1) {
      out.boxes.push_back({int(cls), v[0], v[1], v[2], v[3]});
      continue;
    }
    ++out.clipped;
    x1 = std::clamp(x1, 0.0, 1.0);
    x2 = std::clamp(x2, 0.0, 1.0);
    y1 = std::clamp(y1, 0.0, 1.0);
    y2 = std::clamp(y2, 0.0, 1.0);
    if (x2 <= x1 || y2 <= y1) continue;
    out.boxes.push_back({int(cls), (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1});
  }
  return out;
}

std::string render_label_file(const std::vector<LabelBox>& boxes) {
  std::string out;
  for (const auto& b : boxes) out += fmt::format("{} {} {} {} {}\n", b.class_id, b.cx, b.cy, b.w, b.h);
  return out;
}

// ---------------------------------------------------------------------------
// splits

std::array<std::size_t, 3> split_counts(std::size_t n, const SplitRatios& r) {
  const double parts[3] = {r.train, r.val, r.test};
  for (double p : parts) {
    if (!(p >= 0.0)) fail("split ratios must be non-negative");
  }
  if (std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    fail(fmt::format("split ratios sum to {:.12g}, expected 1", r.train + r.val + r.test));
  }
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = parts[i] * double(n);
    counts[i] = std::size_t(std::floor(exact));
    frac[i] = exact - double(counts[i]);
    used += counts[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++counts[order[k % 3]];
  return counts;
}

SplitManifest split_dataset(std::vector<std::string> ids, std::uint64_t seed, const SplitRatios& ratios) {
  if (ids.empty()) fail("split_dataset: no ids");
  const auto counts = split_counts(ids.size(), ratios);
  Rng rng(seed);
  rng.shuffle(ids.begin(), ids.end());
  SplitManifest m;
  m.seed = seed;
  m.ratios = ratios;
  auto it = ids.begin();
  m.train.assign(it, it + counts[0]);
  it += counts[0];
  m.val.assign(it, it + counts[1]);
  it += counts[1];
  m.test.assign(it, ids.end());
  return m;
}

std::string render_manifest(const SplitManifest& m) {
  std::string out = fmt::format("seed {}\nratios {} {} {}\n", m.seed, m.ratios.train, m.ratios.val,
                                m.ratios.test);
  auto section = [&out](const char* name, const std::vector<std::string>& ids) {
    out += fmt::format("[{}]\n", name);
    for (const auto& id : ids) out += id + "\n";
  };
  section("train", m.train);
  section("val", m.val);
  section("test", m.test);
  return out;
}

SplitManifest parse_manifest(const std::string& text) {
  SplitManifest m;
  std::vector<std::string>* current = nullptr;
  std::istringstream lines(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(lines, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "[train]") {
      current = &m.train;
    } else if (line == "[val]") {
      current = &m.val;
    } else if (line == "[test]") {
      current = &m.test;
    } else if (!current && line.rfind("seed ", 0) == 0) {
      m.seed = std::stoull(line.substr(5));
    } else if (!current && line.rfind("ratios ", 0) == 0) {
      std::istringstream f(line.substr(7));
      if (!(f >> m.ratios.train >> m.ratios.val >> m.ratios.test)) {
        fail_data(fmt::format("manifest line {}: malformed ratios", number));
      }
    } else if (current) {
      current->push_back(line);
    } else {
      fail_data(fmt::format("manifest line {}: id outside a section", number));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// augmentation

Tensor<float> augment_brightness_contrast(const Tensor<float>& image, double alpha, double beta) {
  if (!(alpha > 0)) fail("augment: alpha must be positive");
  auto out = Tensor<float>::zeros(image.shape());
  const auto in = image.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < in.size(); ++i) dst[i] = float(std::clamp(alpha * double(in[i]) + beta, 0.0, 1.0));
  return out;
}

Tensor<float> augment_random(const Tensor<float>& image, const AugmentRanges& ranges, Rng& rng) {
  const double alpha = rng.uniform(ranges.alpha_min, ranges.alpha_max);
  const double beta = rng.uniform(ranges.beta_min, ranges.beta_max);
  return augment_brightness_contrast(image, alpha, beta);
}

// ---------------------------------------------------------------------------
// synthetic data

namespace {

constexpr std::size_t kShapeKinds = 4;  // rectangle, ellipse, cross, triangle

bool shape_covers(std::size_t kind, double u, double v) {
  // u, v in [0, 1) across the object's box
  switch (kind) {
    case 0:
      return true;
    case 1: {
      const double du = u - 0.5, dv = v - 0.5;
      return du * du + dv * dv <= 0.25;
    }
    case 2:
      return std::abs(u - 0.5) < 0.18 || std::abs(v - 0.5) < 0.18;
    default:
      return std::abs(u - 0.5) <= v / 2;  // apex at the top edge
  }
}

}  // namespace

std::vector<Sample> generate_synthetic_dataset(std::size_t n, std::size_t num_classes, std::uint64_t seed,
                                               const SyntheticOptions& o) {
  if (n < 1) fail("generate_synthetic_dataset: n must be >= 1");
  if (num_classes < 1) fail("generate_synthetic_dataset: need at least one class");
  if (!o.imbalance.empty() && o.imbalance.size() != num_classes) {
    fail(fmt::format("imbalance has {} weights for {} classes", o.imbalance.size(), num_classes));
  }
  if (o.min_objects < 1 || o.max_objects < o.min_objects) fail("generate_synthetic_dataset: bad object counts");
  if (o.min_extent < 2 || o.max_extent < o.min_extent || o.max_extent > o.image_size) {
    fail("generate_synthetic_dataset: bad object extents");
  }
  std::vector<double> weights = o.imbalance.empty() ? std::vector<double>(num_classes, 1.0) : o.imbalance;
  const std::size_t bands = (num_classes + kShapeKinds - 1) / kShapeKinds;
  const std::size_t S = o.image_size;

  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = fmt::format("syn{:06d}", i);
    std::vector<double> plane(S * S);
    const double background = rng.uniform(0.05, 0.2);
    for (double& p : plane) p = background;

    const std::size_t count = o.min_objects + rng.index(o.max_objects - o.min_objects + 1);
    std::vector<DetBox> placed;
    for (std::size_t k = 0; k < count; ++k) {
      const auto cls = rng.categorical(weights);
      for (int attempt = 0; attempt < 20; ++attempt) {
        const std::size_t w = o.min_extent + rng.index(o.max_extent - o.min_extent + 1);
        const std::size_t h = o.min_extent + rng.index(o.max_extent - o.min_extent + 1);
        const std::size_t x0 = rng.index(S - w + 1), y0 = rng.index(S - h + 1);
        const auto box = DetBox::from_corners(double(x0), double(y0), double(x0 + w), double(y0 + h), int(cls));
        // one-pixel margin between objects
        const bool clash = std::any_of(placed.begin(), placed.end(), [&](const DetBox& p) {
          return box.x1() < p.x2() + 1 && p.x1() < box.x2() + 1 && box.y1() < p.y2() + 1 && p.y1() < box.y2() + 1;
        });
        if (clash) continue;
        const std::size_t band = cls / kShapeKinds;
        const double lo = 0.45 + 0.5 * double(band) / double(bands), hi = 0.45 + 0.5 * double(band + 1) / double(bands);
        const double level = rng.uniform(lo, lo + 0.7 * (hi - lo));
        for (std::size_t y = y0; y < y0 + h; ++y) {
          for (std::size_t x = x0; x < x0 + w; ++x) {
            const double u = (double(x - x0) + 0.5) / double(w), v = (double(y - y0) + 0.5) / double(h);
            if (shape_covers(cls % kShapeKinds, u, v)) plane[y * S + x] = level;
          }
        }
        placed.push_back(box);
        break;
      }
    }
    s.image = Tensor<float>::zeros({3, S, S});
    auto px = s.image.mutable_data();
    for (std::size_t j = 0; j < S * S; ++j) {
      const float v = float(std::clamp(plane[j] + o.noise_sigma * rng.normal(), 0.0, 1.0));
      px[j] = px[S * S + j] = px[2 * S * S + j] = v;
    }
    for (const auto& b : placed) {
      s.boxes.push_back({b.class_id, b.cx / double(S), b.cy / double(S), b.w / double(S), b.h / double(S)});
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// image files

namespace {

struct Cursor {
  const std::string& bytes;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  }
  std::size_t number(const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + std::size_t(bytes[pos] - '0');
      if (v > (1u << 24)) fail_data(fmt::format("image header: {} too large at byte {}", what, start));
      ++pos;
    }
    if (pos == start) fail_data(fmt::format("image header: expected {} at byte {}", what, start));
    return v;
  }
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_data(fmt::format("cannot write '{}'", path.string()));
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) fail_data(fmt::format("write to '{}' failed", path.string()));
}

}  // namespace

Tensor<float> decode_image(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    fail_data("unsupported image format: expected binary PPM (P6) or PGM (P5)");
  }
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  Cursor c{bytes, 2};
  const std::size_t W = c.number("width"), H = c.number("height"), maxval = c.number("maxval");
  if (W == 0 || H == 0) fail_data("image has zero extent");
  if (maxval == 0 || maxval > 255) fail_data(fmt::format("unsupported maxval {}", maxval));
  if (c.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[c.pos]))) {
    fail_data(fmt::format("image header not terminated at byte {}", c.pos));
  }
  const std::size_t start = c.pos + 1, need = W * H * channels;
  if (bytes.size() < start + need) {
    fail_data(fmt::format("truncated image payload: {} bytes expected from byte offset {}, file ends at byte {}", need,
                          start, bytes.size()));
  }
  auto img = Tensor<float>::zeros({3, H, W});
  auto px = img.mutable_data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const std::size_t src = start + (y * W + x) * channels + (channels == 3 ? ch : 0);
        px[(ch * H + y) * W + x] = float(static_cast<unsigned char>(bytes[src])) / float(maxval);
      }
    }
  }
  return img;
}

Tensor<float> load_image(const fs::path& path) {
  try {
    return decode_image(read_file(path));
  } catch (const Error& e) {
    fail_data(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string encode_ppm(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) fail("encode_ppm: expected a [3, H, W] image");
  const std::size_t H = image.dim(1), W = image.dim(2);
  std::string out = fmt::format("P6\n{} {}\n255\n", W, H);
  const auto px = image.data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(double(px[(ch * H + y) * W + x]), 0.0, 1.0);
        out.push_back(char(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

void write_ppm(const fs::path& path, const Tensor<float>& image) { write_file(path, encode_ppm(image)); }

Tensor<float> resize_square(const Tensor<float>& image, std::size_t size) {
  const std::size_t H = image.dim(1), W = image.dim(2);
  if (H == size && W == size) return image;
  auto out = Tensor<float>::zeros({3, size, size});
  const auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t y = 0; y < size; ++y) {
      const std::size_t sy = std::min(H - 1, y * H / size);
      for (std::size_t x = 0; x < size; ++x) {
        dst[(ch * size + y) * size + x] = src[(ch * H + sy) * W + std::min(W - 1, x * W / size)];
      }
    }
  }
  return out;
}

Tensor<float> draw_boxes(const Tensor<float>& image, const std::vector<DetBox>& boxes) {
  Tensor<float> out = image.clone();
  const std::size_t H = image.dim(1), W = image.dim(2);
  auto px = out.mutable_data();
  auto put = [&](long x, long y) {
    if (x < 0 || y < 0 || x >= long(W) || y >= long(H)) return;
    px[(0 * H + std::size_t(y)) * W + std::size_t(x)] = 1.0f;
    px[(1 * H + std::size_t(y)) * W + std::size_t(x)] = 0.0f;
    px[(2 * H + std::size_t(y)) * W + std::size_t(x)] = 0.0f;
  };
  for (const auto& b : boxes) {
    const long x1 = std::lround(b.x1()), y1 = std::lround(b.y1());
    const long x2 = std::lround(b.x2()) - 1, y2 = std::lround(b.y2()) - 1;
    for (long x = x1; x <= x2; ++x) {
      put(x, y1);
      put(x, y2);
    }
    for (long y = y1; y <= y2; ++y) {
      put(x1, y);
      put(x2, y);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset directories

std::vector<Sample> Dataset::subset(const std::string& split) const {
  if (split == "all") return samples;
  if (!manifest) fail_data(fmt::format("dataset has no split manifest; cannot select '{}'", split));
  const std::vector<std::string>* ids = split == "train" ? &manifest->train
                                        : split == "val" ? &manifest->val
                                        : split == "test" ? &manifest->test
                                                          : nullptr;
  if (!ids) fail(fmt::format("unknown split '{}'", split));
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<Sample> out;
  for (const auto& id : *ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) fail_data(fmt::format("split '{}' names unknown sample '{}'", split, id));
    out.push_back(*it->second);
  }
  return out;
}

Dataset load_dataset(const fs::path& dir, std::size_t num_classes, std::size_t image_size) {
  const fs::path images = dir / "images", labels = dir / "labels";
  if (!fs::is_directory(images)) fail_data(fmt::format("'{}' is not a directory", images.string()));
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  Dataset ds;
  for (const auto& f : files) {
    Sample s;
    s.id = f.stem().string();
    s.image = resize_square(load_image(f), image_size);
    const fs::path label = labels / (s.id + ".txt");
    if (fs::exists(label)) {
      try {
        auto parsed = parse_label_file(read_file(label), num_classes);
        s.boxes = std::move(parsed.boxes);
        ds.clipped_labels += parsed.clipped;
      } catch (const Error& e) {
        fail_data(fmt::format("{}: {}", label.string(), e.what()));
      }
    }
    ds.samples.push_back(std::move(s));
  }
  if (fs::exists(dir / "split.txt")) ds.manifest = parse_manifest(read_file(dir / "split.txt"));
  return ds;
}

void write_dataset(const fs::path& dir, const std::vector<Sample>& samples, const std::optional<SplitManifest>& manifest) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  for (const auto& s : samples) {
    write_ppm(dir / "images" / (s.id + ".ppm"), s.image);
    write_file(dir / "labels" / (s.id + ".txt"), render_label_file(s.boxes));
  }
  if (manifest) write_file(dir / "split.txt", render_manifest(*manifest));
}

Tensor<float> stack_images(const std::vector<const Sample*>& samples) {
  if (samples.empty()) fail("stack_images: empty batch");
  const Shape one = samples.front()->image.shape();
  auto out = Tensor<float>::zeros({samples.size(), one[0], one[1], one[2]});
  auto dst = out.mutable_data();
  const std::size_t per = shape_numel(one);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->image.shape() != one) fail_data("stack_images: images differ in size");
    const auto src = samples[i]->image.data();
    std::copy(src.begin(), src.end(), dst.begin() + std::ptrdiff_t(i * per));
  }
  return out;
}

}  // namespace rescbam

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

#include "rescbam/tensor.hpp"

namespace rescbam {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) fail("tensor shape must have at least one extent");
  std::size_t n = 1;
  for (std::size_t extent : shape) {
    if (extent == 0) fail("tensor extents must be >= 1, got " + shape_str(shape));
    n *= extent;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

void Tape::record(std::function<void()> rule) {
  if (consumed_) fail("recording onto a consumed tape; call reset() first");
  rules_.push_back(std::move(rule));
}

void Tape::replay() {
  for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  // Rules hold the intermediates alive; release them now.
  rules_.clear();
  consumed_ = true;
}

void Tape::reset() {
  rules_.clear();
  consumed_ = false;
}

Tape* Tape::active() noexcept { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

template class Tensor<float>;
template class Tensor<double>;

}  // namespace rescbam

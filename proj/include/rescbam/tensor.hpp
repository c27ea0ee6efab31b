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

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rescbam/error.hpp"

namespace rescbam {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major array with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage, which is how
/// parameters are shared between model blocks, the parameter registry and the
/// optimizer. Forward ops always allocate fresh outputs.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node().data.size(); }

  std::span<const T> data() const { return node().data; }
  /// In-place access for initialisers, optimisers and finite differences.
  /// Not recorded on any tape.
  std::span<T> mutable_data() { return node().data; }
  T item() const;

  bool requires_grad() const { return defined() && node_->requires_grad; }
  void set_requires_grad(bool flag) { node().requires_grad = flag; }

  bool has_grad() const { return defined() && !node_->grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  /// Gradient buffer, zero-allocated on first use. Gradients are not part of
  /// the value, so this is available on const handles.
  std::span<T> grad_buffer() const;
  void zero_grad() const;

  /// Deep copy of values; the copy does not require grad.
  Tensor clone() const;

  /// Identity of the underlying storage (aliasing test).
  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode<T>> node) : node_(std::move(node)) {}
  detail::TensorNode<T>& node() const;

  std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Ordered record of the backward rules of executed ops.
///
/// Ops record onto the tape installed by the innermost TapeScope of the
/// current thread, and only when at least one operand requires grad.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> rule);

  /// Seeds d(loss)/d(loss) = 1 and replays every rule in reverse order.
  /// Rejects non-scalar losses, losses that never touched a tape and a second
  /// call before reset().
  template <typename T>
  void backward(const Tensor<T>& loss);

  void reset();
  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return rules_.size(); }

  /// Tape installed on this thread, or nullptr.
  static Tape* active() noexcept;

 private:
  friend class TapeScope;
  void replay();

  std::vector<std::function<void()>> rules_;
  bool consumed_ = false;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for its lifetime (inference, target assignment).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// ---------------------------------------------------------------------------

template <typename T>
detail::TensorNode<T>& Tensor<T>::node() const {
  if (!node_) fail("use of an undefined tensor");
  return *node_;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = std::make_shared<detail::TensorNode<T>>();
  node->shape = std::move(shape);
  node->data.assign(n, value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (values.size() != n) {
    fail("tensor of shape " + shape_str(shape) + " needs " + std::to_string(n) + " values, got " +
         std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return full(Shape{1}, value, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = node().shape;
  if (axis >= s.size()) fail("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  return s[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) fail("item() on tensor of shape " + shape_str(shape()));
  return node().data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  auto& n = node();
  std::fill(n.grad.begin(), n.grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from(shape(), node().data, false);
}

template <typename T>
void Tape::backward(const Tensor<T>& loss) {
  if (consumed_) fail("backward called twice on the same tape without reset()");
  if (!loss.defined() || loss.numel() != 1) {
    fail("backward needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  }
  if (!loss.requires_grad()) fail("backward on a loss that was not produced under an active tape");
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] += T(1);
  replay();
}

}  // namespace rescbam

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "protestlens/error.hpp"

namespace protestlens {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Value + optional gradient storage shared by tensor handles.
template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::optional<std::vector<T>> grad;
  bool requires_grad = false;

  std::size_t numel() const { return values.size(); }

  std::vector<T>& ensure_grad() {
    if (!grad) grad.emplace(values.size(), T(0));
    return *grad;
  }
};

/// Dense N-dimensional tensor handle with shared storage.
///
/// Copying a Tensor copies the handle, not the data; two copies alias the
/// same values and gradient. Tensors not attached to a tape are plain
/// immutable values.
template <typename T>
class Tensor {
public:
  Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    Tensor t;
    std::size_t n = protestlens::numel(shape);
    t.impl_->shape = std::move(shape);
    t.impl_->values.assign(n, value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (protestlens::numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_to_string(shape));
    }
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->values = std::move(values);
    return t;
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  /// Gaussian init, the standard transformer weight initializer.
  static Tensor randn(Shape shape, std::mt19937& rng, T stddev) {
    Tensor t = zeros(std::move(shape));
    std::normal_distribution<T> dist(T(0), stddev);
    for (T& v : t.impl_->values) v = dist(rng);
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->values.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }

  std::span<T> data() { return impl_->values; }
  std::span<const T> data() const { return impl_->values; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() requires a scalar tensor, got shape " +
                       shape_to_string(shape()));
    }
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return impl_->grad.has_value(); }

  std::span<const T> grad() const {
    if (!impl_->grad) {
      throw StateError("gradient not populated; run backward first");
    }
    return *impl_->grad;
  }

  std::span<T> grad_mut() { return impl_->ensure_grad(); }

  void zero_grad() {
    if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), T(0));
  }

  void drop_grad() { impl_->grad.reset(); }

  bool all_finite() const {
    for (T v : impl_->values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Identity comparison: do two handles share storage?
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// One recorded operation: inputs, output, and the gradient rule.
template <typename T>
struct TapeNode {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::shared_ptr<TensorImpl<T>> output;
  std::function<void()> backward;
  const char* op = "";
};

/// Reverse-mode tape. Operations executed while a tape is active are
/// recorded in insertion order; backward() replays the gradient rules in
/// exact reverse insertion order. One tape per forward pass, one backward
/// per tape unless reset.
///
/// Tapes are strictly single-threaded. Independent tapes on separate
/// threads are fine; tensors not attached to any tape are shareable.
template <typename T>
class GradientTape {
public:
  GradientTape() { stack().push_back(this); }
  ~GradientTape() { stack().pop_back(); }

  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  static GradientTape* active() {
    return stack().empty() ? nullptr : stack().back();
  }

  void record(TapeNode<T> node) { nodes_.push_back(std::move(node)); }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor<T>& root) {
    if (backward_done_) {
      throw StateError("backward already ran on this tape; call reset() first");
    }
    if (root.numel() != 1) {
      throw ShapeError("backward root must be scalar, got shape " +
                       shape_to_string(root.shape()));
    }
    backward_done_ = true;
    auto root_impl = root.impl();
    root_impl->ensure_grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      // Pre-populate input grads so "grad present" is an invariant the
      // gradient rules can rely on.
      for (auto& in : it->inputs) {
        if (in->requires_grad) in->ensure_grad();
      }
      if (it->output->grad) it->backward();
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

private:
  static std::vector<GradientTape*>& stack() {
    static thread_local std::vector<GradientTape*> s;
    return s;
  }

  std::vector<TapeNode<T>> nodes_;
  bool backward_done_ = false;
};

namespace detail {

/// Record an op node if a tape is active and any input carries grad.
/// Returns true when recorded (output was marked requires_grad).
template <typename T>
bool record_if_tracked(const char* op,
                       std::initializer_list<Tensor<T>> inputs,
                       Tensor<T>& output, std::function<void()> backward) {
  GradientTape<T>* tape = GradientTape<T>::active();
  if (!tape) return false;
  bool tracked = false;
  for (const Tensor<T>& in : inputs) {
    if (in.requires_grad()) {
      tracked = true;
      break;
    }
  }
  if (!tracked) return false;
  output.set_requires_grad(true);
  TapeNode<T> node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const Tensor<T>& in : inputs) node.inputs.push_back(in.impl());
  node.output = output.impl();
  node.backward = std::move(backward);
  tape->record(std::move(node));
  return true;
}

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

}  // namespace protestlens

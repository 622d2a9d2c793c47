// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Dense row-major tensors with a recorded computation graph and reverse-mode
// gradient propagation. Scalar is float (training) or double (gradient checks).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cpcseg/errors.hpp"

namespace cpcseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename S>
struct Node;

template <typename S>
struct TensorData {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<S>> node;  // null for leaves

  bool is_leaf() const { return node == nullptr; }
};

template <typename S>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorData<S>>> inputs;
  // Reads out.grad and accumulates into the inputs' grad buffers.
  std::function<void(TensorData<S>& out)> backward;
  bool freed = false;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Data = TensorData<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Data> data) : data_(std::move(data)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto d = std::make_shared<Data>();
    d->value.assign(shape_numel(shape), S(0));
    d->shape = std::move(shape);
    Tensor t(std::move(d));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_->value.begin(), t.data_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " elements, got " +
                       std::to_string(values.size()));
    auto d = std::make_shared<Data>();
    d->shape = std::move(shape);
    d->value = std::move(values);
    Tensor t(std::move(d));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  std::size_t dim() const { return data_->shape.size(); }
  std::size_t size(std::size_t axis) const { return data_->shape.at(axis); }
  std::size_t numel() const { return data_->value.size(); }
  std::size_t rows() const { return data_->shape.at(0); }
  std::size_t cols() const { return dim() == 1 ? 1 : data_->shape.at(1); }

  std::span<S> values() { return data_->value; }
  std::span<const S> values() const { return data_->value; }
  std::span<S> grad() { return data_->grad; }
  std::span<const S> grad() const { return data_->grad; }
  bool has_grad() const { return !data_->grad.empty(); }

  S& operator[](std::size_t i) { return data_->value[i]; }
  S operator[](std::size_t i) const { return data_->value[i]; }
  S& at(std::size_t r, std::size_t c) { return data_->value[r * cols() + c]; }
  S at(std::size_t r, std::size_t c) const { return data_->value[r * cols() + c]; }
  std::span<const S> row(std::size_t r) const {
    return std::span<const S>(data_->value).subspan(r * cols(), cols());
  }

  S item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return data_->value[0];
  }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool on) {
    data_->requires_grad = on;
    if (on && data_->grad.size() != data_->value.size())
      data_->grad.assign(data_->value.size(), S(0));
    if (!on && data_->is_leaf()) data_->grad.clear();
  }
  void zero_grad() { std::fill(data_->grad.begin(), data_->grad.end(), S(0)); }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return from(shape(), data_->value); }

  const std::shared_ptr<Data>& data() const { return data_; }

 private:
  std::shared_ptr<Data> data_;
};

namespace detail {

template <typename S>
void require_finite(std::span<const S> v, const char* what) {
  for (S x : v)
    if (!std::isfinite(x))
      throw NumericError(std::string("non-finite value in ") + what);
}

/// Wraps freshly computed values into a tensor, recording a graph node when
/// gradients are enabled and some input requires them.
template <typename S>
Tensor<S> make_result(const char* op, Shape shape, std::vector<S> values,
                      std::vector<std::shared_ptr<TensorData<S>>> inputs,
                      std::function<void(TensorData<S>&)> backward) {
  require_finite<S>(values, op);
  auto out = std::make_shared<TensorData<S>>();
  out->shape = std::move(shape);
  out->value = std::move(values);
  bool needs = grad_enabled() &&
               std::any_of(inputs.begin(), inputs.end(),
                           [](const auto& d) { return d->requires_grad; });
  if (needs) {
    auto node = std::make_shared<Node<S>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out->node = std::move(node);
    out->requires_grad = true;
  }
  return Tensor<S>(std::move(out));
}

template <typename S>
std::span<S> grad_of(TensorData<S>& d) {
  if (d.grad.size() != d.value.size()) d.grad.assign(d.value.size(), S(0));
  return d.grad;
}

}  // namespace detail

/// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed each time. Unless
/// retain_graph is set the graph is released afterwards.
template <typename S>
void backward(const Tensor<S>& loss, bool retain_graph = false) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw Error("backward: loss does not depend on any parameter");
  using DataPtr = TensorData<S>*;

  std::vector<DataPtr> order;
  std::unordered_set<DataPtr> seen;
  std::vector<std::pair<DataPtr, std::size_t>> stack{{loss.data().get(), 0}};
  seen.insert(loss.data().get());
  while (!stack.empty()) {
    auto& [d, next] = stack.back();
    if (d->node && d->node->freed) throw Error("backward: graph already freed");
    if (d->node && next < d->node->inputs.size()) {
      DataPtr child = d->node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(d);
    stack.pop_back();
  }

  for (DataPtr d : order) {
    if (d->is_leaf())
      detail::grad_of(*d);
    else
      d->grad.assign(d->value.size(), S(0));
  }
  loss.data()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    DataPtr d = *it;
    if (!d->is_leaf()) d->node->backward(*d);
  }
  for (DataPtr d : order)
    if (d->is_leaf()) detail::require_finite<S>(d->grad, "gradient");

  if (!retain_graph) {
    for (DataPtr d : order) {
      if (d->is_leaf()) continue;
      d->node->freed = true;
      d->node->backward = nullptr;
      d->node->inputs.clear();
      d->grad.clear();
      d->grad.shrink_to_fit();
    }
  }
}

}  // namespace cpcseg

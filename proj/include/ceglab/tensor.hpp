#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ceglab/errors.hpp"

namespace ceglab {

using shape_t = std::vector<std::size_t>;

inline std::size_t numel_of(const shape_t& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const shape_t& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <class T>
struct tensor_node {
  shape_t shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage, which is what lets the tape
/// refer to the same values the caller holds. Use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(shape_t shape, bool requires_grad = false)
      : node_(std::make_shared<detail::tensor_node<T>>()) {
    validate_shape(shape);
    node_->data.assign(numel_of(shape), T{0});
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(shape_t shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::tensor_node<T>>()) {
    validate_shape(shape);
    if (numel_of(shape) != data.size())
      throw dimension_error("tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(shape_t shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(shape_t shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(shape_t shape, std::initializer_list<T> values,
                     bool requires_grad = false) {
    return Tensor(std::move(shape), std::vector<T>(values), requires_grad);
  }

  explicit operator bool() const noexcept { return node_ != nullptr; }
  bool same_as(const Tensor& other) const noexcept { return node_ == other.node_; }

  const shape_t& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1)
      throw contract_error("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }

  // Allocates a zeroed gradient buffer on first use. Const because Tensor is
  // a handle: the buffer belongs to the shared node.
  std::span<T> ensure_grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T{0});
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }

  void drop_grad() { std::vector<T>().swap(node_->grad); }

  Tensor clone() const {
    Tensor t(shape(), std::vector<T>(node_->data), node_->requires_grad);
    t.node_->grad = node_->grad;
    return t;
  }

  bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

 private:
  static void validate_shape(const shape_t& shape) {
    if (shape.empty()) throw dimension_error("tensor shape must have rank >= 1");
    for (auto d : shape)
      if (d == 0) throw dimension_error("tensor dimensions must be positive: " + shape_str(shape));
  }

  std::shared_ptr<detail::tensor_node<T>> node_;
};

template <class T>
void require_finite(std::span<const T> values, const char* where) {
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i]))
      throw non_finite_error(std::string("non-finite value produced by ") + where +
                             " at flat index " + std::to_string(i));
}

}  // namespace ceglab

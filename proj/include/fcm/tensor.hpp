#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fcm/error.hpp"

namespace fcm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

template <class T>
class Graph;

// Dense row-major tensor handle. Copies share storage (and gradient); use
// clone() for an independent copy. A default-constructed Tensor is empty.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    check_shape_valid(shape);
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    check_shape_valid(shape);
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    check_shape_valid(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  // Negative axes count from the end.
  std::size_t dim(std::ptrdiff_t axis) const {
    auto n = static_cast<std::ptrdiff_t>(ndim());
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n) throw IndexError("axis out of range for shape " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(axis)];
  }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  void clear_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>::from(impl_->shape, std::move(out), impl_->requires_grad);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Graph<T>;

  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const void* tape = nullptr;
    std::size_t node = std::numeric_limits<std::size_t>::max();
  };

  Tensor(Shape shape, std::vector<T> values, bool requires_grad)
      : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  std::shared_ptr<Impl> impl_;
};

// Integer token ids, row-major.
struct IdTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  IdTensor() = default;
  IdTensor(Shape s, std::vector<std::int32_t> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("id tensor shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " ids");
    }
  }

  std::size_t numel() const { return data.size(); }
  std::int32_t& at(std::size_t row, std::size_t col) { return data[row * shape.back() + col]; }
  std::int32_t at(std::size_t row, std::size_t col) const { return data[row * shape.back() + col]; }
  std::span<const std::int32_t> row(std::size_t r) const {
    return std::span<const std::int32_t>(data).subspan(r * shape.back(), shape.back());
  }
};

}  // namespace fcm

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "skyrm/error.hpp"

namespace skyrm {

struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  bool valid() const noexcept { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  std::string str() const;

  friend bool operator==(const Shape4&, const Shape4&) = default;
};

/// Dense (n, c, h, w) array stored contiguously in row-major order.
///
/// A default-constructed tensor is empty; every layer operation rejects empty
/// inputs with ShapeError. Constructed tensors always have all dims >= 1.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape4 shape, T fill = T{0}) : shape_(shape) {
    if (!shape.valid()) throw ShapeError("tensor dims must be >= 1, got " + shape.str());
    data_.assign(shape.numel(), fill);
  }

  BasicTensor(Shape4 shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (!shape.valid()) throw ShapeError("tensor dims must be >= 1, got " + shape.str());
    if (data_.size() != shape.numel())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape.str());
  }

  const Shape4& shape() const noexcept { return shape_; }
  int n() const noexcept { return shape_.n; }
  int c() const noexcept { return shape_.c; }
  int h() const noexcept { return shape_.h; }
  int w() const noexcept { return shape_.w; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T* plane(int n, int c) noexcept { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(int n, int c) const noexcept { return data_.data() + offset(n, c, 0, 0); }
  T* item(int n) noexcept { return plane(n, 0); }
  const T* item(int n) const noexcept { return plane(n, 0); }

  T& operator()(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
  const T& operator()(int n, int c, int h, int w) const noexcept {
    return data_[offset(n, c, h, w)];
  }

  std::size_t offset(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  BasicTensor<U> cast() const {
    if (empty()) return {};
    return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Throws ShapeError when `t` is empty. `what` names the operand.
template <typename T>
void require_nonempty(const BasicTensor<T>& t, const char* what) {
  if (t.empty()) throw ShapeError(std::string(what) + ": empty tensor");
}

/// True when every element is finite.
template <typename T>
bool all_finite(const BasicTensor<T>& t);

/// Sum of elementwise products, accumulated in double.
template <typename T>
double dot(std::span<const T> a, std::span<const T> b);

}  // namespace skyrm

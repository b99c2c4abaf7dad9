#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "safnet/error.hpp"

namespace safnet {

// NCHW extent. Every tensor in the library is four dimensional; scalars are
// 1x1x1x1 and per-channel vectors are 1xCx1x1.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dense row-major NCHW array with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w +
           x;
  }
  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  // Pointer to the (n, c) image plane.
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v);
  void set_zero() { fill(T(0)); }
  // Same element count, new extent.
  Tensor reshaped(Shape shape) const;

  // Elementwise accumulate; shapes must agree.
  Tensor& operator+=(const Tensor& other);

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Throws ShapeError naming `what` when the extents differ.
void require_same_shape(const Shape& a, const Shape& b, const char* what);

// Channel range [begin, begin + count) of every batch item.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count);

// Concatenate along channels; batch and spatial extents must agree.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);

// Batch items [begin, begin + count).
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int begin, int count);

template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts);

}  // namespace safnet

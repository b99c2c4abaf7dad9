#include "safnet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

namespace safnet {

std::string Shape::str() const {
  std::ostringstream os;
  os << '[' << n << 'x' << c << 'x' << h << 'x' << w << ']';
  return os.str();
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() +
                     " vs " + b.str());
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative tensor extent " + shape.str());
  }
  data_.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape.numel()) {
    throw ShapeError("tensor data size does not match " + shape.str());
  }
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape.numel() != data_.size()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  return Tensor(shape, data_);
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
  require_same_shape(shape_, other.shape_, "tensor +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > x.c()) {
    throw ShapeError("channel slice out of range for " + x.shape().str());
  }
  Tensor<T> out({x.n(), count, x.h(), x.w()});
  const std::size_t plane = x.shape().plane();
  for (int n = 0; n < x.n(); ++n) {
    std::copy_n(x.plane(n, begin), plane * count, out.plane(n, 0));
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  int channels = 0;
  for (const auto& p : parts) {
    if (p.n() != s0.n || p.h() != s0.h || p.w() != s0.w) {
      throw ShapeError("concat_channels: " + p.shape().str() + " vs " +
                       s0.str());
    }
    channels += p.c();
  }
  Tensor<T> out({s0.n, channels, s0.h, s0.w});
  const std::size_t plane = s0.plane();
  for (int n = 0; n < s0.n; ++n) {
    int c0 = 0;
    for (const auto& p : parts) {
      std::copy_n(p.plane(n, 0), plane * p.c(), out.plane(n, c0));
      c0 += p.c();
    }
  }
  return out;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > x.n()) {
    throw ShapeError("batch slice out of range for " + x.shape().str());
  }
  Tensor<T> out({count, x.c(), x.h(), x.w()});
  const std::size_t item = static_cast<std::size_t>(x.c()) * x.shape().plane();
  std::copy_n(x.data() + item * begin, item * count, out.data());
  return out;
}

template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.c() != s0.c || p.h() != s0.h || p.w() != s0.w) {
      throw ShapeError("concat_batch: " + p.shape().str() + " vs " + s0.str());
    }
    total += p.n();
  }
  Tensor<T> out({total, s0.c, s0.h, s0.w});
  T* dst = out.data();
  for (const auto& p : parts) dst = std::copy_n(p.data(), p.size(), dst);
  return out;
}

#define SAFNET_INSTANTIATE(T)                                              \
  template class Tensor<T>;                                                \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);           \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);          \
  template Tensor<T> slice_batch(const Tensor<T>&, int, int);              \
  template Tensor<T> concat_batch(std::span<const Tensor<T>>);

SAFNET_INSTANTIATE(float)
SAFNET_INSTANTIATE(double)
#undef SAFNET_INSTANTIATE

}  // namespace safnet

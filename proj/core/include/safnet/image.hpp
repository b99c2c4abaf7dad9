#pragma once

#include "safnet/tensor.hpp"

// Single-image domain types. Each wraps a 1 x C x H x W double tensor; the
// network works on batched tensors and converts at its boundary.
namespace safnet {

// Display-referred frame in [0, 1] with its exposure time (relative units).
struct LdrImage {
  TensorD pixels;  // 1 x 3 x H x W
  double exposure = 1.0;

  int height() const { return pixels.h(); }
  int width() const { return pixels.w(); }
  // Throws InvalidExposure / ShapeError when the invariants are broken.
  void validate() const;
};

// Nonnegative linear radiance.
struct LinearImage {
  TensorD pixels;  // 1 x 3 x H x W

  int height() const { return pixels.h(); }
  int width() const { return pixels.w(); }
};

// Per-pixel displacement in pixels: channel 0 = u (+right), 1 = v (+down).
// warped(p) = source(p + F(p)).
struct FlowField {
  TensorD uv;  // 1 x 2 x H x W

  int height() const { return uv.h(); }
  int width() const { return uv.w(); }
  static FlowField constant(int height, int width, double u, double v);
};

// Per-pixel selection probability in [0, 1].
struct SelectionMask {
  TensorD m;  // 1 x 1 x H x W

  static SelectionMask constant(int height, int width, double value);
};

}  // namespace safnet

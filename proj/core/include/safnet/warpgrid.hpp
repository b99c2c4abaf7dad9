#pragma once

#include "safnet/autograd.hpp"
#include "safnet/image.hpp"

namespace safnet {

// Backward warping: out(p) = bilinear(src, p + flow(p)). Sample coordinates
// are clamped to the image border, so nothing outside the frame is read.
// src: N x C x H x W, flow: N x 2 x H x W.
template <typename T>
Tensor<T> backward_warp(const Tensor<T>& src, const Tensor<T>& flow);

// Differentiable in both src and flow. At integer sample positions the
// gradient uses the right-hand interpolation segment.
template <typename T>
ag::Var<T> backward_warp(const ag::Var<T>& src, const ag::Var<T>& flow);

LinearImage backward_warp(const LinearImage& src, const FlowField& flow);

// Bilinear x2 resize of a flow field with displacements doubled.
template <typename T>
ag::Var<T> upsample_flow2x(const ag::Var<T>& flow);

FlowField upsample_flow2x(const FlowField& flow);

// Tiling of a full_h x full_w image into win_h x win_w windows, ordered
// row-major over the tile grid and batch-major across images.
struct WindowGrid {
  int full_h = 0;
  int full_w = 0;
  int win_h = 0;
  int win_w = 0;

  // Throws PartitionError unless the window divides the image.
  static WindowGrid make(int full_h, int full_w, int win_h, int win_w);

  int tiles_y() const { return full_h / win_h; }
  int tiles_x() const { return full_w / win_w; }
  int tiles() const { return tiles_y() * tiles_x(); }
};

// B x C x H x W -> (B * tiles) x C x h x w.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, const WindowGrid& grid);

// Exact inverse of window_partition.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& tiles, const WindowGrid& grid);

template <typename T>
ag::Var<T> window_partition(const ag::Var<T>& x, const WindowGrid& grid);

template <typename T>
ag::Var<T> window_reverse(const ag::Var<T>& tiles, const WindowGrid& grid);

}  // namespace safnet

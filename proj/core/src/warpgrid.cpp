#include "safnet/warpgrid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "safnet/ops.hpp"

namespace safnet {

namespace {

// Clamped bilinear footprint of one sample coordinate along an axis.
template <typename T>
struct Axis {
  int i0;
  int i1;
  T frac;
  T dclamp;  // derivative of the clamp, right-continuous
};

template <typename T>
Axis<T> axis_tap(T pos, int extent) {
  const T hi = static_cast<T>(extent - 1);
  Axis<T> a{};
  a.dclamp = (pos >= T(0) && pos < hi) ? T(1) : T(0);
  const T p = std::clamp(pos, T(0), hi);
  a.i0 = static_cast<int>(std::floor(p));
  if (a.i0 >= extent - 1) {
    a.i0 = extent - 1;
    a.i1 = extent - 1;
    a.frac = T(0);
  } else {
    a.i1 = a.i0 + 1;
    a.frac = p - static_cast<T>(a.i0);
  }
  return a;
}

template <typename T>
void check_warp_shapes(const Shape& src, const Shape& flow) {
  if (flow.c != 2 || flow.n != src.n || flow.h != src.h || flow.w != src.w) {
    throw ShapeError("backward_warp: source " + src.str() + " vs flow " +
                     flow.str());
  }
}

// (n, dst_y, dst_x) <-> (tile, y, x) index map shared by partition/reverse.
template <typename T, typename Copy>
void for_each_tile_row(const Shape& full, const WindowGrid& g, Copy copy) {
  for (int b = 0; b < full.n; ++b) {
    for (int ty = 0; ty < g.tiles_y(); ++ty) {
      for (int tx = 0; tx < g.tiles_x(); ++tx) {
        const int tile = (b * g.tiles_y() + ty) * g.tiles_x() + tx;
        for (int c = 0; c < full.c; ++c) {
          for (int y = 0; y < g.win_h; ++y) {
            copy(b, c, ty * g.win_h + y, tx * g.win_w, tile, y);
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> backward_warp(const Tensor<T>& src, const Tensor<T>& flow) {
  check_warp_shapes<T>(src.shape(), flow.shape());
  const Shape s = src.shape();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    const T* fu = flow.plane(n, 0);
    const T* fv = flow.plane(n, 1);
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const int p = y * s.w + x;
        const Axis<T> ax = axis_tap(static_cast<T>(x) + fu[p], s.w);
        const Axis<T> ay = axis_tap(static_cast<T>(y) + fv[p], s.h);
        const T w00 = (1 - ay.frac) * (1 - ax.frac);
        const T w01 = (1 - ay.frac) * ax.frac;
        const T w10 = ay.frac * (1 - ax.frac);
        const T w11 = ay.frac * ax.frac;
        const int i00 = ay.i0 * s.w + ax.i0;
        const int i01 = ay.i0 * s.w + ax.i1;
        const int i10 = ay.i1 * s.w + ax.i0;
        const int i11 = ay.i1 * s.w + ax.i1;
        for (int c = 0; c < s.c; ++c) {
          const T* img = src.plane(n, c);
          out.plane(n, c)[p] =
              w00 * img[i00] + w01 * img[i01] + w10 * img[i10] + w11 * img[i11];
        }
      }
    }
  }
  return out;
}

template <typename T>
ag::Var<T> backward_warp(const ag::Var<T>& src, const ag::Var<T>& flow) {
  Tensor<T> out = backward_warp(src.value(), flow.value());
  return ag::Var<T>::from_op(std::move(out), {src, flow}, [](ag::Node<T>& self) {
    auto& sin = *self.inputs[0];
    auto& fin = *self.inputs[1];
    const Tensor<T>& img = sin.value;
    const Tensor<T>& flw = fin.value;
    const Shape s = img.shape();
    Tensor<T> gsrc;
    if (sin.requires_grad) gsrc = Tensor<T>(s);
    Tensor<T> gflow;
    if (fin.requires_grad) gflow = Tensor<T>(flw.shape());
    for (int n = 0; n < s.n; ++n) {
      const T* fu = flw.plane(n, 0);
      const T* fv = flw.plane(n, 1);
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          const int p = y * s.w + x;
          const Axis<T> ax = axis_tap(static_cast<T>(x) + fu[p], s.w);
          const Axis<T> ay = axis_tap(static_cast<T>(y) + fv[p], s.h);
          const int i00 = ay.i0 * s.w + ax.i0;
          const int i01 = ay.i0 * s.w + ax.i1;
          const int i10 = ay.i1 * s.w + ax.i0;
          const int i11 = ay.i1 * s.w + ax.i1;
          T du = 0;
          T dv = 0;
          for (int c = 0; c < s.c; ++c) {
            const T g = self.grad.plane(n, c)[p];
            if (g == T(0)) continue;
            if (sin.requires_grad) {
              T* gi = gsrc.plane(n, c);
              gi[i00] += g * (1 - ay.frac) * (1 - ax.frac);
              gi[i01] += g * (1 - ay.frac) * ax.frac;
              gi[i10] += g * ay.frac * (1 - ax.frac);
              gi[i11] += g * ay.frac * ax.frac;
            }
            if (fin.requires_grad) {
              const T* im = img.plane(n, c);
              du += g * ((1 - ay.frac) * (im[i01] - im[i00]) +
                         ay.frac * (im[i11] - im[i10]));
              dv += g * ((1 - ax.frac) * (im[i10] - im[i00]) +
                         ax.frac * (im[i11] - im[i01]));
            }
          }
          if (fin.requires_grad) {
            gflow.plane(n, 0)[p] = du * ax.dclamp;
            gflow.plane(n, 1)[p] = dv * ay.dclamp;
          }
        }
      }
    }
    if (sin.requires_grad) ag::accumulate(sin, gsrc);
    if (fin.requires_grad) ag::accumulate(fin, gflow);
  });
}

LinearImage backward_warp(const LinearImage& src, const FlowField& flow) {
  return {backward_warp(src.pixels, flow.uv)};
}

template <typename T>
ag::Var<T> upsample_flow2x(const ag::Var<T>& flow) {
  if (flow.shape().c != 2) {
    throw ShapeError("upsample_flow2x: expected 2 channels, got " +
                     flow.shape().str());
  }
  return ops::scale(ops::upsample2x(flow), T(2));
}

FlowField upsample_flow2x(const FlowField& flow) {
  if (flow.uv.c() != 2) {
    throw ShapeError("upsample_flow2x: expected 2 channels, got " +
                     flow.uv.shape().str());
  }
  TensorD up = ops::upsample2x(flow.uv);
  for (auto& v : up.values()) v *= 2.0;
  return {std::move(up)};
}

WindowGrid WindowGrid::make(int full_h, int full_w, int win_h, int win_w) {
  if (win_h <= 0 || win_w <= 0 || full_h <= 0 || full_w <= 0) {
    throw PartitionError("window partition: nonpositive extent");
  }
  if (full_h % win_h != 0 || full_w % win_w != 0) {
    throw PartitionError("window " + std::to_string(win_h) + "x" +
                         std::to_string(win_w) + " does not divide image " +
                         std::to_string(full_h) + "x" + std::to_string(full_w));
  }
  return {full_h, full_w, win_h, win_w};
}

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, const WindowGrid& grid) {
  const Shape s = x.shape();
  if (s.h != grid.full_h || s.w != grid.full_w) {
    throw PartitionError("window_partition: input " + s.str() +
                         " does not match the grid");
  }
  Tensor<T> out({s.n * grid.tiles(), s.c, grid.win_h, grid.win_w});
  for_each_tile_row<T>(s, grid, [&](int b, int c, int fy, int fx, int tile, int y) {
    std::copy_n(x.plane(b, c) + fy * s.w + fx, grid.win_w,
                out.plane(tile, c) + y * grid.win_w);
  });
  return out;
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& tiles, const WindowGrid& grid) {
  const Shape s = tiles.shape();
  if (s.h != grid.win_h || s.w != grid.win_w || grid.tiles() == 0 ||
      s.n % grid.tiles() != 0) {
    throw PartitionError("window_reverse: tiles " + s.str() +
                         " inconsistent with grid");
  }
  const Shape full{s.n / grid.tiles(), s.c, grid.full_h, grid.full_w};
  Tensor<T> out(full);
  for_each_tile_row<T>(full, grid, [&](int b, int c, int fy, int fx, int tile, int y) {
    std::copy_n(tiles.plane(tile, c) + y * grid.win_w, grid.win_w,
                out.plane(b, c) + fy * full.w + fx);
  });
  return out;
}

template <typename T>
ag::Var<T> window_partition(const ag::Var<T>& x, const WindowGrid& grid) {
  return ag::Var<T>::from_op(window_partition(x.value(), grid), {x},
                             [grid](ag::Node<T>& self) {
                               ag::accumulate(*self.inputs[0],
                                              window_reverse(self.grad, grid));
                             });
}

template <typename T>
ag::Var<T> window_reverse(const ag::Var<T>& tiles, const WindowGrid& grid) {
  return ag::Var<T>::from_op(window_reverse(tiles.value(), grid), {tiles},
                             [grid](ag::Node<T>& self) {
                               ag::accumulate(*self.inputs[0],
                                              window_partition(self.grad, grid));
                             });
}

#define SAFNET_INSTANTIATE(T)                                                   \
  template Tensor<T> backward_warp(const Tensor<T>&, const Tensor<T>&);         \
  template ag::Var<T> backward_warp(const ag::Var<T>&, const ag::Var<T>&);      \
  template ag::Var<T> upsample_flow2x(const ag::Var<T>&);                       \
  template Tensor<T> window_partition(const Tensor<T>&, const WindowGrid&);     \
  template Tensor<T> window_reverse(const Tensor<T>&, const WindowGrid&);       \
  template ag::Var<T> window_partition(const ag::Var<T>&, const WindowGrid&);   \
  template ag::Var<T> window_reverse(const ag::Var<T>&, const WindowGrid&);

SAFNET_INSTANTIATE(float)
SAFNET_INSTANTIATE(double)
#undef SAFNET_INSTANTIATE

}  // namespace safnet

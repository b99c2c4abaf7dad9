#include "safnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace safnet::ops {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

// Geometry of a strided, padded, dilated KxK window sweep over a C x H x W
// image producing an Ho x Wo grid of patches.
struct ConvGeom {
  int channels;
  int height;
  int width;
  int kernel;
  int stride;
  int pad;
  int dilation;
  int out_h;
  int out_w;

  int rows() const { return channels * kernel * kernel; }

  // Output columns [lo, hi) whose sample x index stays inside the image.
  std::pair<int, int> valid_cols(int kx) const {
    const int off = kx * dilation - pad;
    int lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    int hi_num = width - 1 - off;
    int hi = hi_num < 0 ? 0 : hi_num / stride + 1;
    lo = std::min(lo, out_w);
    hi = std::clamp(hi, lo, out_w);
    return {lo, hi};
  }
};

// Patch matrix for output rows [r0, r1): rows() x ((r1 - r0) * out_w).
template <typename T>
void im2col(const T* img, const ConvGeom& g, int r0, int r1, T* col) {
  const int cols = (r1 - r0) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    const T* src = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        T* dst = col + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel +
                                                kx) *
                           cols;
        const auto [lo, hi] = g.valid_cols(kx);
        const int xoff = kx * g.dilation - g.pad;
        for (int r = r0; r < r1; ++r) {
          T* row = dst + static_cast<std::size_t>(r - r0) * g.out_w;
          const int iy = r * g.stride - g.pad + ky * g.dilation;
          if (iy < 0 || iy >= g.height) {
            std::fill(row, row + g.out_w, T(0));
            continue;
          }
          const T* line = src + static_cast<std::size_t>(iy) * g.width;
          std::fill(row, row + lo, T(0));
          if (g.stride == 1) {
            std::copy(line + lo + xoff, line + hi + xoff, row + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox] = line[ox * g.stride + xoff];
          }
          std::fill(row + hi, row + g.out_w, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds the patch matrix back into the image.
template <typename T>
void col2im(const T* col, const ConvGeom& g, int r0, int r1, T* img) {
  const int cols = (r1 - r0) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    T* dst = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const T* src = col + static_cast<std::size_t>((c * g.kernel + ky) *
                                                          g.kernel +
                                                      kx) *
                                 cols;
        const auto [lo, hi] = g.valid_cols(kx);
        const int xoff = kx * g.dilation - g.pad;
        for (int r = r0; r < r1; ++r) {
          const int iy = r * g.stride - g.pad + ky * g.dilation;
          if (iy < 0 || iy >= g.height) continue;
          const T* row = src + static_cast<std::size_t>(r - r0) * g.out_w;
          T* line = dst + static_cast<std::size_t>(iy) * g.width;
          for (int ox = lo; ox < hi; ++ox) line[ox * g.stride + xoff] += row[ox];
        }
      }
    }
  }
}

// Output rows per im2col chunk, bounding scratch memory.
int chunk_rows(const ConvGeom& g) {
  constexpr std::size_t kBudget = std::size_t(1) << 22;
  const std::size_t per_row = static_cast<std::size_t>(g.rows()) * g.out_w;
  return static_cast<int>(
      std::clamp<std::size_t>(kBudget / std::max<std::size_t>(per_row, 1), 1,
                              static_cast<std::size_t>(g.out_h)));
}

template <typename T>
std::vector<T>& scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

template <typename T>
void check_bias(const Var<T>& bias, int channels, const char* what) {
  if (!bias.defined()) return;
  if (bias.shape() != Shape{1, channels, 1, 1}) {
    throw ShapeError(std::string(what) + ": bias shape " + bias.shape().str());
  }
}

template <typename T>
void add_bias(Tensor<T>& out, const Var<T>& bias) {
  if (!bias.defined()) return;
  const std::size_t plane = out.shape().plane();
  for (int n = 0; n < out.n(); ++n) {
    for (int c = 0; c < out.c(); ++c) {
      const T b = bias.value()[c];
      T* p = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) p[i] += b;
    }
  }
}

template <typename T>
Tensor<T> bias_grad(const Tensor<T>& g) {
  Tensor<T> out({1, g.c(), 1, 1});
  const std::size_t plane = g.shape().plane();
  for (int n = 0; n < g.n(); ++n) {
    for (int c = 0; c < g.c(); ++c) {
      const T* p = g.plane(n, c);
      T s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      out[c] += s;
    }
  }
  return out;
}

// Map a unary elementwise function with derivative df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> y(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return Var<T>::from_op(std::move(y), {x}, [df](ag::Node<T>& self) {
    const Tensor<T>& xin = self.inputs[0]->value;
    Tensor<T> gx(xin.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] = self.grad[i] * df(xin[i], self.value[i]);
    }
    ag::accumulate(*self.inputs[0], gx);
  });
}

// Bilinear tap (i0, i1, frac) for half-pixel-centred x2 upsampling.
struct Tap {
  int i0;
  int i1;
  double frac;
};

std::vector<Tap> upsample_taps(int n) {
  std::vector<Tap> taps(2 * static_cast<std::size_t>(n));
  for (int o = 0; o < 2 * n; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    i0 = std::min(i0, n - 1);
    const int i1 = std::min(i0 + 1, n - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              ConvOptions opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (opt.groups < 1 || xs.c % opt.groups != 0 || ws.n % opt.groups != 0 ||
      ws.c * opt.groups != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " +
                     ws.str());
  }
  check_bias(bias, ws.n, "conv2d");
  const int k = ws.h;
  ConvGeom g{ws.c,
             xs.h,
             xs.w,
             k,
             opt.stride,
             opt.pad,
             opt.dilation,
             (xs.h + 2 * opt.pad - opt.dilation * (k - 1) - 1) / opt.stride + 1,
             (xs.w + 2 * opt.pad - opt.dilation * (k - 1) - 1) / opt.stride + 1};
  if (g.out_h <= 0 || g.out_w <= 0) {
    throw ShapeError("conv2d: empty output for input " + xs.str());
  }
  const int groups = opt.groups;
  const int cout_g = ws.n / groups;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  const std::size_t in_plane = xs.plane();
  const int rows = chunk_rows(g);

  Tensor<T> out({xs.n, ws.n, g.out_h, g.out_w});
  {
    auto& col = scratch<T>(static_cast<std::size_t>(g.rows()) * rows * g.out_w);
    for (int n = 0; n < xs.n; ++n) {
      for (int gi = 0; gi < groups; ++gi) {
        const T* img = x.value().plane(n, gi * g.channels);
        CMapR<T> wmat(weight.value().data() +
                          static_cast<std::size_t>(gi) * cout_g * g.rows(),
                      cout_g, g.rows(), Eigen::OuterStride<>(g.rows()));
        for (int r0 = 0; r0 < g.out_h; r0 += rows) {
          const int r1 = std::min(r0 + rows, g.out_h);
          const int cols = (r1 - r0) * g.out_w;
          im2col(img, g, r0, r1, col.data());
          CMapR<T> cmat(col.data(), g.rows(), cols, Eigen::OuterStride<>(cols));
          MapR<T> omat(out.plane(n, gi * cout_g) + static_cast<std::size_t>(r0) * g.out_w,
                       cout_g, cols, Eigen::OuterStride<>(out_plane));
          omat.noalias() = wmat * cmat;
        }
      }
    }
  }
  add_bias(out, bias);

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Var<T>::from_op(
      std::move(out), std::move(inputs),
      [g, groups, cout_g, out_plane, in_plane, rows](ag::Node<T>& self) {
        auto& xin = *self.inputs[0];
        auto& win = *self.inputs[1];
        const Tensor<T>& gout = self.grad;
        const int batch = xin.value.n();
        Tensor<T> gx;
        if (xin.requires_grad) gx = Tensor<T>(xin.value.shape());
        Tensor<T> gw;
        if (win.requires_grad) gw = Tensor<T>(win.value.shape());
        auto& col = scratch<T>(static_cast<std::size_t>(g.rows()) * rows * g.out_w);
        for (int n = 0; n < batch; ++n) {
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t woff = static_cast<std::size_t>(gi) * cout_g * g.rows();
            for (int r0 = 0; r0 < g.out_h; r0 += rows) {
              const int r1 = std::min(r0 + rows, g.out_h);
              const int cols = (r1 - r0) * g.out_w;
              CMapR<T> gmat(gout.plane(n, gi * cout_g) +
                                static_cast<std::size_t>(r0) * g.out_w,
                            cout_g, cols, Eigen::OuterStride<>(out_plane));
              if (win.requires_grad) {
                im2col(xin.value.plane(n, gi * g.channels), g, r0, r1, col.data());
                CMapR<T> cmat(col.data(), g.rows(), cols, Eigen::OuterStride<>(cols));
                MapR<T> gwmat(gw.data() + woff, cout_g, g.rows(),
                              Eigen::OuterStride<>(g.rows()));
                gwmat.noalias() += gmat * cmat.transpose();
              }
              if (xin.requires_grad) {
                CMapR<T> wmat(win.value.data() + woff, cout_g, g.rows(),
                              Eigen::OuterStride<>(g.rows()));
                MapR<T> cmat(col.data(), g.rows(), cols, Eigen::OuterStride<>(cols));
                cmat.noalias() = wmat.transpose() * gmat;
                col2im(col.data(), g, r0, r1, gx.plane(n, gi * g.channels));
              }
            }
          }
        }
        (void)in_plane;
        if (xin.requires_grad) ag::accumulate(xin, gx);
        if (win.requires_grad) ag::accumulate(win, gw);
        if (self.inputs.size() > 2) ag::accumulate(*self.inputs[2], bias_grad(gout));
      });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight,
                        const Var<T>& bias, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.n != xs.c || ws.h != ws.w) {
    throw ShapeError("conv_transpose2d: input " + xs.str() +
                     " incompatible with weight " + ws.str());
  }
  check_bias(bias, ws.c, "conv_transpose2d");
  const int k = ws.h;
  const int out_h = (xs.h - 1) * stride - 2 * pad + k;
  const int out_w = (xs.w - 1) * stride - 2 * pad + k;
  // Geometry from the output image's point of view: a forward conv over the
  // output grid produces the input grid.
  const ConvGeom g{ws.c, out_h, out_w, k, stride, pad, 1, xs.h, xs.w};
  const int cin = xs.c;
  const std::size_t in_plane = xs.plane();

  Tensor<T> out({xs.n, ws.c, out_h, out_w});
  auto& col = scratch<T>(static_cast<std::size_t>(g.rows()) * in_plane);
  CMapR<T> wmat(weight.value().data(), cin, g.rows(), Eigen::OuterStride<>(g.rows()));
  for (int n = 0; n < xs.n; ++n) {
    CMapR<T> xmat(x.value().plane(n, 0), cin, in_plane, Eigen::OuterStride<>(in_plane));
    MapR<T> cmat(col.data(), g.rows(), in_plane, Eigen::OuterStride<>(in_plane));
    cmat.noalias() = wmat.transpose() * xmat;
    col2im(col.data(), g, 0, xs.h, out.plane(n, 0));
  }
  add_bias(out, bias);

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Var<T>::from_op(
      std::move(out), std::move(inputs), [g, cin, in_plane](ag::Node<T>& self) {
        auto& xin = *self.inputs[0];
        auto& win = *self.inputs[1];
        const int batch = xin.value.n();
        Tensor<T> gx;
        if (xin.requires_grad) gx = Tensor<T>(xin.value.shape());
        Tensor<T> gw;
        if (win.requires_grad) gw = Tensor<T>(win.value.shape());
        auto& col = scratch<T>(static_cast<std::size_t>(g.rows()) * in_plane);
        for (int n = 0; n < batch; ++n) {
          im2col(self.grad.plane(n, 0), g, 0, g.out_h, col.data());
          CMapR<T> cmat(col.data(), g.rows(), in_plane, Eigen::OuterStride<>(in_plane));
          if (xin.requires_grad) {
            CMapR<T> wmat(win.value.data(), cin, g.rows(), Eigen::OuterStride<>(g.rows()));
            MapR<T> gxmat(gx.plane(n, 0), cin, in_plane, Eigen::OuterStride<>(in_plane));
            gxmat.noalias() = wmat * cmat;
          }
          if (win.requires_grad) {
            CMapR<T> xmat(xin.value.plane(n, 0), cin, in_plane,
                          Eigen::OuterStride<>(in_plane));
            MapR<T> gwmat(gw.data(), cin, g.rows(), Eigen::OuterStride<>(g.rows()));
            gwmat.noalias() += xmat * cmat.transpose();
          }
        }
        if (xin.requires_grad) ag::accumulate(xin, gx);
        if (win.requires_grad) ag::accumulate(win, gw);
        if (self.inputs.size() > 2) ag::accumulate(*self.inputs[2], bias_grad(self.grad));
      });
}

template <typename T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope) {
  const Shape xs = x.shape();
  if (slope.shape() != Shape{1, xs.c, 1, 1}) {
    throw ShapeError("prelu: slope " + slope.shape().str() + " for input " + xs.str());
  }
  Tensor<T> y(xs);
  const std::size_t plane = xs.plane();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T a = slope.value()[c];
      const T* src = x.value().plane(n, c);
      T* dst = y.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] > 0 ? src[i] : a * src[i];
    }
  }
  return Var<T>::from_op(std::move(y), {x, slope}, [plane](ag::Node<T>& self) {
    auto& xin = *self.inputs[0];
    auto& sin = *self.inputs[1];
    const Shape xs = xin.value.shape();
    Tensor<T> gx(xs);
    Tensor<T> gs(sin.value.shape());
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        const T a = sin.value[c];
        const T* src = xin.value.plane(n, c);
        const T* g = self.grad.plane(n, c);
        T* dst = gx.plane(n, c);
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          if (src[i] > 0) {
            dst[i] = g[i];
          } else {
            dst[i] = a * g[i];
            acc += g[i] * src[i];
          }
        }
        gs[c] += acc;
      }
    }
    ag::accumulate(xin, gx);
    ag::accumulate(sin, gs);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(
      x, [](T v) { return v > 0 ? v : T(0); },
      [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  y += b.value();
  return Var<T>::from_op(std::move(y), {a, b}, [](ag::Node<T>& self) {
    ag::accumulate(*self.inputs[0], self.grad);
    ag::accumulate(*self.inputs[1], self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return Var<T>::from_op(std::move(y), {a, b}, [](ag::Node<T>& self) {
    ag::accumulate(*self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor<T> g = self.grad;
      for (auto& v : g.values()) v = -v;
      ag::accumulate(*self.inputs[1], g);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return Var<T>::from_op(std::move(y), {a, b}, [](ag::Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      const Tensor<T>& other = self.inputs[1 - k]->value;
      Tensor<T> g(self.grad.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * other[i];
      ag::accumulate(in, g);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v *= factor;
  return Var<T>::from_op(std::move(y), {a}, [factor](ag::Node<T>& self) {
    Tensor<T> g = self.grad;
    for (auto& v : g.values()) v *= factor;
    ag::accumulate(*self.inputs[0], g);
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  std::vector<Tensor<T>> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  Tensor<T> y = concat_channels<T>(values);
  return Var<T>::from_op(std::move(y), parts, [](ag::Node<T>& self) {
    int c0 = 0;
    for (auto& in : self.inputs) {
      const int c = in->value.c();
      if (in->requires_grad) ag::accumulate(*in, slice_channels(self.grad, c0, c));
      c0 += c;
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, int begin, int count) {
  Tensor<T> y = slice_channels(x.value(), begin, count);
  return Var<T>::from_op(std::move(y), {x}, [begin, count](ag::Node<T>& self) {
    auto& in = *self.inputs[0];
    Tensor<T> g(in.value.shape());
    const std::size_t plane = g.shape().plane();
    for (int n = 0; n < g.n(); ++n) {
      std::copy_n(self.grad.plane(n, 0), plane * count, g.plane(n, begin));
    }
    ag::accumulate(in, g);
  });
}

template <typename T>
Var<T> channel_shuffle(const Var<T>& x, int groups) {
  const Shape xs = x.shape();
  if (groups < 1 || xs.c % groups != 0) {
    throw ShapeError("channel_shuffle: " + std::to_string(xs.c) +
                     " channels not divisible by " + std::to_string(groups));
  }
  const int per = xs.c / groups;
  // Output channel j*groups + i takes input channel i*per + j.
  auto src_of = [groups, per](int oc) { return (oc % groups) * per + oc / groups; };
  Tensor<T> y(xs);
  const std::size_t plane = xs.plane();
  for (int n = 0; n < xs.n; ++n) {
    for (int oc = 0; oc < xs.c; ++oc) {
      std::copy_n(x.value().plane(n, src_of(oc)), plane, y.plane(n, oc));
    }
  }
  return Var<T>::from_op(std::move(y), {x}, [src_of, plane](ag::Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    for (int n = 0; n < g.n(); ++n) {
      for (int oc = 0; oc < g.c(); ++oc) {
        std::copy_n(self.grad.plane(n, oc), plane, g.plane(n, src_of(oc)));
      }
    }
    ag::accumulate(*self.inputs[0], g);
  });
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  const Shape xs = x.shape();
  const auto ty = upsample_taps(xs.h);
  const auto tx = upsample_taps(xs.w);
  Tensor<T> y({xs.n, xs.c, 2 * xs.h, 2 * xs.w});
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T* src = x.plane(n, c);
      T* dst = y.plane(n, c);
      for (int oy = 0; oy < y.h(); ++oy) {
        const Tap& a = ty[oy];
        const T fy = static_cast<T>(a.frac);
        for (int ox = 0; ox < y.w(); ++ox) {
          const Tap& b = tx[ox];
          const T fx = static_cast<T>(b.frac);
          const T top = src[a.i0 * xs.w + b.i0] * (1 - fx) + src[a.i0 * xs.w + b.i1] * fx;
          const T bot = src[a.i1 * xs.w + b.i0] * (1 - fx) + src[a.i1 * xs.w + b.i1] * fx;
          dst[oy * y.w() + ox] = top * (1 - fy) + bot * fy;
        }
      }
    }
  }
  return y;
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  return Var<T>::from_op(upsample2x(x.value()), {x}, [](ag::Node<T>& self) {
    auto& in = *self.inputs[0];
    const Shape xs = in.value.shape();
    const auto ty = upsample_taps(xs.h);
    const auto tx = upsample_taps(xs.w);
    Tensor<T> g(xs);
    const int ow = 2 * xs.w;
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        const T* go = self.grad.plane(n, c);
        T* gi = g.plane(n, c);
        for (int oy = 0; oy < 2 * xs.h; ++oy) {
          const Tap& a = ty[oy];
          const T fy = static_cast<T>(a.frac);
          for (int ox = 0; ox < ow; ++ox) {
            const Tap& b = tx[ox];
            const T fx = static_cast<T>(b.frac);
            const T v = go[oy * ow + ox];
            gi[a.i0 * xs.w + b.i0] += v * (1 - fy) * (1 - fx);
            gi[a.i0 * xs.w + b.i1] += v * (1 - fy) * fx;
            gi[a.i1 * xs.w + b.i0] += v * fy * (1 - fx);
            gi[a.i1 * xs.w + b.i1] += v * fy * fx;
          }
        }
      }
    }
    ag::accumulate(in, g);
  });
}

template <typename T>
Tensor<T> avg_pool2x(const Tensor<T>& x) {
  const Shape xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw ShapeError("avg_pool2x: odd spatial extent " + xs.str());
  }
  Tensor<T> y({xs.n, xs.c, xs.h / 2, xs.w / 2});
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T* src = x.plane(n, c);
      T* dst = y.plane(n, c);
      for (int oy = 0; oy < y.h(); ++oy) {
        const T* r0 = src + 2 * oy * xs.w;
        const T* r1 = r0 + xs.w;
        for (int ox = 0; ox < y.w(); ++ox) {
          dst[oy * y.w() + ox] =
              (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * T(0.25);
        }
      }
    }
  }
  return y;
}

template <typename T>
Var<T> avg_pool2x(const Var<T>& x) {
  return Var<T>::from_op(avg_pool2x(x.value()), {x}, [](ag::Node<T>& self) {
    auto& in = *self.inputs[0];
    Tensor<T> g(in.value.shape());
    const int ow = self.grad.w();
    for (int n = 0; n < g.n(); ++n) {
      for (int c = 0; c < g.c(); ++c) {
        const T* go = self.grad.plane(n, c);
        T* gi = g.plane(n, c);
        for (int oy = 0; oy < self.grad.h(); ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const T v = go[oy * ow + ox] * T(0.25);
            T* r0 = gi + 2 * oy * g.w() + 2 * ox;
            r0[0] += v;
            r0[1] += v;
            r0[g.w()] += v;
            r0[g.w() + 1] += v;
          }
        }
      }
    }
    ag::accumulate(in, g);
  });
}

template <typename T>
Var<T> crop(const Var<T>& x, int top, int left, int height, int width) {
  const Shape xs = x.shape();
  if (top < 0 || left < 0 || height < 0 || width < 0 || top + height > xs.h ||
      left + width > xs.w) {
    throw ShapeError("crop window outside " + xs.str());
  }
  if (top == 0 && left == 0 && height == xs.h && width == xs.w) return x;
  Tensor<T> y({xs.n, xs.c, height, width});
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      for (int r = 0; r < height; ++r) {
        const T* src = x.value().plane(n, c) + (top + r) * xs.w + left;
        std::copy_n(src, width, y.plane(n, c) + r * width);
      }
    }
  }
  return Var<T>::from_op(std::move(y), {x}, [top, left](ag::Node<T>& self) {
    auto& in = *self.inputs[0];
    Tensor<T> g(in.value.shape());
    const Shape gs = self.grad.shape();
    for (int n = 0; n < gs.n; ++n) {
      for (int c = 0; c < gs.c; ++c) {
        for (int r = 0; r < gs.h; ++r) {
          std::copy_n(self.grad.plane(n, c) + r * gs.w, gs.w,
                      g.plane(n, c) + (top + r) * g.w() + left);
        }
      }
    }
    ag::accumulate(in, g);
  });
}

template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  const std::size_t count = a.value().size();
  double acc = 0;
  for (std::size_t i = 0; i < count; ++i) {
    acc += std::abs(static_cast<double>(a.value()[i]) - b.value()[i]);
  }
  Tensor<T> y({1, 1, 1, 1}, static_cast<T>(count ? acc / count : 0.0));
  return Var<T>::from_op(std::move(y), {a, b}, [count](ag::Node<T>& self) {
    const Tensor<T>& av = self.inputs[0]->value;
    const Tensor<T>& bv = self.inputs[1]->value;
    const T s = self.grad[0] / static_cast<T>(count);
    Tensor<T> g(av.shape());
    for (std::size_t i = 0; i < count; ++i) {
      const T d = av[i] - bv[i];
      g[i] = d > 0 ? s : (d < 0 ? -s : T(0));
    }
    ag::accumulate(*self.inputs[0], g);
    if (self.inputs[1]->requires_grad) {
      for (auto& v : g.values()) v = -v;
      ag::accumulate(*self.inputs[1], g);
    }
  });
}

template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<Var<T>, double>>& terms) {
  std::vector<Var<T>> inputs;
  std::vector<double> weights;
  T total = 0;
  for (const auto& [v, w] : terms) {
    if (v.value().size() != 1) throw ShapeError("weighted_sum expects scalars");
    total += static_cast<T>(w) * v.value()[0];
    inputs.push_back(v);
    weights.push_back(w);
  }
  return Var<T>::from_op(Tensor<T>({1, 1, 1, 1}, total), inputs,
                         [weights](ag::Node<T>& self) {
                           for (std::size_t i = 0; i < weights.size(); ++i) {
                             Tensor<T> g({1, 1, 1, 1},
                                         self.grad[0] * static_cast<T>(weights[i]));
                             ag::accumulate(*self.inputs[i], g);
                           }
                         });
}

#define SAFNET_INSTANTIATE(T)                                                        \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, ConvOptions);  \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>&, int, \
                                   int);                                             \
  template Var<T> prelu(const Var<T>&, const Var<T>&);                               \
  template Var<T> relu(const Var<T>&);                                               \
  template Var<T> sigmoid(const Var<T>&);                                            \
  template Var<T> add(const Var<T>&, const Var<T>&);                                 \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                 \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                 \
  template Var<T> scale(const Var<T>&, T);                                           \
  template Var<T> concat(const std::vector<Var<T>>&);                                \
  template Var<T> slice(const Var<T>&, int, int);                                    \
  template Var<T> channel_shuffle(const Var<T>&, int);                               \
  template Var<T> upsample2x(const Var<T>&);                                         \
  template Var<T> avg_pool2x(const Var<T>&);                                         \
  template Var<T> crop(const Var<T>&, int, int, int, int);                           \
  template Var<T> mean_abs_diff(const Var<T>&, const Var<T>&);                       \
  template Var<T> weighted_sum(const std::vector<std::pair<Var<T>, double>>&);       \
  template Tensor<T> upsample2x(const Tensor<T>&);                                   \
  template Tensor<T> avg_pool2x(const Tensor<T>&);

SAFNET_INSTANTIATE(float)
SAFNET_INSTANTIATE(double)
#undef SAFNET_INSTANTIATE

}  // namespace safnet::ops

#include "safnet/radiometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace safnet {

namespace {

void check_exposure(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw InvalidExposure("exposure time must be positive and finite, got " +
                          std::to_string(t));
  }
}

void check_gamma(double gamma) {
  if (!(gamma > 0.0)) throw ContractError("gamma must be positive");
}

void check_mask(const SelectionMask& m, const Shape& expect, const char* name) {
  require_same_shape(m.m.shape(), expect, name);
  for (double v : m.m.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError(std::string(name) + " value outside [0, 1]: " +
                          std::to_string(v));
    }
  }
}

}  // namespace

void LdrImage::validate() const {
  check_exposure(exposure);
  if (pixels.n() != 1 || pixels.c() != 3) {
    throw ShapeError("LDR image must be 1x3xHxW, got " + pixels.shape().str());
  }
  for (double v : pixels.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError("LDR pixel outside [0, 1]: " + std::to_string(v));
    }
  }
}

FlowField FlowField::constant(int height, int width, double u, double v) {
  FlowField f{TensorD({1, 2, height, width})};
  std::fill_n(f.uv.plane(0, 0), f.uv.shape().plane(), u);
  std::fill_n(f.uv.plane(0, 1), f.uv.shape().plane(), v);
  return f;
}

SelectionMask SelectionMask::constant(int height, int width, double value) {
  return {TensorD({1, 1, height, width}, value)};
}

LinearImage ldr_to_linear(const LdrImage& ldr, double gamma) {
  check_exposure(ldr.exposure);
  const double t[1] = {ldr.exposure};
  return {ldr_to_linear(ldr.pixels, std::span<const double>(t), gamma)};
}

LdrImage linear_to_ldr(const LinearImage& hdr, double exposure, double gamma) {
  check_exposure(exposure);
  check_gamma(gamma);
  LdrImage out{hdr.pixels, exposure};
  const double inv = 1.0 / gamma;
  for (auto& v : out.pixels.values()) {
    v = std::pow(std::clamp(v * exposure, 0.0, 1.0), inv);
  }
  return out;
}

TensorD tonemap_mu(const TensorD& hdr, double mu) {
  TensorD out = hdr;
  const double denom = std::log1p(mu);
  for (auto& v : out.values()) v = std::log1p(mu * std::clamp(v, 0.0, 1.0)) / denom;
  return out;
}

FusionCoefficients initial_coefficients(const LdrImage& reference) {
  const TensorD lam = initial_coefficients(reference.pixels);
  return {slice_channels(lam, 0, 1), slice_channels(lam, 1, 1),
          slice_channels(lam, 2, 1)};
}

FusionWeights reweight_coefficients(const FusionCoefficients& lam,
                                    const SelectionMask& m1,
                                    const SelectionMask& m3) {
  const Shape s = lam.lam1.shape();
  require_same_shape(lam.lam2.shape(), s, "reweight_coefficients lam2");
  require_same_shape(lam.lam3.shape(), s, "reweight_coefficients lam3");
  check_mask(m1, s, "mask M1");
  check_mask(m3, s, "mask M3");
  FusionWeights w{TensorD(s), TensorD(s), TensorD(s)};
  for (std::size_t i = 0; i < w.w1.size(); ++i) {
    const double l1 = lam.lam1[i];
    const double l3 = lam.lam3[i];
    w.w1[i] = l1 * m1.m[i];
    w.w3[i] = l3 * m3.m[i];
    w.w2[i] = lam.lam2[i] + l1 * (1.0 - m1.m[i]) + l3 * (1.0 - m3.m[i]);
  }
  return w;
}

LinearImage merge_hdr(const LinearImage& h1_warped, const LinearImage& h2,
                      const LinearImage& h3_warped, const FusionWeights& w) {
  const Shape s = h2.pixels.shape();
  require_same_shape(h1_warped.pixels.shape(), s, "merge_hdr H1");
  require_same_shape(h3_warped.pixels.shape(), s, "merge_hdr H3");
  const Shape ws{s.n, 1, s.h, s.w};
  require_same_shape(w.w1.shape(), ws, "merge_hdr W1");
  require_same_shape(w.w2.shape(), ws, "merge_hdr W2");
  require_same_shape(w.w3.shape(), ws, "merge_hdr W3");
  LinearImage out{TensorD(s)};
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const double* w1 = w.w1.plane(n, 0);
    const double* w3 = w.w3.plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const double* a = h1_warped.pixels.plane(n, c);
      const double* b = h2.pixels.plane(n, c);
      const double* d = h3_warped.pixels.plane(n, c);
      double* o = out.pixels.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        o[i] = b[i] + w1[i] * (a[i] - b[i]) + w3[i] * (d[i] - b[i]);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> ldr_to_linear(const Tensor<T>& ldr, std::span<const double> exposures,
                        double gamma) {
  check_gamma(gamma);
  if (static_cast<int>(exposures.size()) != ldr.n()) {
    throw ShapeError("ldr_to_linear: " + std::to_string(exposures.size()) +
                     " exposures for batch " + ldr.shape().str());
  }
  Tensor<T> out(ldr.shape());
  const std::size_t item = static_cast<std::size_t>(ldr.c()) * ldr.shape().plane();
  for (int n = 0; n < ldr.n(); ++n) {
    check_exposure(exposures[n]);
    const double inv_t = 1.0 / exposures[n];
    const T* src = ldr.data() + item * n;
    T* dst = out.data() + item * n;
    for (std::size_t i = 0; i < item; ++i) {
      dst[i] = static_cast<T>(std::pow(static_cast<double>(src[i]), gamma) * inv_t);
    }
  }
  return out;
}

template <typename T>
ag::Var<T> ldr_to_linear(const ag::Var<T>& ldr, std::span<const double> exposures,
                         double gamma) {
  std::vector<double> t(exposures.begin(), exposures.end());
  return ag::Var<T>::from_op(
      ldr_to_linear(ldr.value(), exposures, gamma), {ldr},
      [t, gamma](ag::Node<T>& self) {
        const Tensor<T>& x = self.inputs[0]->value;
        Tensor<T> g(x.shape());
        const std::size_t item = static_cast<std::size_t>(x.c()) * x.shape().plane();
        for (int n = 0; n < x.n(); ++n) {
          for (std::size_t i = item * n; i < item * (n + 1); ++i) {
            const double v = x[i];
            const double d = v > 0 ? gamma * std::pow(v, gamma - 1.0) / t[n] : 0.0;
            g[i] = self.grad[i] * static_cast<T>(d);
          }
        }
        ag::accumulate(*self.inputs[0], g);
      });
}

template <typename T>
Tensor<T> initial_coefficients(const Tensor<T>& reference_ldr) {
  const Shape s = reference_ldr.shape();
  if (s.c != 3) {
    throw ShapeError("initial_coefficients: expected RGB, got " + s.str());
  }
  Tensor<T> lam({s.n, 3, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const T* r = reference_ldr.plane(n, 0);
    const T* g = reference_ldr.plane(n, 1);
    const T* b = reference_ldr.plane(n, 2);
    T* l1 = lam.plane(n, 0);
    T* l2 = lam.plane(n, 1);
    T* l3 = lam.plane(n, 2);
    for (std::size_t i = 0; i < plane; ++i) {
      const T y = std::max({r[i], g[i], b[i]});
      l1[i] = std::max(T(0), (y - T(0.5)) / T(0.5));
      l3[i] = std::max(T(0), (T(0.5) - y) / T(0.5));
      l2[i] = T(1) - l1[i] - l3[i];
    }
  }
  return lam;
}

template <typename T>
ag::Var<T> tonemap_mu(const ag::Var<T>& hdr, double mu) {
  const double denom = std::log1p(mu);
  Tensor<T> out(hdr.shape());
  const Tensor<T>& x = hdr.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(static_cast<double>(x[i]), 0.0, 1.0);
    out[i] = static_cast<T>(std::log1p(mu * v) / denom);
  }
  return ag::Var<T>::from_op(std::move(out), {hdr}, [mu, denom](ag::Node<T>& self) {
    const Tensor<T>& xin = self.inputs[0]->value;
    Tensor<T> g(xin.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xin[i];
      if (v >= 0.0 && v < 1.0) {
        g[i] = self.grad[i] * static_cast<T>(mu / ((1.0 + mu * v) * denom));
      }
    }
    ag::accumulate(*self.inputs[0], g);
  });
}

template <typename T>
ag::Var<T> merge_hdr(const ag::Var<T>& h1_warped, const ag::Var<T>& h2,
                     const ag::Var<T>& h3_warped, const ag::Var<T>& m1,
                     const ag::Var<T>& m3, const Tensor<T>& lam) {
  const Shape s = h2.shape();
  require_same_shape(h1_warped.shape(), s, "merge_hdr H1");
  require_same_shape(h3_warped.shape(), s, "merge_hdr H3");
  const Shape ms{s.n, 1, s.h, s.w};
  require_same_shape(m1.shape(), ms, "merge_hdr M1");
  require_same_shape(m3.shape(), ms, "merge_hdr M3");
  require_same_shape(lam.shape(), Shape{s.n, 3, s.h, s.w}, "merge_hdr coefficients");

  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    const T* l1 = lam.plane(n, 0);
    const T* l3 = lam.plane(n, 2);
    const T* mm1 = m1.value().plane(n, 0);
    const T* mm3 = m3.value().plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* a = h1_warped.value().plane(n, c);
      const T* b = h2.value().plane(n, c);
      const T* d = h3_warped.value().plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        o[i] = b[i] + l1[i] * mm1[i] * (a[i] - b[i]) + l3[i] * mm3[i] * (d[i] - b[i]);
      }
    }
  }
  return ag::Var<T>::from_op(
      std::move(out), {h1_warped, h2, h3_warped, m1, m3},
      [lam, plane](ag::Node<T>& self) {
        auto& in1 = *self.inputs[0];
        auto& in2 = *self.inputs[1];
        auto& in3 = *self.inputs[2];
        auto& im1 = *self.inputs[3];
        auto& im3 = *self.inputs[4];
        const Shape s = in2.value.shape();
        Tensor<T> g1(s), g2(s), g3(s);
        Tensor<T> gm1({s.n, 1, s.h, s.w}), gm3({s.n, 1, s.h, s.w});
        for (int n = 0; n < s.n; ++n) {
          const T* l1 = lam.plane(n, 0);
          const T* l3 = lam.plane(n, 2);
          const T* mm1 = im1.value.plane(n, 0);
          const T* mm3 = im3.value.plane(n, 0);
          for (int c = 0; c < s.c; ++c) {
            const T* a = in1.value.plane(n, c);
            const T* b = in2.value.plane(n, c);
            const T* d = in3.value.plane(n, c);
            const T* go = self.grad.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
              const T w1 = l1[i] * mm1[i];
              const T w3 = l3[i] * mm3[i];
              g1.plane(n, c)[i] = go[i] * w1;
              g3.plane(n, c)[i] = go[i] * w3;
              g2.plane(n, c)[i] = go[i] * (T(1) - w1 - w3);
              gm1.plane(n, 0)[i] += go[i] * l1[i] * (a[i] - b[i]);
              gm3.plane(n, 0)[i] += go[i] * l3[i] * (d[i] - b[i]);
            }
          }
        }
        ag::accumulate(in1, g1);
        ag::accumulate(in2, g2);
        ag::accumulate(in3, g3);
        ag::accumulate(im1, gm1);
        ag::accumulate(im3, gm3);
      });
}

#define SAFNET_INSTANTIATE(T)                                                        \
  template Tensor<T> ldr_to_linear(const Tensor<T>&, std::span<const double>,        \
                                   double);                                          \
  template ag::Var<T> ldr_to_linear(const ag::Var<T>&, std::span<const double>,      \
                                    double);                                         \
  template Tensor<T> initial_coefficients(const Tensor<T>&);                         \
  template ag::Var<T> tonemap_mu(const ag::Var<T>&, double);                         \
  template ag::Var<T> merge_hdr(const ag::Var<T>&, const ag::Var<T>&,                \
                                const ag::Var<T>&, const ag::Var<T>&,                \
                                const ag::Var<T>&, const Tensor<T>&);

SAFNET_INSTANTIATE(float)
SAFNET_INSTANTIATE(double)
#undef SAFNET_INSTANTIATE

}  // namespace safnet

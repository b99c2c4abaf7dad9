#include "safnet/metrics.hpp"

#include <cmath>
#include <vector>

namespace safnet {

namespace {

TensorD to_domain(const TensorD& x, Domain domain, double mu) {
  return domain == Domain::Mu ? tonemap_mu(x, mu) : x;
}

// Valid (no padding) separable filtering of one plane.
std::vector<double> filter_valid(const double* src, int h, int w,
                                 const std::vector<double>& k) {
  const int kn = static_cast<int>(k.size());
  const int ow = w - kn + 1;
  const int oh = h - kn + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < kn; ++i) acc += k[i] * src[y * w + x + i];
      tmp[y * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < kn; ++i) acc += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace

double psnr(const TensorD& pred, const TensorD& gt, Domain domain, double mu) {
  require_same_shape(pred.shape(), gt.shape(), "psnr");
  if (pred.empty()) throw ShapeError("psnr: empty image");
  const TensorD a = to_domain(pred, domain, mu);
  const TensorD b = to_domain(gt, domain, mu);
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const TensorD& pred, const TensorD& gt, Domain domain, double mu,
            const SsimOptions& opt) {
  require_same_shape(pred.shape(), gt.shape(), "ssim");
  const Shape s = pred.shape();
  if (s.h < opt.window || s.w < opt.window) {
    throw ShapeError("ssim: image " + s.str() + " smaller than the " +
                     std::to_string(opt.window) + "px window");
  }
  const TensorD a = to_domain(pred, domain, mu);
  const TensorD b = to_domain(gt, domain, mu);

  std::vector<double> k(opt.window);
  double ksum = 0;
  for (int i = 0; i < opt.window; ++i) {
    const double d = i - (opt.window - 1) / 2.0;
    k[i] = std::exp(-d * d / (2 * opt.sigma * opt.sigma));
    ksum += k[i];
  }
  for (auto& v : k) v /= ksum;

  const double c1 = opt.k1 * opt.k1;
  const double c2 = opt.k2 * opt.k2;
  const std::size_t plane = s.plane();
  std::vector<double> aa(plane), bb(plane), ab(plane);
  double total = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* pa = a.plane(n, c);
      const double* pb = b.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        aa[i] = pa[i] * pa[i];
        bb[i] = pb[i] * pb[i];
        ab[i] = pa[i] * pb[i];
      }
      const auto ma = filter_valid(pa, s.h, s.w, k);
      const auto mb = filter_valid(pb, s.h, s.w, k);
      const auto saa = filter_valid(aa.data(), s.h, s.w, k);
      const auto sbb = filter_valid(bb.data(), s.h, s.w, k);
      const auto sab = filter_valid(ab.data(), s.h, s.w, k);
      double acc = 0;
      for (std::size_t i = 0; i < ma.size(); ++i) {
        const double va = saa[i] - ma[i] * ma[i];
        const double vb = sbb[i] - mb[i] * mb[i];
        const double cov = sab[i] - ma[i] * mb[i];
        acc += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) /
               ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
      }
      total += acc / static_cast<double>(ma.size());
    }
  }
  return total / (static_cast<double>(s.n) * s.c);
}

MetricReport evaluate(const LinearImage& pred, const LinearImage& gt, double mu) {
  return {psnr(pred.pixels, gt.pixels, Domain::Mu, mu),
          psnr(pred.pixels, gt.pixels, Domain::Linear, mu),
          ssim(pred.pixels, gt.pixels, Domain::Mu, mu),
          ssim(pred.pixels, gt.pixels, Domain::Linear, mu)};
}

}  // namespace safnet

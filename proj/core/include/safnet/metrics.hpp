#pragma once

#include "safnet/image.hpp"
#include "safnet/radiometry.hpp"

namespace safnet {

enum class Domain { Linear, Mu };

inline constexpr double kPsnrCap = 99.0;

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// 10 log10(1 / MSE) over all elements, capped at kPsnrCap. In the mu domain
// both inputs are clamped to [0, 1] and tonemapped first.
double psnr(const TensorD& pred, const TensorD& gt, Domain domain,
            double mu = kDefaultMu);

// Mean SSIM over every fully contained Gaussian window, per channel, then
// averaged across channels and batch items. Data range 1.
double ssim(const TensorD& pred, const TensorD& gt, Domain domain,
            double mu = kDefaultMu, const SsimOptions& opt = {});

struct MetricReport {
  double psnr_mu = 0;
  double psnr_l = 0;
  double ssim_mu = 0;
  double ssim_l = 0;
};

MetricReport evaluate(const LinearImage& pred, const LinearImage& gt,
                      double mu = kDefaultMu);

}  // namespace safnet

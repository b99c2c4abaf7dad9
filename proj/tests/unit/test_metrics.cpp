#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "safnet/metrics.hpp"

using namespace safnet;
using safnet::testing::random_tensor;

namespace {

// SSIM evaluated window by window with a full 2-D Gaussian.
double ssim_reference(const TensorD& a, const TensorD& b) {
  const int k = 11;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  double g[k][k], total = 0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      g[y][x] = std::exp(-((y - 5) * (y - 5) + (x - 5) * (x - 5)) / (2 * sigma * sigma));
      total += g[y][x];
    }
  double sum = 0;
  long count = 0;
  for (int n = 0; n < a.n(); ++n)
    for (int c = 0; c < a.c(); ++c) {
      double chan = 0;
      long windows = 0;
      for (int y0 = 0; y0 + k <= a.h(); ++y0)
        for (int x0 = 0; x0 + k <= a.w(); ++x0) {
          double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
          for (int y = 0; y < k; ++y)
            for (int x = 0; x < k; ++x) {
              const double w = g[y][x] / total;
              const double va = a.at(n, c, y0 + y, x0 + x), vb = b.at(n, c, y0 + y, x0 + x);
              ma += w * va;
              mb += w * vb;
              saa += w * va * va;
              sbb += w * vb * vb;
              sab += w * va * vb;
            }
          const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
          chan += (2 * ma * mb + c1) * (2 * cov + c2) /
                  ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++windows;
        }
      sum += chan / windows;
      ++count;
    }
  return sum / count;
}

}  // namespace

TEST_CASE("psnr values") {
  const TensorD gt = random_tensor({1, 3, 8, 8}, 1, 0.1, 0.8);
  CHECK(psnr(gt, gt, Domain::Linear) == kPsnrCap);
  CHECK(psnr(gt, gt, Domain::Mu) == kPsnrCap);
  TensorD shifted = gt;
  for (auto& v : shifted.values()) v += 0.1;
  // 10 log10(1 / 0.01)
  CHECK(psnr(shifted, gt, Domain::Linear) == doctest::Approx(20.0).epsilon(1e-12));
  // 10 log10(1 / T(0.01)^2)
  CHECK(psnr(TensorD({1, 3, 4, 4}, 0.01), TensorD({1, 3, 4, 4}), Domain::Mu) ==
        doctest::Approx(6.714248910707784).epsilon(1e-12));
  // Values above one are clamped before the mu-law.
  CHECK(psnr(TensorD({1, 3, 4, 4}, 3.0), TensorD({1, 3, 4, 4}, 1.0), Domain::Mu) == kPsnrCap);
  CHECK_THROWS_AS(psnr(gt, TensorD({1, 3, 8, 9}), Domain::Linear), ShapeError);
}

TEST_CASE("psnr and ssim are symmetric") {
  const TensorD a = random_tensor({1, 3, 20, 24}, 2, 0.0, 1.0);
  const TensorD b = random_tensor({1, 3, 20, 24}, 3, 0.0, 1.0);
  for (Domain d : {Domain::Linear, Domain::Mu}) {
    CHECK(psnr(a, b, d) == psnr(b, a, d));
    CHECK(ssim(a, b, d) == doctest::Approx(ssim(b, a, d)).epsilon(1e-13));
  }
}

TEST_CASE("ssim matches a direct window evaluation") {
  const TensorD a = random_tensor({2, 3, 17, 23}, 4, 0.0, 1.0);
  TensorD b = a;
  const TensorD noise = random_tensor({2, 3, 17, 23}, 5, -0.2, 0.2);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += noise[i];
  CHECK(ssim(a, b, Domain::Linear) == doctest::Approx(ssim_reference(a, b)).epsilon(1e-10));
  CHECK(ssim(a, b, Domain::Mu) ==
        doctest::Approx(ssim_reference(tonemap_mu(a), tonemap_mu(b))).epsilon(1e-10));
}

TEST_CASE("ssim of constant images has a closed form") {
  const double c1 = 0.3, c2 = 0.7;
  const double k1 = 1e-4;
  const double expect = (2 * c1 * c2 + k1) / (c1 * c1 + c2 * c2 + k1);
  CHECK(ssim(TensorD({1, 3, 12, 15}, c1), TensorD({1, 3, 12, 15}, c2), Domain::Linear) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("ssim range and identity") {
  const TensorD a = random_tensor({1, 3, 16, 16}, 6, 0.0, 1.0);
  CHECK(ssim(a, a, Domain::Linear) == doctest::Approx(1.0).epsilon(1e-14));
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    const TensorD b = random_tensor({1, 3, 16, 16}, seed, 0.0, 1.0);
    const double s = ssim(a, b, Domain::Linear);
    CHECK(s < 1.0);
    CHECK(s >= -1.0);
  }
  TensorD inv = a;
  for (auto& v : inv.values()) v = 1.0 - v;
  CHECK(ssim(a, inv, Domain::Linear) < 0.0);
  CHECK_THROWS_AS(ssim(TensorD({1, 3, 10, 40}), TensorD({1, 3, 10, 40}), Domain::Linear),
                  ShapeError);
}

TEST_CASE("evaluate collects all four metrics") {
  const LinearImage a{random_tensor({1, 3, 16, 16}, 20, 0.0, 1.0)};
  const LinearImage b{random_tensor({1, 3, 16, 16}, 21, 0.0, 1.0)};
  const MetricReport r = evaluate(a, b);
  CHECK(r.psnr_mu == psnr(a.pixels, b.pixels, Domain::Mu));
  CHECK(r.psnr_l == psnr(a.pixels, b.pixels, Domain::Linear));
  CHECK(r.ssim_mu == ssim(a.pixels, b.pixels, Domain::Mu));
  CHECK(r.ssim_l == ssim(a.pixels, b.pixels, Domain::Linear));
}

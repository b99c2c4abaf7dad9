#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "safnet/ops.hpp"
#include "safnet/warpgrid.hpp"

using namespace safnet;
using ag::Var;
using safnet::testing::grad_check;
using safnet::testing::random_tensor;

namespace {

TensorD constant_flow(int n, int h, int w, double u, double v) {
  TensorD f({n, 2, h, w});
  for (int b = 0; b < n; ++b) {
    std::fill_n(f.plane(b, 0), f.shape().plane(), u);
    std::fill_n(f.plane(b, 1), f.shape().plane(), v);
  }
  return f;
}

// Reference bilinear lookup with border clamping.
double bilinear(const TensorD& src, int n, int c, double y, double x) {
  const int h = src.h(), w = src.w();
  y = std::clamp(y, 0.0, double(h - 1));
  x = std::clamp(x, 0.0, double(w - 1));
  const int y0 = std::min(int(std::floor(y)), h - 2), x0 = std::min(int(std::floor(x)), w - 2);
  const double ay = y - y0, ax = x - x0;
  return (1 - ay) * (1 - ax) * src.at(n, c, y0, x0) + (1 - ay) * ax * src.at(n, c, y0, x0 + 1) +
         ay * (1 - ax) * src.at(n, c, y0 + 1, x0) + ay * ax * src.at(n, c, y0 + 1, x0 + 1);
}

}  // namespace

TEST_CASE("zero flow is the identity") {
  const TensorD src = random_tensor({2, 3, 5, 7}, 1);
  CHECK(backward_warp(src, TensorD({2, 2, 5, 7})) == src);
}

TEST_CASE("integer flow translates exactly") {
  const TensorD src = random_tensor({1, 2, 8, 9}, 2);
  const TensorD out = backward_warp(src, constant_flow(1, 8, 9, 3, -2));
  for (int c = 0; c < 2; ++c)
    for (int y = 2; y < 8; ++y)
      for (int x = 0; x < 6; ++x) CHECK(out.at(0, c, y, x) == src.at(0, c, y - 2, x + 3));
}

TEST_CASE("fractional flow samples bilinearly and clamps at the border") {
  const TensorD src = random_tensor({2, 2, 6, 5}, 3);
  const TensorD flow = random_tensor({2, 2, 6, 5}, 4, -3.0, 3.0);
  const TensorD out = backward_warp(src, flow);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 5; ++x) {
          const double ref = bilinear(src, n, c, y + flow.at(n, 1, y, x), x + flow.at(n, 0, y, x));
          CHECK(out.at(n, c, y, x) == doctest::Approx(ref).epsilon(1e-14));
        }
}

TEST_CASE("warp rejects mismatched flow") {
  CHECK_THROWS_AS(backward_warp(TensorD({1, 3, 4, 4}), TensorD({1, 2, 4, 5})), ShapeError);
  CHECK_THROWS_AS(backward_warp(TensorD({1, 3, 4, 4}), TensorD({1, 3, 4, 4})), ShapeError);
}

TEST_CASE("warp gradients in source and flow") {
  Var<double> src(random_tensor({2, 3, 7, 6}, 5), true);
  // Fractional offsets keep samples away from integer kinks.
  TensorD fl = random_tensor({2, 2, 7, 6}, 6, -2.0, 2.0);
  for (auto& v : fl.values()) v = std::floor(v) + 0.2 + 0.6 * (v - std::floor(v));
  Var<double> flow(fl, true);
  const Var<double> r(random_tensor({2, 3, 7, 6}, 7));
  const auto res = grad_check({{"src", src}, {"flow", flow}}, [&] {
    return ops::mean_abs_diff(ops::sigmoid(ops::mul(backward_warp(src, flow), r)),
                              Var<double>(TensorD({2, 3, 7, 6})));
  }, 40);
  CHECK_MESSAGE(res.max_rel_error < 1e-5, res.worst);
}

TEST_CASE("single-image warp wrapper") {
  const LinearImage img{random_tensor({1, 3, 6, 6}, 8, 0.0, 1.0)};
  const LinearImage w = backward_warp(img, FlowField::constant(6, 6, 1.0, 0.0));
  CHECK(w.pixels.at(0, 1, 2, 3) == img.pixels.at(0, 1, 2, 4));
  CHECK(w.pixels.at(0, 1, 2, 5) == img.pixels.at(0, 1, 2, 5));  // clamped
}

TEST_CASE("flow upsampling doubles displacements") {
  const FlowField up = upsample_flow2x(FlowField::constant(3, 4, 1.5, -2.0));
  REQUIRE(up.height() == 6);
  REQUIRE(up.width() == 8);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK(up.uv.at(0, 0, y, x) == 3.0);
      CHECK(up.uv.at(0, 1, y, x) == -4.0);
    }
  CHECK_THROWS_AS(upsample_flow2x(Var<double>(TensorD({1, 3, 2, 2}))), ShapeError);
}

TEST_CASE("window grid validation") {
  CHECK_THROWS_AS(WindowGrid::make(512, 512, 100, 100), PartitionError);
  CHECK_THROWS_AS(WindowGrid::make(512, 512, 0, 128), PartitionError);
  const WindowGrid g = WindowGrid::make(512, 256, 128, 64);
  CHECK(g.tiles_y() == 4);
  CHECK(g.tiles_x() == 4);
  CHECK(g.tiles() == 16);
}

TEST_CASE("window partition orders tiles row-major within each image") {
  TensorD x({2, 1, 4, 6});
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 6; ++xx) x.at(n, 0, y, xx) = 100 * n + 10 * y + xx;
  const WindowGrid g = WindowGrid::make(4, 6, 2, 3);
  const TensorD t = window_partition(x, g);
  REQUIRE(t.shape() == Shape{8, 1, 2, 3});
  // image 1, tile row 1, tile col 0 -> batch index 4 + 2
  CHECK(t.at(6, 0, 0, 0) == 100 + 20 + 0);
  CHECK(t.at(6, 0, 1, 2) == 100 + 30 + 2);
  CHECK(t.at(1, 0, 0, 0) == 3);
  CHECK(window_reverse(t, g) == x);
  CHECK_THROWS_AS(window_reverse(TensorD({7, 1, 2, 3}), g), PartitionError);
  CHECK_THROWS_AS(window_partition(TensorD({1, 1, 4, 5}), g), PartitionError);
}

TEST_CASE("partition is a differentiable permutation") {
  Var<double> x(random_tensor({1, 2, 4, 4}, 9), true);
  const WindowGrid g = WindowGrid::make(4, 4, 2, 2);
  const Var<double> r(random_tensor({4, 2, 2, 2}, 10));
  const auto res = grad_check({{"x", x}}, [&] {
    const Var<double> tiles = ops::mul(window_partition(x, g), r);
    return ops::mean_abs_diff(ops::sigmoid(window_reverse(tiles, g)), Var<double>(TensorD({1, 2, 4, 4})));
  }, 32);
  CHECK_MESSAGE(res.max_rel_error < 1e-5, res.worst);
}

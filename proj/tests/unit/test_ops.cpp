#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "safnet/ops.hpp"

using namespace safnet;
using ag::Var;
using safnet::testing::grad_check;
using safnet::testing::random_tensor;

namespace {

// Direct-summation convolution used as the reference.
TensorD naive_conv(const TensorD& x, const TensorD& w, const TensorD* b, ops::ConvOptions o) {
  const Shape xs = x.shape(), ws = w.shape();
  const int k = ws.h;
  const int oh = (xs.h + 2 * o.pad - o.dilation * (k - 1) - 1) / o.stride + 1;
  const int ow = (xs.w + 2 * o.pad - o.dilation * (k - 1) - 1) / o.stride + 1;
  const int cin_g = xs.c / o.groups, cout_g = ws.n / o.groups;
  TensorD out({xs.n, ws.n, oh, ow});
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < ws.n; ++co)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = b ? b->at(0, co, 0, 0) : 0.0;
          const int g = co / cout_g;
          for (int ci = 0; ci < cin_g; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * o.stride - o.pad + ky * o.dilation;
                const int ix = xx * o.stride - o.pad + kx * o.dilation;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                acc += w.at(co, ci, ky, kx) * x.at(n, g * cin_g + ci, iy, ix);
              }
          out.at(n, co, y, xx) = acc;
        }
  return out;
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Smooth scalar probe mean(sigmoid(r * v)) for a fixed random r; the
// sigmoid keeps the absolute value away from its kink.
Var<double> probe(const Var<double>& v, std::uint64_t seed) {
  const Var<double> r(random_tensor(v.shape(), seed));
  return ops::mean_abs_diff(ops::sigmoid(ops::mul(v, r)), Var<double>(TensorD(v.shape())));
}

}  // namespace

TEST_CASE("conv2d matches direct summation") {
  struct Case {
    Shape x;
    int cout, k;
    ops::ConvOptions o;
  };
  const Case cases[] = {
      {{2, 3, 9, 7}, 4, 3, {1, 1, 1, 1}},  {{1, 6, 8, 8}, 6, 3, {2, 1, 1, 1}},
      {{1, 6, 10, 9}, 9, 3, {1, 2, 2, 3}}, {{2, 4, 7, 7}, 2, 1, {1, 0, 1, 1}},
      {{1, 2, 12, 12}, 3, 3, {1, 4, 4, 1}},
  };
  std::uint64_t seed = 10;
  for (const auto& c : cases) {
    const TensorD x = random_tensor(c.x, seed++);
    const TensorD w = random_tensor({c.cout, c.x.c / c.o.groups, c.k, c.k}, seed++);
    const TensorD b = random_tensor({1, c.cout, 1, 1}, seed++);
    const Var<double> y = ops::conv2d(Var<double>(x), Var<double>(w), Var<double>(b), c.o);
    CHECK(max_abs_diff(y.value(), naive_conv(x, w, &b, c.o)) < 1e-12);
    const Var<double> y0 = ops::conv2d(Var<double>(x), Var<double>(w), Var<double>(), c.o);
    CHECK(max_abs_diff(y0.value(), naive_conv(x, w, nullptr, c.o)) < 1e-12);
  }
}

TEST_CASE("conv2d rejects incompatible shapes") {
  const Var<double> x(TensorD({1, 3, 8, 8}));
  CHECK_THROWS_AS(ops::conv2d(x, Var<double>(TensorD({4, 2, 3, 3})), Var<double>(), {}),
                  ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, Var<double>(TensorD({4, 3, 3, 3})),
                              Var<double>(TensorD({1, 3, 1, 1})), {}),
                  ShapeError);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  // Stride-2 4x4 geometry of the decoder output layer.
  const TensorD x = random_tensor({2, 5, 8, 8}, 1);
  const TensorD w = random_tensor({3, 5, 4, 4}, 2);
  const TensorD y = random_tensor({2, 3, 4, 4}, 3);
  const TensorD cx = ops::conv2d(Var<double>(x), Var<double>(w), Var<double>(), {2, 1, 1, 1}).value();
  const TensorD ty = ops::conv_transpose2d(Var<double>(y), Var<double>(w), Var<double>(), 2, 1).value();
  CHECK(ty.shape() == x.shape());
  CHECK(dot(cx, y) == doctest::Approx(dot(x, ty)).epsilon(1e-12));
}

TEST_CASE("conv gradients") {
  Var<double> x(random_tensor({2, 6, 7, 6}, 4), true);
  Var<double> w(random_tensor({6, 2, 3, 3}, 5), true);
  Var<double> b(random_tensor({1, 6, 1, 1}, 6), true);
  const auto r = grad_check({{"x", x}, {"w", w}, {"b", b}}, [&] {
    return probe(ops::conv2d(x, w, b, {2, 2, 2, 3}), 7);
  }, 24);
  CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);

  Var<double> y(random_tensor({1, 4, 5, 5}, 8), true);
  Var<double> wt(random_tensor({4, 3, 4, 4}, 9), true);
  Var<double> bt(random_tensor({1, 3, 1, 1}, 10), true);
  const auto rt = grad_check({{"y", y}, {"w", wt}, {"b", bt}}, [&] {
    return probe(ops::conv_transpose2d(y, wt, bt, 2, 1), 11);
  }, 24);
  CHECK_MESSAGE(rt.max_rel_error < 1e-5, rt.worst);
}

TEST_CASE("pointwise op values") {
  const TensorD xv({1, 2, 1, 2}, std::vector<double>{-2, 3, -1, 0.5});
  const TensorD sv({1, 2, 1, 1}, std::vector<double>{0.25, 0.5});
  const TensorD p = ops::prelu(Var<double>(xv), Var<double>(sv)).value();
  CHECK(p[0] == -0.5);
  CHECK(p[1] == 3);
  CHECK(p[2] == -0.5);
  CHECK(ops::relu(Var<double>(xv)).value()[0] == 0);
  CHECK(ops::sigmoid(Var<double>(xv)).value()[3] == doctest::Approx(1 / (1 + std::exp(-0.5))));
  CHECK(ops::sigmoid(Var<double>(TensorD({1, 1, 1, 1}))).value()[0] == 0.5);
}

TEST_CASE("pointwise and structural gradients") {
  Var<double> x(random_tensor({2, 4, 6, 6}, 20), true);
  Var<double> z(random_tensor({2, 4, 6, 6}, 21), true);
  Var<double> s(random_tensor({1, 4, 1, 1}, 22, 0.1, 0.5), true);
  const auto r = grad_check({{"x", x}, {"z", z}, {"s", s}}, [&] {
    const Var<double> a = ops::prelu(x, s);
    const Var<double> b = ops::sigmoid(ops::sub(z, x));
    const Var<double> c = ops::channel_shuffle(ops::concat<double>({a, b, ops::mul(a, z)}), 3);
    const Var<double> d = ops::slice(ops::upsample2x(c), 2, 5);
    const Var<double> e = ops::crop(ops::avg_pool2x(ops::add(d, ops::scale(d, 0.5))), 1, 0, 4, 5);
    return probe(e, 23);
  }, 32, 1, 1e-6, 1e-5);  // entries near zero are compared absolutely
  CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
}

TEST_CASE("channel shuffle interleaves groups") {
  TensorD t({1, 6, 1, 1});
  for (int c = 0; c < 6; ++c) t[c] = c;
  const TensorD s = ops::channel_shuffle(Var<double>(t), 3).value();
  const double expect[6] = {0, 2, 4, 1, 3, 5};
  for (int c = 0; c < 6; ++c) CHECK(s[c] == expect[c]);
  CHECK_THROWS_AS(ops::channel_shuffle(Var<double>(TensorD({1, 5, 1, 1})), 3), ShapeError);
}

TEST_CASE("upsample2x uses half-pixel centres with edge clamping") {
  const TensorD x = random_tensor({1, 2, 3, 4}, 30);
  const TensorD u = ops::upsample2x(x);
  REQUIRE(u.shape() == Shape{1, 2, 6, 8});
  auto sample = [&](int c, double fy, double fx) {
    fy = std::clamp(fy, 0.0, 2.0);
    fx = std::clamp(fx, 0.0, 3.0);
    const int y0 = std::min(int(fy), 1), x0 = std::min(int(fx), 2);
    const double ay = fy - y0, ax = fx - x0;
    return (1 - ay) * ((1 - ax) * x.at(0, c, y0, x0) + ax * x.at(0, c, y0, x0 + 1)) +
           ay * ((1 - ax) * x.at(0, c, y0 + 1, x0) + ax * x.at(0, c, y0 + 1, x0 + 1));
  };
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 6; ++y)
      for (int xx = 0; xx < 8; ++xx)
        CHECK(u.at(0, c, y, xx) ==
              doctest::Approx(sample(c, (y + 0.5) / 2 - 0.5, (xx + 0.5) / 2 - 0.5)));
}

TEST_CASE("avg_pool2x averages 2x2 blocks") {
  const TensorD x = random_tensor({1, 1, 4, 6}, 31);
  const TensorD p = ops::avg_pool2x(x);
  REQUIRE(p.shape() == Shape{1, 1, 2, 3});
  CHECK(p.at(0, 0, 1, 2) == doctest::Approx((x.at(0, 0, 2, 4) + x.at(0, 0, 2, 5) +
                                             x.at(0, 0, 3, 4) + x.at(0, 0, 3, 5)) / 4));
  CHECK_THROWS_AS(ops::avg_pool2x(TensorD({1, 1, 3, 4})), ShapeError);
}

TEST_CASE("weighted_sum and mean_abs_diff") {
  const Var<double> a(TensorD({1, 1, 1, 2}, std::vector<double>{1, -1}));
  const Var<double> b(TensorD({1, 1, 1, 2}, std::vector<double>{0, 1}));
  const Var<double> m = ops::mean_abs_diff(a, b);
  CHECK(m.value()[0] == 1.5);
  CHECK(ops::weighted_sum<double>({{m, 2.0}, {m, 0.5}}).value()[0] == 3.75);
  CHECK_THROWS_AS(ops::weighted_sum<double>({{a, 1.0}}), ShapeError);
}

#include "doctest.h"
#include "safnet/tensor.hpp"

using namespace safnet;

TEST_CASE("shape extents") {
  const Shape s{2, 3, 4, 5};
  CHECK(s.numel() == 120);
  CHECK(s.plane() == 20);
  CHECK(s.str() == "[2x3x4x5]");
}

TEST_CASE("NCHW indexing is row-major") {
  TensorD t({2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = double(i);
  CHECK(t.at(0, 0, 0, 1) == 1);
  CHECK(t.at(0, 0, 1, 0) == 5);
  CHECK(t.at(0, 1, 0, 0) == 20);
  CHECK(t.at(1, 0, 0, 0) == 60);
  CHECK(t.plane(1, 2)[0] == 100);
}

TEST_CASE("construction validates the data size") {
  CHECK_THROWS_AS(TensorD({1, 1, 2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(TensorD(Shape{1, -1, 2, 2}), ShapeError);
  CHECK_THROWS_AS(TensorD({1, 1, 2, 2}).reshaped({1, 1, 3, 1}), ShapeError);
}

TEST_CASE("channel slice and concat are inverse") {
  TensorD t({2, 5, 3, 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = double(i) * 0.5;
  const TensorD a = slice_channels(t, 0, 2);
  const TensorD b = slice_channels(t, 2, 3);
  CHECK(a.shape() == Shape{2, 2, 3, 3});
  const std::array<TensorD, 2> parts{a, b};
  CHECK(concat_channels<double>(parts) == t);
  CHECK_THROWS_AS(slice_channels(t, 4, 2), ShapeError);
}

TEST_CASE("batch slice and concat are inverse") {
  TensorD t({3, 2, 2, 2});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = double(i);
  const std::array<TensorD, 2> parts{slice_batch(t, 0, 1), slice_batch(t, 1, 2)};
  CHECK(concat_batch<double>(parts) == t);
}

TEST_CASE("accumulate and cast") {
  TensorD a({1, 1, 1, 3}, std::vector<double>{1, 2, 3});
  a += TensorD({1, 1, 1, 3}, 0.5);
  CHECK(a[2] == 3.5);
  CHECK_THROWS_AS(a += TensorD({1, 1, 3, 1}), ShapeError);
  const TensorF f = a.cast<float>();
  CHECK(f[0] == 1.5f);
}

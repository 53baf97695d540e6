#include <gtest/gtest.h>

#include "exqnet/tensor.hpp"
#include "support.hpp"

using namespace exqnet;

TEST(Create, ZeroFill) {
  Tensor<float> t({2, 2}, 0.0f);
  EXPECT_EQ(t.dims(), (Dims{2, 2}));
  for (float v : t.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Create, InputGeometryElementCount) {
  Tensor<float> t({1, 3, 224, 224}, 0.5f);
  EXPECT_EQ(t.size(), 150528u);
  for (float v : t.data()) ASSERT_EQ(v, 0.5f);
}

TEST(Create, SeededGeneratorRepeats) {
  Rng a(7), b(7);
  auto x = Tensor<float>::uniform({3}, a);
  auto y = Tensor<float>::uniform({3}, b);
  EXPECT_EQ(x, y);
}

TEST(Create, ZeroDimensionRejected) {
  EXPECT_THROW(Tensor<float>({2, 0}), DimensionError);
  EXPECT_THROW(Tensor<float>(Dims{}), DimensionError);
  EXPECT_THROW(Tensor<float>({1, 1, 1, 1, 1}), DimensionError);
}

TEST(Create, DataLengthMustMatch) {
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Matmul, IdentityLeft) {
  Tensor<double> id({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> m({2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(matmul(id, m), m);
}

TEST(Matmul, HandExpansion) {
  Tensor<double> a({1, 2}, std::vector<double>{1, 2});
  Tensor<double> b({2, 1}, std::vector<double>{3, 4});
  auto c = matmul(a, b);
  EXPECT_EQ(c.dims(), (Dims{1, 1}));
  EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, ShapeLaw) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
    auto c = matmul(Tensor<double>::uniform({m, k}, rng), Tensor<double>::uniform({k, n}, rng));
    EXPECT_EQ(c.dims(), (Dims{m, n}));
  }
}

TEST(Matmul, InnerMismatch) {
  EXPECT_THROW(matmul(Tensor<float>({2, 3}), Tensor<float>({2, 3})), ShapeError);
}

TEST(Matmul, Associative) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), l = 1 + rng.below(6),
                      n = 1 + rng.below(6);
    auto a = Tensor<double>::uniform({m, k}, rng);
    auto b = Tensor<double>::uniform({k, l}, rng);
    auto c = Tensor<double>::uniform({l, n}, rng);
    EXPECT_LT(support::max_rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-5);
  }
}

TEST(Matmul, TransposedOperandsAgree) {
  Rng rng(3);
  const std::size_t m = 4, n = 5, k = 3;
  auto a = Tensor<double>::uniform({m, k}, rng);
  auto b = Tensor<double>::uniform({k, n}, rng);
  Tensor<double> at({k, m}), bt({n, k});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at.at(p, i) = a.at(i, p);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt.at(j, p) = b.at(p, j);
  const auto ref = matmul(a, b);
  Tensor<double> c({m, n});
  gemm(Trans::kYes, Trans::kYes, m, n, k, at.ptr(), m, bt.ptr(), k, c.ptr(), n, false);
  EXPECT_EQ(c, ref);
}

TEST(Matmul, DeterministicAcrossThreadCounts) {
  Rng rng(4);
  auto a = Tensor<float>::uniform({17, 33}, rng);
  auto b = Tensor<float>::uniform({33, 9}, rng);
  set_num_threads(1);
  auto c1 = matmul(a, b);
  set_num_threads(4);
  auto c4 = matmul(a, b);
  set_num_threads(1);
  EXPECT_EQ(c1, c4);
}

TEST(Im2col, PointwiseIsReshape) {
  Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  auto cols = im2col(x, 1, 1, 1, 0);
  EXPECT_EQ(cols.dims(), (Dims{1, 4}));
  EXPECT_EQ(cols.vec(), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Im2col, SlidingWindowFirstColumn) {
  Tensor<float> x({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto cols = im2col(x, 2, 2, 1, 0);
  ASSERT_EQ(cols.dims(), (Dims{4, 4}));
  EXPECT_EQ(cols.at(0, 0), 1.0f);
  EXPECT_EQ(cols.at(1, 0), 2.0f);
  EXPECT_EQ(cols.at(2, 0), 4.0f);
  EXPECT_EQ(cols.at(3, 0), 5.0f);
  // Last window is (5,6,8,9).
  EXPECT_EQ(cols.at(0, 3), 5.0f);
  EXPECT_EQ(cols.at(3, 3), 9.0f);
}

TEST(Im2col, InputGeometry) {
  Tensor<float> x({2, 3, 224, 224}, 1.0f);
  EXPECT_EQ(im2col(x, 1, 1, 1, 0).dims(), (Dims{3, 50176 * 2}));
}

TEST(Im2col, ZeroPadding) {
  Tensor<float> x({1, 1, 1, 1}, 7.0f);
  auto cols = im2col(x, 3, 3, 1, 1);
  ASSERT_EQ(cols.dims(), (Dims{9, 1}));
  for (std::size_t r = 0; r < 9; ++r) EXPECT_EQ(cols.at(r, 0), r == 4 ? 7.0f : 0.0f);
}

TEST(Im2col, KernelLargerThanPaddedInput) {
  EXPECT_THROW(im2col(Tensor<float>({1, 1, 2, 2}), 3, 3, 1, 0), ShapeError);
}

TEST(Col2im, PointwiseRoundTrip) {
  Rng rng(5);
  auto x = Tensor<double>::uniform({2, 3, 4, 5}, rng);
  ConvGeometry g{3, 4, 5, 1, 1, 1, 0};
  EXPECT_EQ(col2im(im2col(x, 1, 1, 1, 0), 2, g), x);
}

TEST(Col2im, OverlapCount) {
  Tensor<double> ones({1, 1, 3, 3}, 1.0);
  ConvGeometry g{1, 3, 3, 2, 2, 1, 0};
  auto back = col2im(im2col(ones, 2, 2, 1, 0), 1, g);
  EXPECT_EQ(back.at(0, 0, 1, 1), 4.0);
  EXPECT_EQ(back.at(0, 0, 0, 0), 1.0);
  EXPECT_EQ(back.at(0, 0, 0, 1), 2.0);
}

TEST(Col2im, GeometryMismatch) {
  ConvGeometry g{1, 3, 3, 2, 2, 1, 0};
  EXPECT_THROW(col2im(Tensor<double>({4, 3}), 1, g), ShapeError);
}

TEST(Col2im, AdjointIdentityRandomShapes) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    ConvGeometry g;
    g.channels = 1 + rng.below(4);
    g.height = 1 + rng.below(8);
    g.width = 1 + rng.below(8);
    g.pad = rng.below(3);
    g.kernel_h = 1 + rng.below(std::min<std::size_t>(g.height + 2 * g.pad, 5));
    g.kernel_w = 1 + rng.below(std::min<std::size_t>(g.width + 2 * g.pad, 5));
    g.stride = 1 + rng.below(3);
    const std::size_t batch = 1 + rng.below(3);
    auto x = Tensor<double>::uniform({batch, g.channels, g.height, g.width}, rng);
    auto cols = im2col(x, g.kernel_h, g.kernel_w, g.stride, g.pad);
    auto y = Tensor<double>::uniform(cols.dims(), rng);
    const double lhs = dot(cols, y);
    const double rhs = dot(x, col2im(y, batch, g));
    EXPECT_LE(std::abs(lhs - rhs), 1e-6 * std::max({1.0, std::abs(lhs), std::abs(rhs)}));
  }
}

TEST(Rng, SameSeedSameStream) {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next(), b.next());
}

TEST(ParallelFor, EachIndexOnce) {
  set_num_threads(3);
  std::vector<int> hits(101, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
  set_num_threads(1);
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Tensor, NonFiniteIsSurfaced) {
  Tensor<float> t({2}, std::vector<float>{1.0f, std::nanf("")});
  EXPECT_THROW(t.check_finite("test"), NumericError);
  Tensor<float> big({1, 1}, std::vector<float>{3e38f});
  EXPECT_THROW(matmul(big, Tensor<float>({1, 1}, 10.0f)), NumericError);
}

#include <gtest/gtest.h>

#include "iff/scene.hpp"
#include "oracles.hpp"

using namespace iff;

namespace {

Tensor random_tensor(Rng& rng, Shape s) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST(TensorValue, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
  EXPECT_THROW(Tensor(Shape{}), std::invalid_argument);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1, 1}), std::invalid_argument);
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.reshaped({6, 4}).shape(), (Shape{6, 4}));
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(1);
  const Tensor x = random_tensor(rng, {1, 5, 7});
  const ConvFilter f(Tensor({1, 1, 1, 1}, std::vector<double>{1.0}));
  EXPECT_EQ(conv2d(x, f), x);
  EXPECT_EQ(conv2d(x, f, PaddingMode::Circular), x);
}

TEST(Conv2d, ScalingKernel) {
  const ConvFilter f(Tensor({1, 1, 1, 1}, std::vector<double>{2.0}));
  EXPECT_EQ(conv2d(Tensor::ones({1, 3, 3}), f), Tensor({1, 3, 3}, 2.0));
}

TEST(Conv2d, MatchesDirectSummation) {
  Rng rng(2);
  const Tensor x = random_tensor(rng, {2, 5, 5});
  const Tensor w = random_tensor(rng, {3, 2, 3, 3});
  const Tensor b = random_tensor(rng, {3});
  for (bool circ : {false, true}) {
    const auto pad = circ ? PaddingMode::Circular : PaddingMode::Zero;
    EXPECT_LE(max_abs_diff(conv2d(x, ConvFilter(w, b), pad), oracle::conv(x, w, &b, circ)), 1e-10);
    EXPECT_LE(max_abs_diff(conv2d(x, ConvFilter(w), pad), oracle::conv(x, w, nullptr, circ)), 1e-10);
  }
}

TEST(Conv2d, AllSmallShapesBothPaddings) {
  Rng rng(3);
  for (std::size_t H = 1; H <= 8; ++H)
    for (std::size_t W = 1; W <= 8; W += 3)
      for (std::size_t C = 1; C <= 4; ++C)
        for (std::size_t k = 1; k <= std::min(H, W); k += 2)
          for (bool circ : {false, true}) {
            const Tensor x = random_tensor(rng, {C, H, W});
            const Tensor w = random_tensor(rng, {2, C, k, k});
            const auto got = conv2d(x, ConvFilter(w), circ ? PaddingMode::Circular : PaddingMode::Zero);
            ASSERT_LE(max_abs_diff(got, oracle::conv(x, w, nullptr, circ)), 1e-8) << H << "x" << W << "x" << C << " k" << k;
          }
}

TEST(Conv2d, Linearity) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const Tensor x1 = random_tensor(rng, {3, 6, 5}), x2 = random_tensor(rng, {3, 6, 5});
    const ConvFilter f(random_tensor(rng, {2, 3, 3, 3}));
    const double a = rng.normal(), b = rng.normal();
    for (auto pad : {PaddingMode::Zero, PaddingMode::Circular}) {
      const Tensor lhs = conv2d(axpy(a, x1, scaled(x2, b)), f, pad);
      const Tensor rhs = axpy(a, conv2d(x1, f, pad), scaled(conv2d(x2, f, pad), b));
      EXPECT_LE(max_abs_diff(lhs, rhs), 1e-9 * std::max(1.0, frobenius_norm(rhs)));
    }
  }
}

TEST(Conv2d, RejectsBadShapesAndValues) {
  const Tensor x = Tensor::ones({2, 4, 4});
  EXPECT_THROW(conv2d(x, ConvFilter(Tensor::ones({1, 3, 3, 3}))), std::invalid_argument);
  EXPECT_THROW(conv2d(x, ConvFilter(Tensor::ones({1, 2, 2, 2}))), std::invalid_argument);
  EXPECT_THROW(conv2d(Tensor::ones({2, 2, 2}), ConvFilter(Tensor::ones({1, 2, 3, 3}))), std::invalid_argument);
  Tensor bad = x;
  bad[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(conv2d(bad, ConvFilter(Tensor::ones({1, 2, 1, 1}))), std::domain_error);
  bad[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(conv2d(bad, ConvFilter(Tensor::ones({1, 2, 1, 1}))), std::domain_error);
}

TEST(Conv2d, CircularWrapsWhereZeroPaddingDoesNot) {
  Tensor x({1, 3, 3});
  x.at(0, 0, 0) = 1.0;
  Tensor w({1, 1, 3, 3});
  w[8] = 1.0;  // picks x[r+1, c+1]
  const auto zero = conv2d(x, ConvFilter(w), PaddingMode::Zero);
  const auto circ = conv2d(x, ConvFilter(w), PaddingMode::Circular);
  EXPECT_EQ(zero.at(0, 2, 2), 0.0);
  EXPECT_EQ(circ.at(0, 2, 2), 1.0);
}

TEST(LeakyRelu, Definition) {
  const Tensor y = leaky_relu(Tensor({2}, std::vector<double>{2.0, -3.0}), 0.1);
  EXPECT_DOUBLE_EQ(y[0], 2.0);
  EXPECT_DOUBLE_EQ(y[1], -0.3);
  const Tensor pos({2, 2}, std::vector<double>{0.0, 1.0, 2.5, 7.0});
  EXPECT_EQ(leaky_relu(pos, 0.3), pos);
  EXPECT_EQ(leaky_relu(Tensor::zeros({3, 3}), 0.5), Tensor::zeros({3, 3}));
}

TEST(LeakyRelu, SlopeOutsideOpenIntervalRejected) {
  const Tensor x = Tensor::ones({2});
  for (double s : {0.0, 1.0, -0.1, 1.5, std::nan("")}) EXPECT_THROW(leaky_relu(x, s), std::invalid_argument) << s;
}

TEST(LeakyRelu, NeverIncreasesEnergy) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const Tensor x = random_tensor(rng, {4, 4});
    for (double s : {0.01, 0.1, 0.5, 0.9}) EXPECT_LE(frobenius_norm(leaky_relu(x, s)), frobenius_norm(x));
  }
}

TEST(FrobeniusNorm, Examples) {
  EXPECT_DOUBLE_EQ(frobenius_norm(Tensor({1, 2}, std::vector<double>{3.0, 4.0})), 5.0);
  EXPECT_EQ(frobenius_norm(Tensor::zeros({4, 4})), 0.0);
  Rng rng(6);
  const Tensor x = random_tensor(rng, {8, 8});
  double s = 0.0;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) s += x[r * 8 + c] * x[r * 8 + c];
  EXPECT_NEAR(frobenius_norm(x), std::sqrt(s), 1e-12);
}

TEST(FrobeniusNorm, SumAndDifferenceBound) {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const Tensor x = random_tensor(rng, {5, 3}), y = random_tensor(rng, {5, 3});
    const double nx = frobenius_norm(x), ny = frobenius_norm(y);
    const double rhs = nx * nx + 2 * nx * ny + ny * ny;
    EXPECT_LE(std::pow(frobenius_norm(axpy(1.0, x, y)), 2), rhs * (1 + 1e-12));
    EXPECT_LE(std::pow(frobenius_norm(axpy(-1.0, y, x)), 2), rhs * (1 + 1e-12));
  }
}

TEST(Axpy, Examples) {
  Rng rng(8);
  const Tensor x = random_tensor(rng, {3, 2}), y = random_tensor(rng, {3, 2});
  EXPECT_EQ(axpy(0.0, x, y), y);
  EXPECT_EQ(axpy(1.0, x, Tensor::zeros({3, 2})), x);
  EXPECT_EQ(axpy(2.0, Tensor::ones({2, 2}), Tensor::ones({2, 2})), Tensor({2, 2}, 3.0));
  EXPECT_THROW(axpy(1.0, x, Tensor::zeros({2, 3})), std::invalid_argument);
}

TEST(Pooling, AverageOfEachBlock) {
  Tensor x({1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor p = avg_pool2(x);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 2}));
  EXPECT_DOUBLE_EQ(p[0], 3.5);
  EXPECT_DOUBLE_EQ(p[1], 5.5);
  EXPECT_THROW(avg_pool2(Tensor::ones({1, 3, 4})), std::invalid_argument);
}

TEST(Channels, SliceAndSum) {
  Tensor x({3, 1, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(slice_channels(x, 1, 3), Tensor({2, 1, 2}, std::vector<double>{3, 4, 5, 6}));
  EXPECT_EQ(channel_sum(x), Tensor({1, 2}, std::vector<double>{9, 12}));
  EXPECT_THROW(slice_channels(x, 2, 2), std::invalid_argument);
}

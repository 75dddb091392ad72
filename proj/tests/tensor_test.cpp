#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"

namespace fd2 {
namespace {

using testing::uniform;

TEST(Shape, NumelAndPlane) {
  const Shape s{2, 3, 4, 5};
  EXPECT_EQ(s.numel(), 120u);
  EXPECT_EQ(s.plane(), 20u);
  EXPECT_EQ(s.str(), "(2,3,4,5)");
}

TEST(Tensor, RejectsDataOfWrongLength) {
  EXPECT_THROW(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, IndexingIsRowMajorNchw) {
  Tensor<double> t(Shape{2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  EXPECT_EQ(t(1, 2, 3, 4), 119.0);
  EXPECT_EQ(t(0, 1, 0, 0), 20.0);
  EXPECT_EQ(t.plane(1, 0)[0], 60.0);
}

TEST(Tensor, ItemRequiresOneElement) {
  EXPECT_EQ(Tensor<double>::scalar(3.5).item(), 3.5);
  EXPECT_THROW((void)Tensor<double>(Shape{1, 1, 1, 2}).item(), ShapeError);
}

TEST(Tensor, CastRoundTripsRepresentableValues) {
  const Tensor<double> t(Shape{1, 1, 1, 3}, std::vector<double>{0.5, -2.0, 8.0});
  EXPECT_EQ(t.cast<float>().cast<double>().vec(), t.vec());
}

TEST(Rng, SameSeedSameStream) {
  Rng a(7), b(7), c(8);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_NE(Rng(7).next(), c.next());
}

TEST(Rng, BelowStaysInRange) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.below(7), 7u);
}

// ---------------------------------------------------------------------------
// Pointwise

TEST(Pointwise, SigmoidOfZeroIsHalf) {
  const auto y = pointwise(Tensor<double>(Shape{2, 3, 4, 4}), PointwiseKind::sigmoid);
  for (double v : y.data()) EXPECT_EQ(v, 0.5);
}

TEST(Pointwise, SigmoidStaysInsideOpenInterval) {
  Tensor<double> x(Shape{1, 1, 1, 6}, std::vector<double>{-30, -5, -1e-3, 1e-3, 5, 30});
  for (double v : pointwise(x, PointwiseKind::sigmoid).data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Pointwise, ReluOfNegativesIsZero) {
  const auto x = uniform(Shape{2, 3, 5, 5}, 1, -2.0, -0.1);
  for (double v : pointwise(x, PointwiseKind::relu).data()) EXPECT_EQ(v, 0.0);
}

TEST(Pointwise, AddCommutes) {
  const auto a = uniform(Shape{2, 3, 5, 5}, 1);
  const auto b = uniform(Shape{2, 3, 5, 5}, 2);
  EXPECT_EQ(pointwise(a, b, PointwiseKind::add).vec(), pointwise(b, a, PointwiseKind::add).vec());
}

TEST(Pointwise, BroadcastsSpatialPlaneOverChannels) {
  const auto a = uniform(Shape{2, 3, 4, 4}, 1);
  const auto plane = uniform(Shape{1, 1, 4, 4}, 2);
  const auto y = pointwise(a, plane, PointwiseKind::mul);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y(n, c, i, j), a(n, c, i, j) * plane(0, 0, i, j));
}

TEST(Pointwise, BroadcastsChannelVectorOverSpace) {
  const auto a = uniform(Shape{2, 3, 4, 4}, 1);
  const auto gate = uniform(Shape{2, 3, 1, 1}, 2);
  const auto y = pointwise(a, gate, PointwiseKind::mul);
  EXPECT_EQ(y(1, 2, 3, 1), a(1, 2, 3, 1) * gate(1, 2, 0, 0));
}

TEST(Pointwise, IncompatibleShapesThrow) {
  EXPECT_THROW(pointwise(Tensor<double>(Shape{1, 2, 4, 4}), Tensor<double>(Shape{1, 2, 3, 4}), PointwiseKind::add),
               ShapeError);
}

// ---------------------------------------------------------------------------
// Pools

TEST(ChannelPool, ConstantInputGivesConstant) {
  const Tensor<double> x(Shape{2, 5, 3, 3}, 1.75);
  for (PoolMode m : {PoolMode::avg, PoolMode::max}) {
    const auto y = channel_pool(x, m);
    EXPECT_EQ(y.shape(), (Shape{2, 1, 3, 3}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.75);
  }
}

TEST(ChannelPool, OneAndThreeGiveTwoAndThree) {
  Tensor<double> x(Shape{1, 2, 1, 1}, std::vector<double>{1.0, 3.0});
  EXPECT_EQ(channel_pool(x, PoolMode::avg).item(), 2.0);
  EXPECT_EQ(channel_pool(x, PoolMode::max).item(), 3.0);
}

TEST(ChannelPool, MatchesReferenceLoop) {
  const auto x = uniform(Shape{2, 7, 5, 6}, 9);
  const auto avg = channel_pool(x, PoolMode::avg);
  const auto mx = channel_pool(x, PoolMode::max);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        double s = 0, m = -1e300;
        for (std::size_t c = 0; c < 7; ++c) {
          s += x(n, c, i, j);
          m = std::max(m, x(n, c, i, j));
        }
        EXPECT_NEAR(avg(n, 0, i, j), s / 7.0, 1e-12);
        EXPECT_EQ(mx(n, 0, i, j), m);
      }
    }
  }
}

TEST(GlobalAvgPool, ConstantPerChannel) {
  Tensor<double> x(Shape{1, 2, 3, 3});
  std::fill(x.plane(0, 0), x.plane(0, 0) + 9, 4.0);
  std::fill(x.plane(0, 1), x.plane(0, 1) + 9, -1.5);
  const auto y = global_avg_pool(x);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 4.0);
  EXPECT_DOUBLE_EQ(y[1], -1.5);
}

TEST(GlobalAvgPool, TwoByTwoPlane) {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(global_avg_pool(x).item(), 2.5);
}

TEST(GlobalAvgPool, MatchesReferenceSummation) {
  const auto x = uniform(Shape{3, 4, 7, 5}, 4);
  const auto y = global_avg_pool(x);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t c = 0; c < 4; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 5; ++j) s += x(n, c, i, j);
      EXPECT_NEAR(y(n, c, 0, 0), s / 35.0, 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// Channel split and concat

TEST(ChannelSplit, HalfOfSixtyFour) {
  auto [a, b] = channel_split(Tensor<double>(Shape{1, 64, 2, 2}), 0.5);
  EXPECT_EQ(a.shape().c, 32u);
  EXPECT_EQ(b.shape().c, 32u);
}

TEST(ChannelSplit, RoundsHalfUp) {
  auto [a, b] = channel_split(Tensor<double>(Shape{1, 10, 2, 2}), 0.25);
  EXPECT_EQ(a.shape().c, 3u);
  EXPECT_EQ(b.shape().c, 7u);
}

TEST(ChannelSplit, ConcatOfSplitIsExact) {
  const auto x = uniform(Shape{2, 9, 3, 4}, 5);
  for (double alpha : {0.2, 0.5, 0.75}) {
    auto [a, b] = channel_split(x, alpha);
    EXPECT_EQ(concat_channels<double>({&a, &b}).vec(), x.vec());
  }
}

TEST(ChannelSplit, DegenerateSplitThrows) {
  EXPECT_THROW(channel_split(Tensor<double>(Shape{1, 4, 2, 2}), 0.05), ValueError);
  EXPECT_THROW(channel_split(Tensor<double>(Shape{1, 4, 2, 2}), 0.95), ValueError);
  EXPECT_THROW(channel_split(Tensor<double>(Shape{1, 1, 2, 2}), 0.5), ValueError);
  EXPECT_THROW(channel_split(Tensor<double>(Shape{1, 4, 2, 2}), 1.0), ValueError);
}

TEST(ChannelSplit, AccountingHoldsAcrossWidths) {
  for (std::size_t c = 2; c <= 128; ++c) {
    for (double alpha : {0.25, 0.5, 0.75}) {
      std::size_t k = 0;
      try {
        k = split_point(c, alpha);
      } catch (const ValueError&) {
        continue;
      }
      EXPECT_EQ(k, static_cast<std::size_t>(std::floor(alpha * static_cast<double>(c) + 0.5)));
      EXPECT_EQ(k + (c - k), c);
    }
  }
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BnState {
  Tensor<double> gamma, beta, mean, var;
  explicit BnState(std::size_t c)
      : gamma(Shape{1, c, 1, 1}, 1.0), beta(Shape{1, c, 1, 1}), mean(Shape{1, c, 1, 1}), var(Shape{1, c, 1, 1}, 1.0) {}
};

TEST(BatchNorm, EvalWithUnitStatisticsIsIdentity) {
  BnState st(3);
  const auto x = uniform(Shape{2, 3, 4, 4}, 1, -0.2, 0.2);
  const auto y = batchnorm(x, st.gamma, st.beta, st.mean, st.var, {NormMode::eval, 0.1, 1e-5});
  EXPECT_LE(max_abs_diff(x, y), 1e-6);
}

TEST(BatchNorm, TrainOutputIsStandardized) {
  BnState st(4);
  const auto x = uniform(Shape{3, 4, 6, 6}, 2, -4.0, 6.0);
  const auto y = batchnorm(x, st.gamma, st.beta, st.mean, st.var, {NormMode::train, 0.1, 1e-5});
  auto [mean, var] = batch_moments(y);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_LE(std::abs(mean[c]), 1e-5);
    EXPECT_NEAR(var[c], 1.0, 1e-5);
  }
}

TEST(BatchNorm, TrainUpdatesRunningStatistics) {
  BnState st(2);
  const auto x = uniform(Shape{2, 2, 3, 3}, 3);
  auto [mean, var] = batch_moments(x);
  (void)batchnorm(x, st.gamma, st.beta, st.mean, st.var, {NormMode::train, 0.25, 1e-5});
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(st.mean[c], 0.25 * mean[c], 1e-12);
    EXPECT_NEAR(st.var[c], 0.75 + 0.25 * var[c] * 18.0 / 17.0, 1e-12);
  }
}

TEST(BatchNorm, NonPositiveEpsThrows) {
  BnState st(1);
  EXPECT_THROW(batchnorm(Tensor<double>(Shape{1, 1, 2, 2}), st.gamma, st.beta, st.mean, st.var,
                         {NormMode::train, 0.1, 0.0}),
               ValueError);
}

TEST(BatchNorm, ParameterShapeMismatchThrows) {
  BnState st(2);
  EXPECT_THROW(batchnorm(Tensor<double>(Shape{1, 3, 2, 2}), st.gamma, st.beta, st.mean, st.var, {}), ShapeError);
}

TEST(Finite, NonFiniteConvInputThrows) {
  Tensor<double> x(Shape{1, 1, 3, 3});
  x[4] = std::nan("");
  const auto spec = ConvSpec::square(1, 1, 1);
  EXPECT_THROW(conv2d(x, spec, Tensor<double>(spec.weight_shape(), 1.0)), ValueError);
}

}  // namespace
}  // namespace fd2

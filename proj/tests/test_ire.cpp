#include <gtest/gtest.h>

#include <cmath>

#include "restnet/ire.hpp"
#include "restnet/seat.hpp"
#include "test_support.hpp"

using namespace restnet;
using restnet::testing::fd_gradient_error;
using restnet::testing::max_abs_diff;
using restnet::testing::project;
using restnet::testing::random_tensor;
using T = Tensor<double>;

namespace {

// Direct per-pair cosine with the zero-norm guard and ReLU.
double cosine_oracle(const T& s, Index si, const T& q, Index qi) {
  const Index d = s.dim(0);
  const Index ns = s.dim(1) * s.dim(2), nq = q.dim(1) * q.dim(2);
  double dot = 0, ss = 0, qq = 0;
  for (Index c = 0; c < d; ++c) {
    const double a = s.data()[c * ns + si];
    const double b = q.data()[c * nq + qi];
    dot += a * b;
    ss += a * a;
    qq += b * b;
  }
  const double ns_ = std::max(std::sqrt(ss), kZeroNormGuard);
  const double nq_ = std::max(std::sqrt(qq), kZeroNormGuard);
  return std::clamp(dot / (ns_ * nq_), 0.0, 1.0);
}

std::int64_t count_oracle(const T& s, const T& q) {
  std::int64_t n = 0;
  for (Index j = 0; j < q.dim(1) * q.dim(2); ++j) {
    for (Index i = 0; i < s.dim(1) * s.dim(2); ++i) n += cosine_oracle(s, i, q, j) > 0;
  }
  return n;
}

}  // namespace

TEST(ResidualEnhance, ZeroTransformAndAddOracle) {
  Rng rng(1);
  const T f = random_tensor({4, 3, 3}, rng);
  EXPECT_EQ(max_abs_diff(residual_enhance(T::zeros({4, 3, 3}), f).r.data(), f.data()), 0.0);
  for (int trial = 0; trial < 100; ++trial) {
    const T a = random_tensor({3, 2, 5}, rng);
    const T b = random_tensor({3, 2, 5}, rng);
    const auto r = residual_enhance(a, b, 2);
    EXPECT_EQ(r.level, 2);
    for (Index i = 0; i < a.size(); ++i) EXPECT_EQ(r.r.data()[i], a.data()[i] + b.data()[i]);
  }
  EXPECT_THROW(residual_enhance(T::zeros({4, 3, 3}), T::zeros({4, 3, 2})), ShapeError);
}

TEST(Hypercorrelation, SelfCorrelationDiagonalIsOne) {
  Rng rng(2);
  const T f = random_tensor({6, 3, 4}, rng);
  const auto c = hypercorrelation<double>({0, f}, {0, f});
  ASSERT_EQ(c.cos.shape(), (Shape{12, 12}));
  for (Index i = 0; i < 12; ++i) EXPECT_NEAR(c.cos(i, i), 1.0, 1e-12);
}

TEST(Hypercorrelation, OrthogonalFieldsGiveZero) {
  T s = T::zeros({2, 2, 2});
  T q = T::zeros({2, 2, 2});
  s.mutable_data().head(4).setConstant(1.0);
  q.mutable_data().tail(4).setConstant(3.0);
  const auto c = hypercorrelation<double>({0, s}, {0, q});
  EXPECT_EQ(c.cos.data().abs().maxCoeff(), 0.0);
  EXPECT_EQ(active_matching_count(c), 0);
}

TEST(Hypercorrelation, AntiParallelIsClampedToZero) {
  Rng rng(3);
  const T f = random_tensor({5, 2, 2}, rng);
  const auto c = hypercorrelation<double>({0, f}, {0, -1.0 * f});
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(c.cos(i, i), 0.0);
}

TEST(Hypercorrelation, ZeroPixelContributesZero) {
  Rng rng(4);
  T s = random_tensor({3, 2, 2}, rng);
  for (Index c = 0; c < 3; ++c) s.mutable_data()[c * 4 + 1] = 0.0;
  const auto c = hypercorrelation<double>({0, s}, {0, random_tensor({3, 2, 2}, rng)});
  for (Index j = 0; j < 4; ++j) EXPECT_EQ(c.cos(j, 1), 0.0);
  EXPECT_TRUE(c.cos.data().allFinite());
}

TEST(Hypercorrelation, MatchesPairwiseOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = 1 + static_cast<Index>(rng.below(6));
    const T s = random_tensor({d, 3, 4}, rng);
    const T q = random_tensor({d, 2, 5}, rng);
    const auto c = hypercorrelation<double>({1, s}, {1, q});
    ASSERT_EQ(c.cos.shape(), (Shape{10, 12}));
    EXPECT_EQ(c.query_h, 2);
    EXPECT_EQ(c.support_w, 4);
    EXPECT_EQ(c.total_pairs(), 120);
    double worst = 0;
    for (Index j = 0; j < 10; ++j) {
      for (Index i = 0; i < 12; ++i) worst = std::max(worst, std::abs(c.cos(j, i) - cosine_oracle(s, i, q, j)));
    }
    EXPECT_LE(worst, 1e-9);
    EXPECT_GE(c.cos.data().minCoeff(), 0.0);
    EXPECT_LE(c.cos.data().maxCoeff(), 1.0);
  }
}

TEST(Hypercorrelation, ScaleInvariant) {
  Rng rng(6);
  const T s = random_tensor({4, 3, 3}, rng);
  const T q = random_tensor({4, 3, 3}, rng);
  const auto a = hypercorrelation<double>({0, s}, {0, q});
  const auto b = hypercorrelation<double>({0, 7.5 * s}, {0, 0.01 * q});
  EXPECT_LE(max_abs_diff(a.cos.data(), b.cos.data()), 1e-12);
}

TEST(Hypercorrelation, RejectsMismatch) {
  EXPECT_THROW(hypercorrelation<double>({0, T::zeros({3, 2, 2})}, {0, T::zeros({4, 2, 2})}), ShapeError);
  EXPECT_THROW(hypercorrelation<double>({0, T::zeros({3, 2, 2})}, {1, T::zeros({3, 2, 2})}), std::invalid_argument);
}

TEST(Hypercorrelation, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    // Positive features keep every cosine away from the clamp at 0.
    std::vector<T> in{random_tensor({3, 2, 2}, rng, 0.2, 1.0), random_tensor({3, 2, 3}, rng, 0.2, 1.0)};
    const auto f = [](const std::vector<T>& x) {
      return project(hypercorrelation<double>({0, x[0]}, {0, x[1]}).cos, 5);
    };
    EXPECT_LE(fd_gradient_error(f, in), 1e-6);
  }
}

TEST(ActiveMatching, MatchesOracleCount) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const T s = random_tensor({3, 3, 3}, rng);
    const T q = random_tensor({3, 2, 2}, rng);
    EXPECT_EQ(active_matching_count(hypercorrelation<double>({0, s}, {0, q})), count_oracle(s, q));
  }
}

TEST(ActiveMatching, AllPositiveFeaturesActivateEveryPair) {
  Rng rng(9);
  const auto c = hypercorrelation<double>({0, random_tensor({4, 3, 3}, rng, 0.1, 1.0)},
                                          {0, random_tensor({4, 2, 3}, rng, 0.1, 1.0)});
  EXPECT_EQ(active_matching_count(c), c.total_pairs());
}

TEST(ActiveMatching, ZeroTransformMatchesOriginalSpace) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const T s = random_tensor({4, 3, 3}, rng);
    const T q = random_tensor({4, 3, 3}, rng);
    const TransformMatrix<double> w{0, T::zeros({4, 4})};
    const auto active = hypercorrelation(residual_enhance(apply_transform(w, s), s),
                                         residual_enhance(apply_transform(w, q), q));
    const auto plain = hypercorrelation<double>({0, s}, {0, q});
    EXPECT_EQ(active_matching_count(active), active_matching_count(plain));
    EXPECT_EQ(max_abs_diff(active.cos.data(), plain.cos.data()), 0.0);
  }
}

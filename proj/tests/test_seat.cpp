#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "restnet/log.hpp"
#include "restnet/seat.hpp"
#include "test_support.hpp"

using namespace restnet;
using restnet::testing::fd_gradient_error;
using restnet::testing::max_abs_diff;
using restnet::testing::project;
using restnet::testing::random_tensor;
using T = Tensor<double>;

namespace {

AttentionParams<double> random_attention(Rng& rng) {
  return {random_tensor({1, 2, 3, 3}, rng), random_tensor({1}, rng)};
}

Eigen::VectorXd vec(const T& t) { return Eigen::Map<const Eigen::VectorXd>(t.data().data(), t.size()); }

}  // namespace

TEST(MaskFeatures, OnesZerosAndHalfPlane) {
  Rng rng(1);
  const T f = random_tensor({3, 4, 4}, rng);
  EXPECT_EQ(max_abs_diff(mask_features(f, T::ones({4, 4})).data(), f.data()), 0.0);
  EXPECT_EQ(mask_features(f, T::zeros({4, 4})).data().abs().maxCoeff(), 0.0);
  EXPECT_TRUE(mask_features(f, T()).same_storage(f));

  T half = T::zeros({4, 4});
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 2; ++j) half.mutable_data()[i * 4 + j] = 1;
  }
  const T out = mask_features(f, half);
  for (Index d = 0; d < 3; ++d) {
    for (Index i = 0; i < 4; ++i) {
      for (Index j = 0; j < 4; ++j) EXPECT_EQ(out(d, i, j), j < 2 ? f(d, i, j) : 0.0);
    }
  }
}

TEST(UnifiedAttention, ZeroParamsHalveInput) {
  Rng rng(2);
  const T f = random_tensor({4, 5, 5}, rng);
  const AttentionParams<double> p{T::zeros({1, 2, 3, 3}), T::zeros({1})};
  EXPECT_LE(max_abs_diff(unified_attention(f, p).data(), 0.5 * f.data()), 0.0);
  EXPECT_EQ(unified_attention(T::zeros({4, 5, 5}), random_attention(rng)).data().abs().maxCoeff(), 0.0);
}

TEST(UnifiedAttention, MatchesStepwiseOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const T f = random_tensor({3, 4, 5}, rng);
    const auto p = random_attention(rng);
    T pooled = T::zeros({2, 4, 5});
    for (Index i = 0; i < 4; ++i) {
      for (Index j = 0; j < 5; ++j) {
        double s = 0, m = -1e300;
        for (Index d = 0; d < 3; ++d) {
          s += f(d, i, j);
          m = std::max(m, f(d, i, j));
        }
        pooled.mutable_data()[i * 5 + j] = s / 3;
        pooled.mutable_data()[20 + i * 5 + j] = m;
      }
    }
    const T gate = conv2d(pooled, p.kernel, p.bias);
    const T out = unified_attention(f, p);
    for (Index d = 0; d < 3; ++d) {
      for (Index i = 0; i < 4; ++i) {
        for (Index j = 0; j < 5; ++j) {
          const double g = 1.0 / (1.0 + std::exp(-gate(0, i, j)));
          EXPECT_NEAR(out(d, i, j), g * f(d, i, j), 1e-14);
        }
      }
    }
  }
}

TEST(UnifiedAttention, AttenuatesWithoutSignChange) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const T f = random_tensor({5, 6, 6}, rng, -3, 3);
    const T out = unified_attention(f, random_attention(rng));
    EXPECT_TRUE((out.data().abs() <= f.data().abs()).all());
    EXPECT_TRUE((out.data() * f.data() >= 0).all());
  }
}

TEST(UnifiedAttention, ParameterCountIndependentOfDepth) {
  Rng rng(5);
  EXPECT_EQ(init_attention<double>(3, rng).parameter_count(), 2 * 9 + 1);
  EXPECT_EQ(init_attention<double>(5, rng).parameter_count(), 2 * 25 + 1);
}

TEST(MaskedAveragePool, ConstantAndOneHot) {
  T f = T::zeros({2, 4, 4});
  f.mutable_data().head(16).setConstant(3.0);
  f.mutable_data().tail(16).setConstant(-1.5);
  Rng rng(6);
  const T p = masked_average_pool(f, random_tensor({4, 4}, rng, 0.1, 1));
  EXPECT_NEAR(p(0), 3.0, 1e-14);
  EXPECT_NEAR(p(1), -1.5, 1e-14);

  const T g = random_tensor({3, 4, 4}, rng);
  T hot = T::zeros({4, 4});
  hot.mutable_data()[2 * 4 + 1] = 1;
  const T q = masked_average_pool(g, hot);
  for (Index d = 0; d < 3; ++d) EXPECT_DOUBLE_EQ(q(d), g(d, 2, 1));
}

TEST(MaskedAveragePool, MatchesDoubleLoopOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const T f = random_tensor({3, 4, 5}, rng);
    const T m = random_tensor({4, 5}, rng, 0, 1);
    const T p = masked_average_pool(f, m);
    for (Index d = 0; d < 3; ++d) {
      double num = 0, den = 0;
      for (Index i = 0; i < 4; ++i) {
        for (Index j = 0; j < 5; ++j) {
          num += f(d, i, j) * m(i, j);
          den += m(i, j);
        }
      }
      EXPECT_NEAR(p(d), num / den, 1e-12);
    }
  }
}

TEST(MaskedAveragePool, EmptyRegionThrowsAndFallbackWarns) {
  Rng rng(8);
  const T f = random_tensor({2, 4, 4}, rng);
  EXPECT_THROW(masked_average_pool(f, T::zeros({4, 4})), EmptyRegionError);
  std::vector<std::string> warnings;
  const auto previous = set_warning_sink([&](const std::string& w) { warnings.push_back(w); });
  const T g = masked_average_pool_or_global(f, T::zeros({4, 4}), "foreground");
  set_warning_sink(previous);
  ASSERT_EQ(warnings.size(), 1u);
  for (Index d = 0; d < 2; ++d) EXPECT_NEAR(g(d), f.data().segment(d * 16, 16).mean(), 1e-14);
}

TEST(ComputeTransform, AnchorsEqualPrototypesGiveIdentityOnSpan) {
  Rng rng(9);
  const PrototypePair<double> proto{0, random_tensor({6}, rng), random_tensor({6}, rng)};
  const T af = proto.fg / std::sqrt(proto.fg.data().square().sum());
  const T ab = proto.bg / std::sqrt(proto.bg.data().square().sum());
  const auto w = compute_transform(proto, af, ab, 0.0);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wm(w.w.data().data(), 6, 6);
  EXPECT_LE((wm * vec(af) - vec(af)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((wm * vec(ab) - vec(ab)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ComputeTransform, OrthonormalPrototypesMapExactly) {
  Rng rng(10);
  T cf = T::zeros({5}), cb = T::zeros({5});
  cf.mutable_data()[0] = 2.0;
  cb.mutable_data()[3] = 0.5;
  const T af = random_tensor({5}, rng), ab = random_tensor({5}, rng);
  const auto w = compute_transform(PrototypePair<double>{0, cf, cb}, af, ab, 0.0);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wm(w.w.data().data(), 5, 5);
  EXPECT_LE((wm * (vec(cf) / 2.0) - vec(af).normalized()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((wm * (vec(cb) / 0.5) - vec(ab).normalized()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ComputeTransform, MatchesNormalEquationOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const PrototypePair<double> proto{0, random_tensor({8}, rng), random_tensor({8}, rng)};
    const T af = random_tensor({8}, rng), ab = random_tensor({8}, rng);
    const auto w = compute_transform(proto, af, ab, 0.0);
    Eigen::MatrixXd c(8, 2), a(8, 2);
    c << vec(proto.fg).normalized(), vec(proto.bg).normalized();
    a << vec(af).normalized(), vec(ab).normalized();
    // W = A (C^T C)^{-1} C^T, row by row from the normal equations.
    const Eigen::MatrixXd oracle = a * (c.transpose() * c).ldlt().solve(c.transpose());
    for (Index i = 0; i < 8; ++i) {
      for (Index j = 0; j < 8; ++j) EXPECT_NEAR(w.w(i, j), oracle(i, j), 1e-9);
    }
  }
}

TEST(ComputeTransform, DegenerateInputs) {
  Rng rng(12);
  const T v = random_tensor({4}, rng);
  EXPECT_THROW(compute_transform(PrototypePair<double>{0, T::zeros({4}), v}, v, v * 2.0, 0.0), DegenerateInputError);
  EXPECT_THROW(compute_transform(PrototypePair<double>{0, v, random_tensor({4}, rng)}, T::zeros({4}), v, 0.0),
               DegenerateInputError);
  EXPECT_THROW(compute_transform(PrototypePair<double>{0, v, v}, v, random_tensor({4}, rng), 0.0),
               SingularMatrixError);
}

TEST(ComputeTransform, GradientsMatchFiniteDifferences) {
  Rng rng(13);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const T f = random_tensor({4, 3, 3}, rng);
    worst = std::max(worst, fd_gradient_error(
                                [&](const std::vector<T>& v) {
                                  const auto w = compute_transform(PrototypePair<double>{0, v[0], v[1]}, v[2], v[3],
                                                                   std::optional<double>{});
                                  return project(apply_transform(w, f));
                                },
                                {random_tensor({4}, rng), random_tensor({4}, rng), random_tensor({4}, rng),
                                 random_tensor({4}, rng)}));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(AttentionGradient, MatchesFiniteDifferences) {
  Rng rng(14);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const T f = random_tensor({3, 4, 4}, rng);
    worst = std::max(worst, fd_gradient_error(
                                [&](const std::vector<T>& v) {
                                  return project(unified_attention(f, AttentionParams<double>{v[0], v[1]}));
                                },
                                {random_tensor({1, 2, 3, 3}, rng), random_tensor({1}, rng)}));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(ApplyTransform, IdentityZeroAndOracle) {
  Rng rng(15);
  const T f = random_tensor({3, 2, 4}, rng);
  T eye = T::zeros({3, 3});
  for (Index i = 0; i < 3; ++i) eye.mutable_data()[i * 4] = 1;
  EXPECT_EQ(max_abs_diff(apply_transform(TransformMatrix<double>{0, eye}, f).data(), f.data()), 0.0);
  EXPECT_EQ(apply_transform(TransformMatrix<double>{0, T::zeros({3, 3})}, f).data().abs().maxCoeff(), 0.0);
  const T w = random_tensor({3, 3}, rng);
  const T out = apply_transform(TransformMatrix<double>{0, w}, f);
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 4; ++j) {
      for (Index r = 0; r < 3; ++r) {
        double s = 0;
        for (Index c = 0; c < 3; ++c) s += w(r, c) * f(c, i, j);
        EXPECT_NEAR(out(r, i, j), s, 1e-14);
      }
    }
  }
  EXPECT_THROW(apply_transform(TransformMatrix<double>{0, T::zeros({2, 2})}, f), ShapeError);
}

TEST(Anchors, UnitNormAndRepair) {
  Rng rng(16);
  auto bank = init_anchors<double>({8, 16, 32}, rng);
  for (std::size_t g = 0; g < 3; ++g) {
    EXPECT_NEAR(bank.fg[g].data().matrix().norm(), 1.0, 1e-12);
    EXPECT_NEAR(bank.bg[g].data().matrix().norm(), 1.0, 1e-12);
  }
  bank.fg[1].mutable_data().setZero();
  EXPECT_EQ(bank.repair(rng), 1);
  EXPECT_NEAR(bank.fg[1].data().matrix().norm(), 1.0, 1e-12);
  EXPECT_EQ(bank.repair(rng), 0);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "restnet/model.hpp"
#include "restnet/ops.hpp"
#include "test_support.hpp"

using namespace restnet;
using restnet::testing::fd_gradient_error;
using restnet::testing::max_abs_diff;
using restnet::testing::project;
using restnet::testing::random_tensor;
using T = Tensor<double>;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.backbone.image_size = 16;
  return cfg;
}

const Dataset& small_dataset() {
  static const Dataset ds = [] {
    ForgeConfig f = ForgeConfig::defaults();
    f.image_size = 16;
    f.n_images_per_class = 4;
    return render_dataset(f, true);
  }();
  return ds;
}

CorrelationTensor<double> corr(Index qh, Index sh, T cos) {
  CorrelationTensor<double> c;
  c.query_h = c.query_w = qh;
  c.support_h = c.support_w = sh;
  c.cos = std::move(cos);
  return c;
}

std::vector<CorrelationTensor<double>> constant_corrs(double v) {
  std::vector<CorrelationTensor<double>> out;
  for (Index r : {16, 8, 4}) out.push_back(corr(r, r, T::constant({r * r, r * r}, v)));
  return out;
}

std::vector<CorrelationTensor<double>> random_corrs(Rng& rng) {
  std::vector<CorrelationTensor<double>> out;
  for (Index r : {4, 2, 1}) out.push_back(corr(r, r, random_tensor({r * r, r * r}, rng, 0.0, 1.0)));
  return out;
}

EncoderDecoderParams<double> small_head(Rng& rng, EncoderConfig cfg = {}) {
  return init_encoder_decoder<double>(cfg, {16, 4, 1}, rng);
}

}  // namespace

TEST(EncodeDecode, ZeroCorrelationsGiveConstantProbs) {
  Rng rng(1);
  const auto head = init_encoder_decoder<double>({}, {256, 64, 16}, rng);
  const auto out = encode_decode(constant_corrs(0.0), head, 16, 16);
  ASSERT_EQ(out.probs.shape(), (Shape{16, 16}));
  ASSERT_EQ(out.logits.shape(), (Shape{2, 16, 16}));
  // Zero-padded convolutions see the border, so only the interior is flat.
  const double centre = out.probs(8, 8);
  for (Index i = 4; i < 12; ++i) {
    for (Index j = 4; j < 12; ++j) EXPECT_NEAR(out.probs(i, j), centre, 1e-12);
  }
}

TEST(EncodeDecode, RepeatedCallsAreBitIdentical) {
  Rng rng(2);
  const auto head = init_encoder_decoder<double>({}, {256, 64, 16}, rng);
  const auto a = encode_decode(constant_corrs(0.3), head, 16, 16);
  const auto b = encode_decode(constant_corrs(0.3), head, 16, 16);
  EXPECT_EQ(max_abs_diff(a.probs.data(), b.probs.data()), 0.0);
  EXPECT_EQ(max_abs_diff(a.logits.data(), b.logits.data()), 0.0);
}

TEST(EncodeDecode, ProbsAreStrictlyInsideAndChannelsSumToOne) {
  Rng rng(3);
  const auto head = small_head(rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto out = encode_decode(random_corrs(rng), head, 8, 8);
    EXPECT_GT(out.probs.data().minCoeff(), 0.0);
    EXPECT_LT(out.probs.data().maxCoeff(), 1.0);
    const T p = channel_softmax(out.logits);
    for (Index i = 0; i < 64; ++i) EXPECT_NEAR(p.data()[i] + p.data()[64 + i], 1.0, 1e-15);
    for (Index i = 0; i < 64; ++i) EXPECT_EQ(p.data()[64 + i], out.probs.data()[i]);
  }
}

TEST(EncodeDecode, RejectsMismatchedLevels) {
  Rng rng(4);
  const auto head = small_head(rng);
  auto corrs = random_corrs(rng);
  corrs.pop_back();
  EXPECT_THROW(encode_decode(corrs, head, 4, 4), ShapeError);
  EXPECT_THROW(encode_decode<double>({}, head, 4, 4), std::invalid_argument);
  auto wrong = random_corrs(rng);
  wrong[1] = corr(2, 3, random_tensor({4, 9}, rng, 0.0, 1.0));
  EXPECT_THROW(encode_decode(wrong, head, 4, 4), ShapeError);
}

TEST(EncodeDecode, NoPoolsStillDecodes) {
  Rng rng(5);
  EncoderConfig cfg;
  cfg.pooled = 0;
  const auto head = small_head(rng, cfg);
  EXPECT_EQ(head.levels[0].pivot.kernel.dim(1), 2);
  const auto out = encode_decode(random_corrs(rng), head, 4, 4);
  EXPECT_TRUE(out.probs.data().allFinite());
}

TEST(EncodeDecode, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  auto head = small_head(rng);
  const auto corrs = random_corrs(rng);
  std::vector<T> in{head.levels[0].pool.detach(), head.levels[1].pivot.kernel.detach(), head.logits.bias.detach()};
  const auto f = [&](const std::vector<T>& x) {
    auto h = head;
    h.levels[0].pool = x[0];
    h.levels[1].pivot.kernel = x[1];
    h.logits.bias = x[2];
    return project(encode_decode(corrs, h, 4, 4).logits, 8);
  };
  EXPECT_LE(fd_gradient_error(f, in), 1e-5);
}

TEST(EncoderConfig, Validation) {
  EncoderConfig cfg;
  cfg.kind = "transformer";
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.pooled = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.hidden = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(FusePrototypes, EndpointsAndMidpoint) {
  const PrototypePair<double> s{0, T::from({2}, {1.0, 0.0}), T::from({2}, {0.0, 3.0})};
  const PrototypePair<double> q{0, T::from({2}, {0.0, 1.0}), T::from({2}, {1.0, 1.0})};
  const auto one = fuse_prototypes(s, q, T::scalar(1.0));
  EXPECT_EQ(max_abs_diff(one.fg.data(), s.fg.data()), 0.0);
  EXPECT_EQ(max_abs_diff(one.bg.data(), s.bg.data()), 0.0);
  const auto zero = fuse_prototypes(s, q, T::scalar(0.0));
  EXPECT_EQ(max_abs_diff(zero.fg.data(), q.fg.data()), 0.0);
  const PrototypePair<double> s2{0, T::from({2}, {1.0, 0.0}), T::from({2}, {0.0, 1.0})};
  const auto mid = fuse_prototypes(s2, PrototypePair<double>{0, T::from({2}, {1.0, 2.0}), T::from({2}, {2.0, 1.0})},
                                   T::scalar(0.5));
  EXPECT_EQ(mid.fg(0), 1.0);
  EXPECT_EQ(mid.fg(1), 1.0);
  EXPECT_EQ(mid.bg(0), 1.0);
  EXPECT_EQ(mid.bg(1), 1.0);
  EXPECT_THROW(fuse_prototypes(s, PrototypePair<double>{0, T::zeros({3}), T::zeros({3})}, T::scalar(0.5)), ShapeError);
}

TEST(QueryPrototypes, MatchSoftWeightedAverage) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const T f = random_tensor({3, 4, 4}, rng);
    SoftMask<double> soft;
    soft.probs = random_tensor({4, 4}, rng, 0.01, 0.99);
    const auto p = query_prototypes(f, soft, 1);
    EXPECT_EQ(p.level, 1);
    for (Index c = 0; c < 3; ++c) {
      double num_fg = 0, num_bg = 0, den_fg = 0, den_bg = 0;
      for (Index i = 0; i < 16; ++i) {
        const double w = soft.probs.data()[i];
        num_fg += w * f.data()[c * 16 + i];
        num_bg += (1 - w) * f.data()[c * 16 + i];
        den_fg += w;
        den_bg += 1 - w;
      }
      EXPECT_NEAR(p.fg(c), num_fg / den_fg, 1e-12);
      EXPECT_NEAR(p.bg(c), num_bg / den_bg, 1e-12);
    }
  }
}

TEST(QueryPrototypes, HalfProbabilityGivesGlobalAverage) {
  Rng rng(8);
  const T f = random_tensor({4, 3, 3}, rng);
  SoftMask<double> soft;
  soft.probs = T::constant({3, 3}, 0.5);
  const auto p = query_prototypes(f, soft, 0);
  for (Index c = 0; c < 4; ++c) {
    const double mean = f.data().segment(c * 9, 9).mean();
    EXPECT_NEAR(p.fg(c), mean, 1e-12);
    EXPECT_NEAR(p.bg(c), mean, 1e-12);
  }
}

TEST(Fusion, AlphaStartsAtHalf) {
  const auto f = init_fusion<double>();
  EXPECT_TRUE(f.raw.requires_grad());
  EXPECT_EQ(f.alpha().item(), 0.5);
}

TEST(SegmentEpisode, ShapesRangesAndDeterminism) {
  const auto model = Model<double>::init(small_config());
  const Episode ep = sample_episode(small_dataset(), "source", 1, 11);
  const auto a = segment_episode(ep, model);
  const auto b = segment_episode(ep, model);
  for (const auto* s : {&a.coarse, &a.fine}) {
    EXPECT_EQ(s->probs.shape(), (Shape{16, 16}));
    EXPECT_GT(s->probs.data().minCoeff(), 0.0);
    EXPECT_LT(s->probs.data().maxCoeff(), 1.0);
  }
  EXPECT_EQ(max_abs_diff(a.fine.probs.data(), b.fine.probs.data()), 0.0);
  ASSERT_EQ(a.fine_correlations.size(), 3u);
  for (const auto& c : a.fine_correlations) {
    EXPECT_GE(c.cos.data().minCoeff(), 0.0);
    EXPECT_LE(c.cos.data().maxCoeff(), 1.0);
  }
}

TEST(SegmentEpisode, AlphaOneCollapsesStagesBitwise) {
  auto model = Model<double>::init(small_config());
  Rng rng(9);
  for (auto& p : model.trainable_parameters()) {
    if (p.name.rfind("seg.", 0) == 0) p.tensor.mutable_data() += 0.1 * random_tensor(p.tensor.shape(), rng).data();
  }
  for (int i = 0; i < 5; ++i) {
    const Episode ep = sample_episode(small_dataset(), i % 2 ? "target" : "source", 1 + i % 2, 100 + i);
    const auto out = segment_episode(ep, model, SegmentOptions{1.0});
    ASSERT_EQ(out.coarse.probs.size(), out.fine.probs.size());
    for (Index j = 0; j < out.coarse.probs.size(); ++j) {
      ASSERT_EQ(out.coarse.probs.data()[j], out.fine.probs.data()[j]);
    }
    for (Index j = 0; j < out.coarse.logits.size(); ++j) {
      ASSERT_EQ(out.coarse.logits.data()[j], out.fine.logits.data()[j]);
    }
  }
  const Episode ep = sample_episode(small_dataset(), "source", 1, 1);
  const auto half = segment_episode(ep, model);
  EXPECT_GT(max_abs_diff(half.coarse.probs.data(), half.fine.probs.data()), 0.0);
}

TEST(SegmentEpisode, ShotOrderDoesNotMatter) {
  const auto model = Model<double>::init(small_config());
  for (int i = 0; i < 5; ++i) {
    const Episode ep = sample_episode(small_dataset(), "source", 3, 200 + i);
    Episode rev = ep;
    std::reverse(rev.supports.begin(), rev.supports.end());
    Episode rot = ep;
    std::rotate(rot.supports.begin(), rot.supports.begin() + 1, rot.supports.end());
    const auto a = segment_episode(ep, model);
    for (const Episode* e : {&rev, &rot}) {
      const auto b = segment_episode(*e, model);
      EXPECT_LE(max_abs_diff(a.coarse.probs.data(), b.coarse.probs.data()), 1e-9);
      EXPECT_LE(max_abs_diff(a.fine.probs.data(), b.fine.probs.data()), 1e-9);
    }
  }
}

TEST(SegmentEpisode, FloatAndDoubleAgree) {
  const auto md = Model<double>::init(small_config());
  const auto mf = Model<float>::init(small_config());
  const Episode ep = sample_episode(small_dataset(), "target", 1, 5);
  const auto a = segment_episode(ep, md);
  const auto b = segment_episode(ep, mf);
  EXPECT_LE(max_abs_diff(a.fine.probs.data(), b.fine.probs.data().cast<double>()), 1e-3);
}

TEST(SegmentEpisode, WrongImageSizeNamesEpisode) {
  ModelConfig cfg = small_config();
  cfg.backbone.image_size = 32;
  const auto model = Model<double>::init(cfg);
  Episode ep = sample_episode(small_dataset(), "source", 1, 5);
  try {
    segment_episode(ep, model);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find(ep.episode_id), std::string::npos);
  }
}

#pragma once

// Correlation encoder / 2D decoder and prototype fusion.
//
// The encoder compresses the support axis of each level's correlation
// matrix into (2 + P) channels per query pixel: mean, max and P learned
// softmax-weighted averages. A 3x3 "pivot" conv + ReLU runs per level, all
// levels are resized to the finest query grid and concatenated, and the
// decoder (two 3x3 conv + ReLU, then a 1x1 conv) emits 2 logit channels.

#include <string>
#include <vector>

#include "restnet/init.hpp"
#include "restnet/ire.hpp"
#include "restnet/rng.hpp"
#include "restnet/seat.hpp"
#include "restnet/tensor.hpp"

namespace restnet {

struct EncoderConfig {
  std::string kind = "pooling";
  int pooled = 4;          // P learned support pools per level
  int pivot_channels = 8;  // output channels of each per-level conv
  int hidden = 16;         // decoder width

  void validate() const;
};

template <typename Scalar>
struct LevelEncoder {
  Tensor<Scalar> pool;  // P x (H_s * W_s), softmax-normalised along the support axis
  ConvLayer<Scalar> pivot;
};

template <typename Scalar>
struct EncoderDecoderParams {
  std::vector<LevelEncoder<Scalar>> levels;
  ConvLayer<Scalar> decode1;
  ConvLayer<Scalar> decode2;
  ConvLayer<Scalar> logits;

  Index parameter_count() const;
};

template <typename Scalar>
struct SoftMask {
  Tensor<Scalar> probs;   // H x W foreground probability
  Tensor<Scalar> logits;  // 2 x H x W, channel 1 = foreground
};

template <typename Scalar>
struct FusionParam {
  Tensor<Scalar> raw;  // scalar; alpha = sigmoid(raw)

  Tensor<Scalar> alpha() const;
};

// support_pixels[l] = H_l * W_l of the support grid at level l.
template <typename Scalar>
EncoderDecoderParams<Scalar> init_encoder_decoder(const EncoderConfig& cfg, const std::vector<Index>& support_pixels,
                                                  Rng& rng);

template <typename Scalar>
FusionParam<Scalar> init_fusion();

// Softmax over the 2 logit channels; returns the 2 x H x W probabilities.
template <typename Scalar>
Tensor<Scalar> channel_softmax(const Tensor<Scalar>& logits);

template <typename Scalar>
SoftMask<Scalar> encode_decode(const std::vector<CorrelationTensor<Scalar>>& corrs,
                               const EncoderDecoderParams<Scalar>& params, Index out_h, Index out_w);

// Soft-mask weighted foreground/background prototypes of a query level.
template <typename Scalar>
PrototypePair<Scalar> query_prototypes(const Tensor<Scalar>& f_q, const SoftMask<Scalar>& soft, int level);

// alpha * support + (1 - alpha) * query for both prototypes.
template <typename Scalar>
PrototypePair<Scalar> fuse_prototypes(const PrototypePair<Scalar>& support, const PrototypePair<Scalar>& query,
                                      const Tensor<Scalar>& alpha);

}  // namespace restnet

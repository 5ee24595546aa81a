#pragma once

// Full parameter set and the two-stage (coarse, fine) episode pipeline.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "restnet/backbone.hpp"
#include "restnet/episodes.hpp"
#include "restnet/ire.hpp"
#include "restnet/seat.hpp"
#include "restnet/segmenter.hpp"

namespace restnet {

enum class PrototypeSource { Enhanced, Raw };
enum class KShotMerge { Average };

struct ModelConfig {
  BackboneConfig backbone;
  std::uint64_t init_seed = 7;  // trainable-parameter initialisation
  int attn_k = 3;
  EncoderConfig encoder;
  std::optional<double> ridge;  // unset: 1e-6 * trace(C^T C) / 2
  PrototypeSource prototypes_from = PrototypeSource::Enhanced;
  KShotMerge kshot_merge = KShotMerge::Average;

  void validate() const;
  std::array<int, 3> group_dims() const;
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
struct Model {
  ModelConfig config;
  BackboneWeights<Scalar> backbone;
  AttentionParams<Scalar> attention;
  AnchorBank<Scalar> anchors;
  EncoderDecoderParams<Scalar> head;
  FusionParam<Scalar> fusion;

  static Model init(const ModelConfig& cfg);

  // Deep copy: parameters get independent storage.
  Model clone() const;

  // Handles onto the live parameters, named as in checkpoints.
  std::vector<NamedTensor<Scalar>> trainable_parameters() const;
  std::vector<NamedTensor<Scalar>> backbone_parameters() const;

  void zero_grad();
};

struct SegmentOptions {
  // Replaces sigmoid(raw) in the fusion step when set.
  std::optional<double> alpha_override;
};

template <typename Scalar>
struct EpisodeOutput {
  SoftMask<Scalar> coarse;
  SoftMask<Scalar> fine;
  std::vector<CorrelationTensor<Scalar>> coarse_correlations;
  std::vector<CorrelationTensor<Scalar>> fine_correlations;
};

template <typename Scalar>
EpisodeOutput<Scalar> segment_episode(const Episode& ep, const Model<Scalar>& model, const SegmentOptions& opts = {});

}  // namespace restnet

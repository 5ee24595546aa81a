#pragma once

// Frozen three-level convolutional feature pyramid.
//
// Level l (l = 0, 1, 2) applies a 3x3 conv + ReLU to the input image
// average-pooled l times, producing base_channels * 2^l channels at
// image_size / 2^l resolution. Weights never require gradients.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "restnet/init.hpp"
#include "restnet/tensor.hpp"

namespace restnet {

enum class AnchorGroup { Low = 0, Mid = 1, High = 2 };

inline constexpr int kNumLevels = 3;
inline constexpr std::array<AnchorGroup, 3> kAllGroups{AnchorGroup::Low, AnchorGroup::Mid, AnchorGroup::High};

const char* group_name(AnchorGroup group);

struct BackboneConfig {
  int in_channels = 1;
  int base_channels = 8;
  std::uint64_t seed = 1;
  int image_size = 32;

  void validate() const;
  int channels(int level) const { return base_channels << level; }
  int resolution(int level) const { return image_size >> level; }
};

template <typename Scalar>
struct BackboneWeights {
  BackboneConfig config;
  std::array<ConvLayer<Scalar>, kNumLevels> levels;
};

template <typename Scalar>
struct PyramidFeatures {
  std::vector<Tensor<Scalar>> levels;  // D_l x H_l x W_l
  std::vector<AnchorGroup> group_of_level;
};

template <typename Scalar>
BackboneWeights<Scalar> init_backbone(const BackboneConfig& cfg);

template <typename Scalar>
PyramidFeatures<Scalar> extract_features(const BackboneWeights<Scalar>& weights, const Tensor<Scalar>& image);

}  // namespace restnet

#include "restnet/backbone.hpp"

#include "restnet/ops.hpp"

namespace restnet {

const char* group_name(AnchorGroup group) {
  switch (group) {
    case AnchorGroup::Low:
      return "low";
    case AnchorGroup::Mid:
      return "mid";
    case AnchorGroup::High:
      return "high";
  }
  return "?";
}

void BackboneConfig::validate() const {
  if (in_channels < 1) throw ConfigError("backbone in_channels must be >= 1");
  if (base_channels < 1) throw ConfigError("backbone base_channels must be >= 1");
  if (image_size < 4 || image_size % 4 != 0) {
    throw ConfigError("image_size must be a positive multiple of 4, got " + std::to_string(image_size));
  }
}

template <typename Scalar>
BackboneWeights<Scalar> init_backbone(const BackboneConfig& cfg) {
  cfg.validate();
  BackboneWeights<Scalar> w;
  w.config = cfg;
  Rng rng(cfg.seed);
  for (int l = 0; l < kNumLevels; ++l) {
    w.levels[static_cast<std::size_t>(l)] = glorot_conv<Scalar>(cfg.channels(l), cfg.in_channels, 3, rng, false);
  }
  return w;
}

template <typename Scalar>
PyramidFeatures<Scalar> extract_features(const BackboneWeights<Scalar>& weights, const Tensor<Scalar>& image) {
  const auto& cfg = weights.config;
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.image_size) {
    throw ShapeError("backbone expects a " + std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.image_size) +
                     "x" + std::to_string(cfg.image_size) + " image, got " + to_string(image.shape()));
  }
  PyramidFeatures<Scalar> out;
  Tensor<Scalar> scaled = image.detach();
  for (int l = 0; l < kNumLevels; ++l) {
    if (l > 0) scaled = avg_pool2(scaled);
    const auto& layer = weights.levels[static_cast<std::size_t>(l)];
    out.levels.push_back(relu(conv2d(scaled, layer.kernel.detach(), layer.bias.detach())));
    out.group_of_level.push_back(kAllGroups[static_cast<std::size_t>(l)]);
  }
  return out;
}

template BackboneWeights<float> init_backbone(const BackboneConfig&);
template BackboneWeights<double> init_backbone(const BackboneConfig&);
template PyramidFeatures<float> extract_features(const BackboneWeights<float>&, const Tensor<float>&);
template PyramidFeatures<double> extract_features(const BackboneWeights<double>&, const Tensor<double>&);

}  // namespace restnet

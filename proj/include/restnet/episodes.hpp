#pragma once

// Synthetic cross-domain shape datasets and few-shot episode sampling.
//
// Each domain draws from its own shape classes and appearance model
// (intensity ranges, texture, sensor noise). Datasets live on disk as
//   <root>/manifest.json
//   <root>/<domain>/<class>/img_NNN.pgm, mask_NNN.pgm  [, img_NNN.rtnt]
// where the optional RTNT file is a lossless copy of the image.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "restnet/rng.hpp"
#include "restnet/tensor.hpp"

namespace restnet {

inline const std::array<const char*, 6> kShapeClasses{"rect", "ellipse", "triangle", "cross", "ring", "stripe"};
inline const std::array<const char*, 3> kTextures{"flat", "gaussian-noise", "gradient"};

struct DomainSpec {
  std::string domain_id;
  std::vector<std::string> class_set;
  std::string texture = "flat";
  std::array<double, 2> fg_intensity{0.6, 0.9};
  std::array<double, 2> bg_intensity{0.1, 0.35};
  double noise_sigma = 0.03;
  std::uint64_t seed = 1;

  void validate() const;
  // Distance between the foreground and background intensity ranges.
  double intensity_gap() const;
};

struct ForgeConfig {
  DomainSpec source;
  DomainSpec target;
  int n_images_per_class = 20;
  int image_size = 32;
  int channels = 1;

  static ForgeConfig defaults();
  void validate() const;
};

struct SupportPair {
  Tensor<double> image;  // C x H x W in [0, 1]
  Tensor<double> mask;   // H x W in {0, 1}
};

struct Episode {
  std::string episode_id;
  std::string class_id;
  std::string domain_id;
  std::vector<SupportPair> supports;
  Tensor<double> query_image;
  Tensor<double> query_mask;

  int shots() const { return static_cast<int>(supports.size()); }
  void validate() const;
};

struct Sample {
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  Tensor<double> image;
  Tensor<double> mask;
};

struct ClassImages {
  std::string class_id;
  std::vector<Sample> images;
};

struct DomainData {
  std::string domain_id;
  std::vector<ClassImages> classes;
};

struct Dataset {
  int image_size = 0;
  int channels = 1;
  std::vector<DomainData> domains;

  const DomainData& domain(const std::string& id) const;
  bool has_domain(const std::string& id) const;
};

// Renders one shape mask of the given class at a random pose.
Tensor<double> render_shape(const std::string& shape_class, int image_size, Rng& rng);

// Deterministic in-memory rendering. With `exact` false, images are
// quantised to 8 bits so that a PGM round trip is lossless.
Dataset render_dataset(const ForgeConfig& cfg, bool exact = false);

void write_dataset(const Dataset& ds, const std::filesystem::path& root, bool exact = false);
Dataset read_dataset(const std::filesystem::path& root);

// render_dataset + write_dataset.
Dataset forge_dataset(const ForgeConfig& cfg, const std::filesystem::path& root, bool exact = false);

// Uniformly picks a class with at least k + 1 images, then k + 1 distinct
// images of it: k supports and one query.
Episode sample_episode(const Dataset& ds, const std::string& domain_id, int k, std::uint64_t seed);

}  // namespace restnet

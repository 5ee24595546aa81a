#pragma once

// Run configuration file (JSON) with sections forge, model, train, eval and
// gradcheck. Missing keys take the defaults below; unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <string>

#include "restnet/episodes.hpp"
#include "restnet/model.hpp"
#include "restnet/trainer.hpp"

namespace restnet {

struct EvalConfig {
  std::string domain = "target";
  int n_episodes = 200;
  int k = 1;
  std::uint64_t seed = 2024;
};

struct GradcheckConfig {
  int image_size = 16;
  int coords_per_group = 20;
  double tolerance = 1e-4;
  double step = 1e-5;
  std::uint64_t seed = 3;
};

struct RunConfig {
  ForgeConfig forge = ForgeConfig::defaults();
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  GradcheckConfig gradcheck;

  // The model's input geometry follows the forge section.
  ModelConfig model_for(int image_size, int channels) const;
  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string dump_run_config(const RunConfig& cfg);

// The float64 episode used for gradient verification: a source-domain
// episode rendered in memory at gradcheck.image_size.
Episode gradcheck_episode(const RunConfig& cfg);
GradcheckReport run_gradcheck(const RunConfig& cfg);

// Only the model section of a config file, e.g. a run's config.resolved.json.
ModelConfig parse_model_section(const std::string& json_text);

}  // namespace restnet

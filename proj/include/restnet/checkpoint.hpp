#pragma once

// RTCK checkpoint container:
//   "RTCK" | u8 version (=1) | u32 entry count |
//   entries of (u16 name length, UTF-8 name, RTNT tensor)
// Entries keep insertion order, so equal models give equal bytes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "restnet/model.hpp"
#include "restnet/tensor_io.hpp"

namespace restnet {

struct Checkpoint {
  std::vector<std::pair<std::string, RawTensor>> entries;

  const RawTensor* find(const std::string& name) const;
  const RawTensor& at(const std::string& name) const;
  void put(const std::string& name, RawTensor tensor);
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Backbone, trainable parameters, optional optimizer state and "meta.epoch".
template <typename Scalar>
Checkpoint model_checkpoint(const Model<Scalar>& model, const std::vector<NamedTensor<Scalar>>& optimizer_state = {},
                            std::optional<int> epoch = std::nullopt);

// Replaces every shape-determined field of `base` with the value implied by
// the tensor shapes stored in the checkpoint.
ModelConfig infer_model_config(const Checkpoint& ckpt, ModelConfig base = {});

// Builds a model with the inferred architecture and copies every parameter
// (backbone included) from the checkpoint.
template <typename Scalar>
Model<Scalar> load_model(const Checkpoint& ckpt, const ModelConfig& base = {});

template <typename Scalar>
std::vector<NamedTensor<Scalar>> optimizer_state(const Checkpoint& ckpt);

std::optional<int> checkpoint_epoch(const Checkpoint& ckpt);

}  // namespace restnet

#include "restnet/checkpoint.hpp"

#include <cmath>
#include <fstream>

namespace restnet {

namespace {

constexpr char kMagic[4] = {'R', 'T', 'C', 'K'};
constexpr std::uint8_t kVersion = 1;

}  // namespace

const RawTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return &t;
  }
  return nullptr;
}

const RawTensor& Checkpoint::at(const std::string& name) const {
  const RawTensor* t = find(name);
  if (!t) throw IoError("checkpoint has no entry '" + name + "'");
  return *t;
}

void Checkpoint::put(const std::string& name, RawTensor tensor) {
  for (auto& [n, t] : entries) {
    if (n == name) {
      t = std::move(tensor);
      return;
    }
  }
  entries.emplace_back(name, std::move(tensor));
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  le::put_u8(os, kVersion);
  le::put_u32(os, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& [name, t] : ckpt.entries) {
    if (name.size() > 0xffff) throw IoError("checkpoint entry name too long");
    le::put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw_tensor(os, t);
  }
  if (!os) throw IoError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || !std::equal(magic, magic + 4, kMagic)) throw IoError(path.string() + " is not an RTCK checkpoint");
  if (le::get_u8(is) != kVersion) throw IoError(path.string() + ": unsupported RTCK version");
  const std::uint32_t count = le::get_u32(is);
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(le::get_u16(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (!is) throw IoError(path.string() + ": truncated entry name");
    ckpt.entries.emplace_back(std::move(name), read_raw_tensor(is));
  }
  return ckpt;
}

template <typename Scalar>
Checkpoint model_checkpoint(const Model<Scalar>& model, const std::vector<NamedTensor<Scalar>>& optimizer_state,
                            std::optional<int> epoch) {
  Checkpoint ckpt;
  for (const auto& p : model.backbone_parameters()) ckpt.put(p.name, to_raw(p.tensor));
  for (const auto& p : model.trainable_parameters()) ckpt.put(p.name, to_raw(p.tensor));
  for (const auto& p : optimizer_state) ckpt.put(p.name, to_raw(p.tensor));
  if (epoch) ckpt.put("meta.epoch", to_raw(Tensor<Scalar>::scalar(static_cast<Scalar>(*epoch))));
  return ckpt;
}

namespace {

const Shape& shape_of(const Checkpoint& ckpt, const std::string& name, std::size_t rank) {
  const Shape& s = ckpt.at(name).shape;
  if (s.size() != rank) throw IoError("checkpoint entry '" + name + "' has unexpected shape " + to_string(s));
  return s;
}

}  // namespace

ModelConfig infer_model_config(const Checkpoint& ckpt, ModelConfig base) {
  const Shape& b1 = shape_of(ckpt, "backbone.level1.kernel", 4);
  base.backbone.base_channels = static_cast<int>(b1[0]);
  base.backbone.in_channels = static_cast<int>(b1[1]);
  const Shape& pool = shape_of(ckpt, "seg.enc.level1.pool", 2);
  base.encoder.pooled = static_cast<int>(pool[0]);
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(pool[1]))));
  if (static_cast<Index>(side) * side != pool[1]) throw IoError("checkpoint support grid is not square");
  base.backbone.image_size = side;
  base.attn_k = static_cast<int>(shape_of(ckpt, "seat.attn.kernel", 4)[2]);
  base.encoder.pivot_channels = static_cast<int>(shape_of(ckpt, "seg.enc.level1.pivot.kernel", 4)[0]);
  base.encoder.hidden = static_cast<int>(shape_of(ckpt, "seg.dec.conv1.kernel", 4)[0]);
  base.validate();
  return base;
}

template <typename Scalar>
Model<Scalar> load_model(const Checkpoint& ckpt, const ModelConfig& base) {
  Model<Scalar> model = Model<Scalar>::init(infer_model_config(ckpt, base));
  const auto copy = [&](const std::vector<NamedTensor<Scalar>>& params) {
    for (auto p : params) {
      const RawTensor& raw = ckpt.at(p.name);
      if (raw.shape != p.tensor.shape()) {
        throw IoError("checkpoint entry '" + p.name + "' has shape " + to_string(raw.shape) + ", model expects " +
                      to_string(p.tensor.shape()));
      }
      p.tensor.mutable_data() = from_raw<Scalar>(raw).data();
    }
  };
  copy(model.backbone_parameters());
  copy(model.trainable_parameters());
  return model;
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> optimizer_state(const Checkpoint& ckpt) {
  std::vector<NamedTensor<Scalar>> out;
  for (const auto& [name, raw] : ckpt.entries) {
    if (name.rfind("opt.", 0) == 0) out.push_back({name, from_raw<Scalar>(raw)});
  }
  return out;
}

std::optional<int> checkpoint_epoch(const Checkpoint& ckpt) {
  const RawTensor* t = ckpt.find("meta.epoch");
  if (!t || t->values.size() != 1) return std::nullopt;
  return static_cast<int>(t->values[0]);
}

#define RESTNET_INSTANTIATE_CHECKPOINT(S)                                                                  \
  template Checkpoint model_checkpoint(const Model<S>&, const std::vector<NamedTensor<S>>&, std::optional<int>); \
  template Model<S> load_model(const Checkpoint&, const ModelConfig&);                                     \
  template std::vector<NamedTensor<S>> optimizer_state(const Checkpoint&);

RESTNET_INSTANTIATE_CHECKPOINT(float)
RESTNET_INSTANTIATE_CHECKPOINT(double)

}  // namespace restnet

#include "restnet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace restnet {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in section '" + section + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + section + "." + key + "'");
  }
}

void read_seed(const json& j, const char* key, std::uint64_t& out, const std::string& section) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    throw ConfigError("'" + section + "." + key + "' must be a non-negative integer");
  }
  out = v.get<std::uint64_t>();
}

DomainSpec parse_domain(const json& j, DomainSpec d, const std::string& section) {
  check_keys(j, section, {"domain_id", "class_set", "texture", "fg_intensity", "bg_intensity", "noise_sigma", "seed"});
  read(j, "domain_id", d.domain_id, section);
  read(j, "class_set", d.class_set, section);
  read(j, "texture", d.texture, section);
  read(j, "fg_intensity", d.fg_intensity, section);
  read(j, "bg_intensity", d.bg_intensity, section);
  read(j, "noise_sigma", d.noise_sigma, section);
  read_seed(j, "seed", d.seed, section);
  return d;
}

json domain_json(const DomainSpec& d) {
  return {{"domain_id", d.domain_id},       {"class_set", d.class_set},       {"texture", d.texture},
          {"fg_intensity", d.fg_intensity}, {"bg_intensity", d.bg_intensity}, {"noise_sigma", d.noise_sigma},
          {"seed", d.seed}};
}

ModelConfig parse_model(const json& j, ModelConfig m) {
  check_keys(j, "model", {"base_channels", "backbone_seed", "init_seed", "attn_k", "encoder", "ridge",
                          "prototypes_from", "kshot_merge"});
  read(j, "base_channels", m.backbone.base_channels, "model");
  read_seed(j, "backbone_seed", m.backbone.seed, "model");
  read_seed(j, "init_seed", m.init_seed, "model");
  read(j, "attn_k", m.attn_k, "model");
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    check_keys(e, "model.encoder", {"kind", "pooled", "pivot_channels", "hidden"});
    read(e, "kind", m.encoder.kind, "model.encoder");
    read(e, "pooled", m.encoder.pooled, "model.encoder");
    read(e, "pivot_channels", m.encoder.pivot_channels, "model.encoder");
    read(e, "hidden", m.encoder.hidden, "model.encoder");
  }
  if (j.contains("ridge")) {
    const json& r = j.at("ridge");
    if (r.is_string() && r.get<std::string>() == "auto") {
      m.ridge.reset();
    } else if (r.is_number()) {
      m.ridge = r.get<double>();
    } else {
      throw ConfigError("'model.ridge' must be a number or \"auto\"");
    }
  }
  if (j.contains("prototypes_from")) {
    std::string s;
    read(j, "prototypes_from", s, "model");
    if (s == "enhanced") {
      m.prototypes_from = PrototypeSource::Enhanced;
    } else if (s == "raw") {
      m.prototypes_from = PrototypeSource::Raw;
    } else {
      throw ConfigError("'model.prototypes_from' must be \"enhanced\" or \"raw\"");
    }
  }
  if (j.contains("kshot_merge")) {
    std::string s;
    read(j, "kshot_merge", s, "model");
    if (s != "avg") throw ConfigError("'model.kshot_merge' must be \"avg\"");
  }
  return m;
}

json model_json(const ModelConfig& m) {
  json j;
  j["base_channels"] = m.backbone.base_channels;
  j["backbone_seed"] = m.backbone.seed;
  j["init_seed"] = m.init_seed;
  j["attn_k"] = m.attn_k;
  j["encoder"] = {{"kind", m.encoder.kind},
                  {"pooled", m.encoder.pooled},
                  {"pivot_channels", m.encoder.pivot_channels},
                  {"hidden", m.encoder.hidden}};
  if (m.ridge) {
    j["ridge"] = *m.ridge;
  } else {
    j["ridge"] = "auto";
  }
  j["prototypes_from"] = m.prototypes_from == PrototypeSource::Enhanced ? "enhanced" : "raw";
  j["kshot_merge"] = "avg";
  return j;
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

ModelConfig RunConfig::model_for(int image_size, int channels) const {
  ModelConfig m = model;
  m.backbone.image_size = image_size;
  m.backbone.in_channels = channels;
  return m;
}

void RunConfig::validate() const {
  forge.validate();
  model_for(forge.image_size, forge.channels).validate();
  train.validate();
  if (eval.n_episodes < 1) throw ConfigError("eval.n_episodes must be >= 1");
  if (eval.k < 1) throw ConfigError("eval.k must be >= 1");
  if (gradcheck.image_size < 4 || gradcheck.image_size % 4 != 0) {
    throw ConfigError("gradcheck.image_size must be a positive multiple of 4");
  }
  if (gradcheck.coords_per_group < 1) throw ConfigError("gradcheck.coords_per_group must be >= 1");
  if (!(gradcheck.tolerance > 0) || !(gradcheck.step > 0)) {
    throw ConfigError("gradcheck tolerance and step must be positive");
  }
}

RunConfig parse_run_config(const std::string& json_text) {
  const json j = parse_json(json_text);
  check_keys(j, "<root>", {"forge", "model", "train", "eval", "gradcheck"});
  RunConfig cfg;
  if (j.contains("forge")) {
    const json& f = j.at("forge");
    check_keys(f, "forge", {"source", "target", "n_images_per_class", "image_size", "channels"});
    if (f.contains("source")) cfg.forge.source = parse_domain(f.at("source"), cfg.forge.source, "forge.source");
    if (f.contains("target")) cfg.forge.target = parse_domain(f.at("target"), cfg.forge.target, "forge.target");
    read(f, "n_images_per_class", cfg.forge.n_images_per_class, "forge");
    read(f, "image_size", cfg.forge.image_size, "forge");
    read(f, "channels", cfg.forge.channels, "forge");
  }
  if (j.contains("model")) cfg.model = parse_model(j.at("model"), cfg.model);
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train", {"lr", "optimizer", "beta1", "beta2", "eps", "epochs", "episodes_per_epoch", "k_shot",
                            "seed", "loss_weights", "dtype", "domain"});
    read(t, "lr", cfg.train.lr, "train");
    read(t, "optimizer", cfg.train.optimizer, "train");
    read(t, "beta1", cfg.train.beta1, "train");
    read(t, "beta2", cfg.train.beta2, "train");
    read(t, "eps", cfg.train.eps, "train");
    read(t, "epochs", cfg.train.epochs, "train");
    read(t, "episodes_per_epoch", cfg.train.episodes_per_epoch, "train");
    read(t, "k_shot", cfg.train.k_shot, "train");
    read_seed(t, "seed", cfg.train.seed, "train");
    read(t, "loss_weights", cfg.train.loss_weights, "train");
    read(t, "domain", cfg.train.domain, "train");
    if (t.contains("dtype")) {
      std::string s;
      read(t, "dtype", s, "train");
      try {
        cfg.train.dtype = parse_dtype(s);
      } catch (const std::exception& e) {
        throw ConfigError(e.what());
      }
    }
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval", {"domain", "n_episodes", "k", "seed"});
    read(e, "domain", cfg.eval.domain, "eval");
    read(e, "n_episodes", cfg.eval.n_episodes, "eval");
    read(e, "k", cfg.eval.k, "eval");
    read_seed(e, "seed", cfg.eval.seed, "eval");
  }
  if (j.contains("gradcheck")) {
    const json& g = j.at("gradcheck");
    check_keys(g, "gradcheck", {"image_size", "coords_per_group", "tolerance", "step", "seed"});
    read(g, "image_size", cfg.gradcheck.image_size, "gradcheck");
    read(g, "coords_per_group", cfg.gradcheck.coords_per_group, "gradcheck");
    read(g, "tolerance", cfg.gradcheck.tolerance, "gradcheck");
    read(g, "step", cfg.gradcheck.step, "gradcheck");
    read_seed(g, "seed", cfg.gradcheck.seed, "gradcheck");
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& cfg) {
  json j;
  j["forge"] = {{"source", domain_json(cfg.forge.source)},
                {"target", domain_json(cfg.forge.target)},
                {"n_images_per_class", cfg.forge.n_images_per_class},
                {"image_size", cfg.forge.image_size},
                {"channels", cfg.forge.channels}};
  j["model"] = model_json(cfg.model);
  const TrainConfig& t = cfg.train;
  j["train"] = {{"lr", t.lr},
                {"optimizer", t.optimizer},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"epochs", t.epochs},
                {"episodes_per_epoch", t.episodes_per_epoch},
                {"k_shot", t.k_shot},
                {"seed", t.seed},
                {"loss_weights", t.loss_weights},
                {"dtype", dtype_name(t.dtype)},
                {"domain", t.domain}};
  j["eval"] = {{"domain", cfg.eval.domain}, {"n_episodes", cfg.eval.n_episodes}, {"k", cfg.eval.k},
               {"seed", cfg.eval.seed}};
  j["gradcheck"] = {{"image_size", cfg.gradcheck.image_size},
                    {"coords_per_group", cfg.gradcheck.coords_per_group},
                    {"tolerance", cfg.gradcheck.tolerance},
                    {"step", cfg.gradcheck.step},
                    {"seed", cfg.gradcheck.seed}};
  return j.dump(2) + "\n";
}

Episode gradcheck_episode(const RunConfig& cfg) {
  ForgeConfig forge = cfg.forge;
  forge.image_size = cfg.gradcheck.image_size;
  forge.n_images_per_class = 2;
  const Dataset ds = render_dataset(forge, true);
  return sample_episode(ds, forge.source.domain_id, 1, cfg.gradcheck.seed);
}

GradcheckReport run_gradcheck(const RunConfig& cfg) {
  Model<double> model = Model<double>::init(cfg.model_for(cfg.gradcheck.image_size, cfg.forge.channels));
  GradcheckOptions opts;
  opts.tolerance = cfg.gradcheck.tolerance;
  opts.coords_per_group = cfg.gradcheck.coords_per_group;
  opts.step = cfg.gradcheck.step;
  opts.seed = cfg.gradcheck.seed;
  opts.loss_weights = cfg.train.loss_weights;
  return gradcheck(model, gradcheck_episode(cfg), opts);
}

ModelConfig parse_model_section(const std::string& json_text) {
  const json j = parse_json(json_text);
  ModelConfig m;
  if (j.is_object() && j.contains("model")) m = parse_model(j.at("model"), m);
  return m;
}

}  // namespace restnet

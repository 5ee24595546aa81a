#include "restnet/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <set>

#include <json.hpp>

#include "restnet/errors.hpp"
#include "restnet/pgm.hpp"
#include "restnet/tensor_io.hpp"

namespace restnet {

namespace fs = std::filesystem;
using nlohmann::json;

void DomainSpec::validate() const {
  if (domain_id.empty()) throw ConfigError("domain_id must not be empty");
  if (domain_id.find('/') != std::string::npos) throw ConfigError("domain_id must not contain '/'");
  if (class_set.empty()) throw ConfigError("domain '" + domain_id + "' has no classes");
  std::set<std::string> seen;
  for (const auto& c : class_set) {
    if (std::find(kShapeClasses.begin(), kShapeClasses.end(), c) == kShapeClasses.end()) {
      throw ConfigError("domain '" + domain_id + "': unknown shape class '" + c + "'");
    }
    if (!seen.insert(c).second) throw ConfigError("domain '" + domain_id + "': duplicate class '" + c + "'");
  }
  if (std::find(kTextures.begin(), kTextures.end(), texture) == kTextures.end()) {
    throw ConfigError("domain '" + domain_id + "': unknown texture '" + texture + "'");
  }
  for (const auto* range : {&fg_intensity, &bg_intensity}) {
    if ((*range)[0] < 0 || (*range)[1] > 1 || (*range)[0] > (*range)[1]) {
      throw ConfigError("domain '" + domain_id + "': intensity ranges must satisfy 0 <= lo <= hi <= 1");
    }
  }
  if (noise_sigma < 0) throw ConfigError("domain '" + domain_id + "': noise_sigma must be >= 0");
}

double DomainSpec::intensity_gap() const {
  return std::max({0.0, fg_intensity[0] - bg_intensity[1], bg_intensity[0] - fg_intensity[1]});
}

ForgeConfig ForgeConfig::defaults() {
  ForgeConfig cfg;
  cfg.source.domain_id = "source";
  cfg.source.class_set = {"rect", "ellipse", "triangle"};
  cfg.source.texture = "flat";
  cfg.source.fg_intensity = {0.6, 0.9};
  cfg.source.bg_intensity = {0.1, 0.35};
  cfg.source.noise_sigma = 0.03;
  cfg.source.seed = 11;
  cfg.target.domain_id = "target";
  cfg.target.class_set = {"cross", "ring", "stripe"};
  cfg.target.texture = "gaussian-noise";
  cfg.target.fg_intensity = {0.45, 0.75};
  cfg.target.bg_intensity = {0.0, 0.2};
  cfg.target.noise_sigma = 0.05;
  cfg.target.seed = 23;
  return cfg;
}

void ForgeConfig::validate() const {
  source.validate();
  target.validate();
  if (source.domain_id == target.domain_id) throw ConfigError("source and target domain ids must differ");
  for (const auto& c : source.class_set) {
    if (std::find(target.class_set.begin(), target.class_set.end(), c) != target.class_set.end()) {
      throw ConfigError("source and target domains share class '" + c + "'; label spaces must be disjoint");
    }
  }
  if (n_images_per_class < 2) throw ConfigError("n_images_per_class must be >= 2");
  if (image_size < 4 || image_size % 4 != 0) throw ConfigError("image_size must be a positive multiple of 4");
  if (channels < 1) throw ConfigError("channels must be >= 1");
}

void Episode::validate() const {
  if (supports.empty()) throw SamplingError("episode " + episode_id + " has no support shots");
  auto binary = [](const Tensor<double>& m) { return ((m.data() == 0.0) || (m.data() == 1.0)).all(); };
  for (const auto& s : supports) {
    if (!binary(s.mask)) throw std::invalid_argument("episode " + episode_id + ": support mask is not binary");
  }
  if (!binary(query_mask)) throw std::invalid_argument("episode " + episode_id + ": query mask is not binary");
}

const DomainData& Dataset::domain(const std::string& id) const {
  for (const auto& d : domains) {
    if (d.domain_id == id) return d;
  }
  throw SamplingError("dataset has no domain '" + id + "'");
}

bool Dataset::has_domain(const std::string& id) const {
  return std::any_of(domains.begin(), domains.end(), [&](const DomainData& d) { return d.domain_id == id; });
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

// Shape membership in the shape's own frame, where the shape spans roughly
// [-1, 1] along its major axis.
bool inside(const std::string& cls, double u, double v) {
  if (cls == "rect") return std::abs(u) <= 1.0 && std::abs(v) <= 0.6;
  if (cls == "ellipse") return u * u + (v / 0.6) * (v / 0.6) <= 1.0;
  if (cls == "triangle") {
    // Vertices (0, -1), (0.95, 0.7), (-0.95, 0.7).
    if (v > 0.7) return false;
    const double half = 0.95 * (v + 1.0) / 1.7;
    return v >= -1.0 && std::abs(u) <= half;
  }
  if (cls == "cross") return (std::abs(u) <= 1.0 && std::abs(v) <= 0.3) || (std::abs(u) <= 0.3 && std::abs(v) <= 1.0);
  if (cls == "ring") {
    const double r = std::hypot(u, v);
    return r >= 0.55 && r <= 1.0;
  }
  if (cls == "stripe") return std::abs(u) <= 1.6 && std::abs(v) <= 0.25;
  throw ConfigError("unknown shape class '" + cls + "'");
}

// Smooth blotchy field: 4x4 grid of N(0, sigma) values, bilinearly upsampled.
std::vector<double> blotch_field(int size, double sigma, Rng& rng) {
  constexpr int kGrid = 4;
  std::array<double, kGrid * kGrid> grid{};
  for (auto& g : grid) g = sigma * rng.normal();
  std::vector<double> field(static_cast<std::size_t>(size * size));
  for (int y = 0; y < size; ++y) {
    const double gy = std::clamp((y + 0.5) * kGrid / size - 0.5, 0.0, kGrid - 1.0);
    const int y0 = std::min(static_cast<int>(gy), kGrid - 2);
    const double fy = gy - y0;
    for (int x = 0; x < size; ++x) {
      const double gx = std::clamp((x + 0.5) * kGrid / size - 0.5, 0.0, kGrid - 1.0);
      const int x0 = std::min(static_cast<int>(gx), kGrid - 2);
      const double fx = gx - x0;
      const auto at = [&](int yy, int xx) { return grid[static_cast<std::size_t>(yy * kGrid + xx)]; };
      field[static_cast<std::size_t>(y * size + x)] =
          (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  }
  return field;
}

Sample render_sample(const DomainSpec& spec, const std::string& cls, int size, int channels, bool exact, Rng& rng) {
  Sample s;
  s.mask = render_shape(cls, size, rng);
  const double fg = rng.uniform(spec.fg_intensity[0], spec.fg_intensity[1]);
  const double bg = rng.uniform(spec.bg_intensity[0], spec.bg_intensity[1]);
  const std::size_t n = static_cast<std::size_t>(size * size);
  std::vector<double> texture(n, 0.0);
  if (spec.texture == "gaussian-noise") {
    texture = blotch_field(size, 0.05, rng);
  } else if (spec.texture == "gradient") {
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amplitude = 0.1;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double t = ((x + 0.5) / size - 0.5) * std::cos(theta) + ((y + 0.5) / size - 0.5) * std::sin(theta);
        texture[static_cast<std::size_t>(y * size + x)] = amplitude * t;
      }
    }
  }
  Buffer<double> img(channels * static_cast<Index>(n));
  for (int c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const double base = s.mask.data()[static_cast<Index>(i)] > 0.5 ? fg : bg;
      double v = std::clamp(base + texture[i] + spec.noise_sigma * rng.normal(), 0.0, 1.0);
      if (!exact) v = quantize_unit(v) / 255.0;
      img[c * static_cast<Index>(n) + static_cast<Index>(i)] = v;
    }
  }
  s.image = Tensor<double>({channels, size, size}, std::move(img));
  return s;
}

}  // namespace

Tensor<double> render_shape(const std::string& shape_class, int image_size, Rng& rng) {
  const double cx = rng.uniform(0.3, 0.7) * image_size;
  const double cy = rng.uniform(0.3, 0.7) * image_size;
  const double radius = rng.uniform(0.18, 0.32) * image_size;
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  Buffer<double> mask = Buffer<double>::Zero(image_size * image_size);
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (ct * dx + st * dy) / radius;
      const double v = (-st * dx + ct * dy) / radius;
      if (inside(shape_class, u, v)) mask[y * image_size + x] = 1.0;
    }
  }
  if (mask.sum() == 0.0) {
    const int px = std::clamp(static_cast<int>(cx), 0, image_size - 1);
    const int py = std::clamp(static_cast<int>(cy), 0, image_size - 1);
    mask[py * image_size + px] = 1.0;
  }
  return Tensor<double>({image_size, image_size}, std::move(mask));
}

Dataset render_dataset(const ForgeConfig& cfg, bool exact) {
  cfg.validate();
  Dataset ds;
  ds.image_size = cfg.image_size;
  ds.channels = cfg.channels;
  for (const DomainSpec* spec : {&cfg.source, &cfg.target}) {
    Rng rng(spec->seed);
    DomainData domain{spec->domain_id, {}};
    for (const auto& cls : spec->class_set) {
      ClassImages images{cls, {}};
      for (int i = 0; i < cfg.n_images_per_class; ++i) {
        Sample s = render_sample(*spec, cls, cfg.image_size, cfg.channels, exact, rng);
        char stem[32];
        std::snprintf(stem, sizeof stem, "%03d", i);
        const std::string dir = spec->domain_id + "/" + cls + "/";
        s.image_path = dir + "img_" + stem + ".pgm";
        s.mask_path = dir + "mask_" + stem + ".pgm";
        images.images.push_back(std::move(s));
      }
      domain.classes.push_back(std::move(images));
    }
    ds.domains.push_back(std::move(domain));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Disk layout

namespace {

fs::path exact_path(const fs::path& pgm) {
  fs::path p = pgm;
  p.replace_extension(".rtnt");
  return p;
}

// Channels are stacked vertically in the PGM.
GrayImage to_gray(const Tensor<double>& t, int height, int width) {
  GrayImage g;
  g.width = width;
  g.height = height;
  g.pixels.resize(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) g.pixels[static_cast<std::size_t>(i)] = quantize_unit(t.data()[i]);
  return g;
}

Tensor<double> from_gray(const GrayImage& g, Shape shape, const fs::path& where) {
  if (static_cast<Index>(g.pixels.size()) != numel(shape)) {
    throw IoError(where.string() + ": image size does not match manifest shape " + to_string(shape));
  }
  Buffer<double> data(numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = g.pixels[static_cast<std::size_t>(i)] / 255.0;
  return Tensor<double>(std::move(shape), std::move(data));
}

}  // namespace

void write_dataset(const Dataset& ds, const fs::path& root, bool exact) {
  json manifest;
  manifest["version"] = 1;
  manifest["image_size"] = ds.image_size;
  manifest["channels"] = ds.channels;
  manifest["domains"] = json::array();
  for (const auto& d : ds.domains) {
    json jd{{"domain_id", d.domain_id}, {"classes", json::array()}};
    for (const auto& c : d.classes) {
      json jc{{"class_id", c.class_id}, {"images", json::array()}};
      for (const auto& s : c.images) {
        const fs::path img = root / s.image_path;
        fs::create_directories(img.parent_path());
        write_pgm(img, to_gray(s.image, ds.channels * ds.image_size, ds.image_size));
        write_pgm(root / s.mask_path, to_gray(s.mask, ds.image_size, ds.image_size));
        if (exact) save_tensor(exact_path(img), s.image);
        jc["images"].push_back({{"img", s.image_path}, {"mask", s.mask_path}});
      }
      jd["classes"].push_back(std::move(jc));
    }
    manifest["domains"].push_back(std::move(jd));
  }
  fs::create_directories(root);
  std::ofstream os(root / "manifest.json", std::ios::binary);
  if (!os) throw IoError("cannot write " + (root / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

Dataset read_dataset(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open dataset manifest " + manifest_path.string());
  Dataset ds;
  try {
    const json manifest = json::parse(is);
    if (manifest.at("version").get<int>() != 1) throw IoError("unsupported manifest version");
    ds.image_size = manifest.at("image_size").get<int>();
    ds.channels = manifest.at("channels").get<int>();
    for (const auto& jd : manifest.at("domains")) {
      DomainData d{jd.at("domain_id").get<std::string>(), {}};
      for (const auto& jc : jd.at("classes")) {
        ClassImages c{jc.at("class_id").get<std::string>(), {}};
        for (const auto& ji : jc.at("images")) {
          Sample s;
          s.image_path = ji.at("img").get<std::string>();
          s.mask_path = ji.at("mask").get<std::string>();
          const fs::path img = root / s.image_path;
          if (fs::exists(exact_path(img))) {
            s.image = load_tensor<double>(exact_path(img));
          } else {
            s.image = from_gray(read_pgm(img), {ds.channels, ds.image_size, ds.image_size}, img);
          }
          s.mask = from_gray(read_pgm(root / s.mask_path), {ds.image_size, ds.image_size}, root / s.mask_path);
          s.mask.mutable_data() = (s.mask.data() >= 0.5).cast<double>();
          c.images.push_back(std::move(s));
        }
        d.classes.push_back(std::move(c));
      }
      ds.domains.push_back(std::move(d));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return ds;
}

Dataset forge_dataset(const ForgeConfig& cfg, const fs::path& root, bool exact) {
  Dataset ds = render_dataset(cfg, exact);
  write_dataset(ds, root, exact);
  return ds;
}

Episode sample_episode(const Dataset& ds, const std::string& domain_id, int k, std::uint64_t seed) {
  if (k < 1) throw SamplingError("k must be >= 1");
  const DomainData& domain = ds.domain(domain_id);
  std::vector<const ClassImages*> eligible;
  for (const auto& c : domain.classes) {
    if (static_cast<int>(c.images.size()) >= k + 1) eligible.push_back(&c);
  }
  if (eligible.empty()) {
    throw SamplingError("domain '" + domain_id + "' has no class with " + std::to_string(k + 1) + " images");
  }
  Rng rng(seed);
  const ClassImages& cls = *eligible[rng.below(eligible.size())];
  std::vector<std::size_t> order(cls.images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int i = 0; i <= k; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.below(order.size() - static_cast<std::size_t>(i));
    std::swap(order[static_cast<std::size_t>(i)], order[j]);
  }
  Episode ep;
  ep.class_id = cls.class_id;
  ep.domain_id = domain_id;
  ep.episode_id = domain_id + "/" + cls.class_id;
  for (int i = 0; i < k; ++i) {
    const Sample& s = cls.images[order[static_cast<std::size_t>(i)]];
    ep.supports.push_back({s.image, s.mask});
    ep.episode_id += ":" + std::to_string(order[static_cast<std::size_t>(i)]);
  }
  const Sample& q = cls.images[order[static_cast<std::size_t>(k)]];
  ep.query_image = q.image;
  ep.query_mask = q.mask;
  ep.episode_id += "->" + std::to_string(order[static_cast<std::size_t>(k)]);
  return ep;
}

}  // namespace restnet

// restnet: forge datasets, train, evaluate, diagnose and gradient-check.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration or I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "restnet/checkpoint.hpp"
#include "restnet/config.hpp"
#include "restnet/ire.hpp"
#include "restnet/log.hpp"
#include "restnet/pgm.hpp"
#include "restnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace restnet;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kConfigError = 2;

RunConfig load_config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

// Timestamped run log; timestamps appear nowhere else.
class RunLog {
 public:
  explicit RunLog(const fs::path& path) : os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot write " + path.string());
  }

  void line(const std::string& msg) {
    std::lock_guard<std::mutex> lock(mu_);
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", std::localtime(&now));
    os_ << stamp << ' ' << msg << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
  std::mutex mu_;
};

Dataset load_dataset(const std::string& path) {
  if (!fs::exists(fs::path(path) / "manifest.json")) throw IoError("no dataset at " + path);
  return read_dataset(path);
}

// Non-shape model knobs come from the run directory's resolved config when
// one sits next to the checkpoint.
ModelConfig sibling_model_config(const fs::path& checkpoint) {
  const fs::path resolved = checkpoint.parent_path() / "config.resolved.json";
  if (!fs::exists(resolved)) return ModelConfig{};
  return parse_model_section(read_text(resolved));
}

bool is_float32(const Checkpoint& ckpt) { return ckpt.at("backbone.level1.kernel").dtype == DType::Float32; }

void print_gradcheck(const GradcheckReport& report) {
  for (const auto& g : report.groups) {
    std::cout << g.name << " coords=" << g.coords << " skipped=" << g.skipped << " max_rel_err=" << fmt("%.3e", g.max_rel_error)
              << " max_abs_err=" << fmt("%.3e", g.max_abs_error) << '\n';
  }
  std::cout << "gradcheck " << (report.passed ? "PASS" : "FAIL") << " tolerance=" << fmt("%.1e", report.tolerance)
            << '\n';
}

// ---------------------------------------------------------------------------

int cmd_forge(const std::string& config, const std::string& out, bool exact) {
  const RunConfig cfg = load_config_or_default(config);
  const Dataset ds = forge_dataset(cfg.forge, out, exact);
  std::size_t images = 0;
  for (const auto& d : ds.domains) {
    for (const auto& c : d.classes) images += c.images.size();
  }
  std::cout << "forged " << images << " images in " << ds.domains.size() << " domains to " << out << '\n';
  return kOk;
}

template <typename Scalar>
int run_training(const RunConfig& cfg, const Dataset& ds, const fs::path& out, RunLog& log) {
  Model<Scalar> model = Model<Scalar>::init(cfg.model_for(ds.image_size, ds.channels));
  Optimizer<Scalar> opt(cfg.train, model.trainable_parameters());
  write_checkpoint(out / "ckpt_epoch0.rtck", model_checkpoint(model, opt.state(), 0));

  std::ofstream metrics(out / "metrics.csv", std::ios::binary);
  if (!metrics) throw IoError("cannot write " + (out / "metrics.csv").string());
  metrics << kMetricsHeader << '\n';

  TrainCallbacks callbacks;
  callbacks.on_row = [&](const MetricsRow& row) { metrics << format_metrics_row(row) << '\n'; };
  callbacks.on_epoch_end = [&](int epoch, double mean_loss) {
    metrics.flush();
    const std::string name = "ckpt_epoch" + std::to_string(epoch) + ".rtck";
    write_checkpoint(out / name, model_checkpoint(model, opt.state(), epoch));
    const std::string msg = "epoch " + std::to_string(epoch) + " mean_loss=" + fmt("%.6f", mean_loss);
    std::cout << msg << std::endl;
    log.line(msg + " wrote " + name);
  };
  train(model, opt, ds, cfg.train, callbacks);
  return kOk;
}

int cmd_train(const std::string& config, const std::string& dataset, const std::string& out,
              const std::string& dtype, bool gradcheck_first) {
  RunConfig cfg = load_config_or_default(config);
  if (!dtype.empty()) cfg.train.dtype = parse_dtype(dtype);
  const Dataset ds = load_dataset(dataset);
  if (!ds.has_domain(cfg.train.domain)) throw IoError("dataset has no domain '" + cfg.train.domain + "'");
  cfg.forge.image_size = ds.image_size;
  cfg.forge.channels = ds.channels;

  fs::create_directories(out);
  write_text(fs::path(out) / "config.resolved.json", dump_run_config(cfg));
  RunLog log(fs::path(out) / "log.txt");
  set_warning_sink([&](const std::string& msg) { log.line("warning: " + msg); });
  log.line("train dataset=" + dataset + " dtype=" + dtype_name(cfg.train.dtype));

  if (gradcheck_first) {
    if (cfg.train.dtype != DType::Float64) throw ConfigError("--gradcheck-first requires --dtype float64");
    const GradcheckReport report = run_gradcheck(cfg);
    print_gradcheck(report);
    log.line(std::string("gradcheck ") + (report.passed ? "passed" : "failed"));
    if (!report.passed) {
      std::cerr << "gradient check failed; training aborted\n";
      return kVerifyFailed;
    }
  }

  int rc = cfg.train.dtype == DType::Float64 ? run_training<double>(cfg, ds, out, log)
                                             : run_training<float>(cfg, ds, out, log);
  log.line("done");
  set_warning_sink({});
  return rc;
}

template <typename Scalar>
EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const ModelConfig& base, const Dataset& ds,
                               const std::string& domain, int n, int k, std::uint64_t seed, int jobs) {
  const Model<Scalar> model = load_model<Scalar>(ckpt, base);
  return evaluate(model, ds, domain, n, k, seed, jobs);
}

GrayImage binary_mask(const Tensor<double>& probs) {
  GrayImage g;
  g.height = static_cast<int>(probs.dim(0));
  g.width = static_cast<int>(probs.dim(1));
  g.pixels.resize(static_cast<std::size_t>(probs.size()));
  for (Index i = 0; i < probs.size(); ++i) {
    const double v = probs.data()[i];
    g.pixels[static_cast<std::size_t>(i)] = v > 0.5 ? 255 : 0;
  }
  return g;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& domain, int k, int n,
             std::uint64_t seed, const std::string& out, bool dump_soft, int jobs) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const ModelConfig base = sibling_model_config(checkpoint);
  const Dataset ds = load_dataset(dataset);
  if (!ds.has_domain(domain)) throw IoError("dataset has no domain '" + domain + "'");
  if (n < 1) throw ConfigError("--n must be >= 1");
  if (k < 1) throw ConfigError("--k must be >= 1");

  const EvalResult result = is_float32(ckpt) ? evaluate_checkpoint<float>(ckpt, base, ds, domain, n, k, seed, jobs)
                                             : evaluate_checkpoint<double>(ckpt, base, ds, domain, n, k, seed, jobs);
  if (!out.empty()) {
    const fs::path dir(out);
    fs::create_directories(dir / "masks");
    std::ofstream csv(dir / "eval.csv", std::ios::binary);
    if (!csv) throw IoError("cannot write " + (dir / "eval.csv").string());
    csv << "index,episode_id,coarse_ce,fine_ce,coarse_iou,fine_iou\n";
    for (const auto& r : result.rows) {
      char buf[160];
      std::snprintf(buf, sizeof buf, ",%.9g,%.9g,%.6f,%.6f", r.coarse_ce, r.fine_ce, r.coarse_iou, r.fine_iou);
      csv << r.index << ',' << r.episode_id << buf << '\n';
      char name[32];
      std::snprintf(name, sizeof name, "%04d", r.index);
      write_pgm(dir / "masks" / (std::string("pred_") + name + ".pgm"), binary_mask(r.fine_probs));
      if (dump_soft) {
        save_tensor(dir / "masks" / (std::string("soft_") + name + ".rtnt"), r.fine_probs);
      }
    }
  }
  std::cout << "episodes=" << n << " k=" << k << " domain=" << domain << '\n';
  std::cout << "mean_coarse_iou=" << fmt("%.4f", result.mean_coarse_iou) << '\n';
  std::cout << "mean_iou=" << fmt("%.4f", result.mean_iou) << std::endl;
  return kOk;
}

struct LevelCount {
  std::int64_t count = 0;
  std::int64_t total = 0;
};

template <typename Scalar>
std::vector<LevelCount> active_matching(const Checkpoint& ckpt, const ModelConfig& base, const Dataset& ds,
                                        const std::string& domain, int n, std::uint64_t seed) {
  const Model<Scalar> model = load_model<Scalar>(ckpt, base);
  std::vector<LevelCount> levels(kNumLevels);
  for (int i = 0; i < n; ++i) {
    const Episode ep = sample_episode(ds, domain, 1, derive_seed(seed, static_cast<std::uint64_t>(i)));
    const EpisodeOutput<Scalar> out = segment_episode(ep, model);
    for (const auto& c : out.fine_correlations) {
      auto& lc = levels.at(static_cast<std::size_t>(c.level));
      lc.count += active_matching_count(c);
      lc.total += c.total_pairs();
    }
  }
  return levels;
}

std::vector<fs::path> checkpoints_in(const fs::path& p) {
  if (!fs::is_directory(p)) return {p};
  const std::regex pattern(R"(ckpt_epoch(\d+)\.rtck)");
  std::map<int, fs::path> found;
  for (const auto& entry : fs::directory_iterator(p)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) found[std::stoi(m[1])] = entry.path();
  }
  if (found.empty()) throw IoError("no ckpt_epoch*.rtck files in " + p.string());
  std::vector<fs::path> out;
  for (auto& [epoch, path] : found) out.push_back(path);
  return out;
}

int cmd_diagnose(const std::vector<std::string>& checkpoints, const std::string& dataset, const std::string& domain,
                 int n, std::uint64_t seed, const std::string& out) {
  if (n < 1) throw ConfigError("--n must be >= 1");
  const Dataset ds = load_dataset(dataset);
  if (!ds.has_domain(domain)) throw IoError("dataset has no domain '" + domain + "'");
  std::vector<fs::path> paths;
  for (const auto& c : checkpoints) {
    for (auto& p : checkpoints_in(c)) paths.push_back(p);
  }
  std::ostringstream csv;
  csv << "epoch,level,count,total_pairs\n";
  for (const auto& path : paths) {
    const Checkpoint ckpt = read_checkpoint(path);
    const ModelConfig base = sibling_model_config(path);
    const int epoch = checkpoint_epoch(ckpt).value_or(0);
    const auto levels = is_float32(ckpt) ? active_matching<float>(ckpt, base, ds, domain, n, seed)
                                         : active_matching<double>(ckpt, base, ds, domain, n, seed);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      csv << epoch << ',' << l + 1 << ',' << levels[l].count << ',' << levels[l].total << '\n';
    }
  }
  if (out.empty()) {
    std::cout << csv.str();
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_text(out, csv.str());
    std::cout << "wrote " << out << '\n';
  }
  return kOk;
}

int cmd_gradcheck(const std::string& config, std::optional<double> tolerance) {
  RunConfig cfg = load_config_or_default(config);
  if (tolerance) cfg.gradcheck.tolerance = *tolerance;
  if (!(cfg.gradcheck.tolerance > 0)) throw ConfigError("--tolerance must be positive");
  const GradcheckReport report = run_gradcheck(cfg);
  print_gradcheck(report);
  return report.passed ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RestNet cross-domain few-shot segmentation"};
  app.require_subcommand(1);

  std::string config, out, dataset, checkpoint, domain = "target", dtype;
  bool exact = false, gradcheck_first = false, dump_soft = false;
  int k = 1, n = 200, jobs = 1;
  std::uint64_t seed = 2024;
  std::optional<double> tolerance;
  std::vector<std::string> checkpoints;

  auto* forge = app.add_subcommand("forge", "Render the synthetic two-domain dataset");
  forge->add_option("--config", config, "Run configuration (JSON)");
  forge->add_option("--out", out, "Dataset directory")->required();
  forge->add_flag("--exact", exact, "Also store lossless RTNT copies of the images");

  auto* train = app.add_subcommand("train", "Episodic training on the source domain");
  train->add_option("--config", config, "Run configuration (JSON)");
  train->add_option("--dataset", dataset, "Dataset directory")->required();
  train->add_option("--out", out, "Run directory")->required();
  train->add_option("--dtype", dtype, "float32 or float64 (overrides train.dtype)");
  train->add_flag("--gradcheck-first", gradcheck_first, "Verify gradients before the first epoch");

  auto* eval = app.add_subcommand("eval", "Mean IoU over seeded episodes");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--dataset", dataset, "Dataset directory")->required();
  auto* eval_domain = eval->add_option("--domain", domain, "Domain to sample episodes from");
  auto* eval_k = eval->add_option("--k", k, "Support shots per episode");
  auto* eval_n = eval->add_option("--n", n, "Number of episodes");
  auto* eval_seed = eval->add_option("--seed", seed, "Episode seed");
  eval->add_option("--out", out, "Output directory for eval.csv and masks/");
  eval->add_flag("--dump-soft", dump_soft, "Also write soft foreground probabilities");
  eval->add_option("--jobs", jobs, "Episodes evaluated concurrently (results do not depend on it)");

  auto* diagnose = app.add_subcommand("diagnose", "Active-matching counts per level");
  diagnose->add_option("--checkpoint", checkpoints, "Checkpoint file or run directory (repeatable)")->required();
  diagnose->add_option("--dataset", dataset, "Dataset directory")->required();
  diagnose->add_option("--domain", domain, "Domain to sample episodes from");
  diagnose->add_option("--n", n, "Number of episodes");
  diagnose->add_option("--seed", seed, "Episode seed");
  diagnose->add_option("--out", out, "CSV path (stdout when absent)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gradcheck->add_option("--config", config, "Run configuration (JSON)");
  gradcheck->add_option("--tolerance", tolerance, "Maximum relative error per group");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*forge) return cmd_forge(config, out, exact);
    if (*train) return cmd_train(config, dataset, out, dtype, gradcheck_first);
    if (*eval) {
      // Flags left unset fall back to the eval section of the run's config.
      const fs::path resolved = fs::path(checkpoint).parent_path() / "config.resolved.json";
      if (fs::exists(resolved)) {
        const EvalConfig e = load_run_config(resolved).eval;
        if (!eval_domain->count()) domain = e.domain;
        if (!eval_k->count()) k = e.k;
        if (!eval_n->count()) n = e.n_episodes;
        if (!eval_seed->count()) seed = e.seed;
      }
      return cmd_eval(checkpoint, dataset, domain, k, n, seed, out, dump_soft, jobs);
    }
    if (*diagnose) return cmd_diagnose(checkpoints, dataset, domain, n, seed, out);
    if (*gradcheck) return cmd_gradcheck(config, tolerance);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DegenerateInputError& e) {
    std::cerr << "degenerate input: " << e.what() << '\n';
    return kConfigError;
  } catch (const SamplingError& e) {
    std::cerr << "sampling error: " << e.what() << '\n';
    return kConfigError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kVerifyFailed;
  }
  return kOk;
}

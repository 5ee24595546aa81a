#include "restnet/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

#include "restnet/log.hpp"
#include "restnet/ops.hpp"

namespace restnet {

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
  if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("optimizer must be adam or sgd");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("eps must be > 0");
  if (epochs < 0 || episodes_per_epoch < 0) throw ConfigError("epochs and episodes_per_epoch must be >= 0");
  if (k_shot < 1) throw ConfigError("k_shot must be >= 1");
  if (loss_weights[0] < 0 || loss_weights[1] < 0 || loss_weights[0] + loss_weights[1] == 0) {
    throw ConfigError("loss_weights must be non-negative and not both zero");
  }
}

std::string format_metrics_row(const MetricsRow& row) {
  char buf[96];
  std::snprintf(buf, sizeof buf, ",%.9g,%.6f", row.ce_loss, row.iou);
  return row.episode_id + "," + row.stage + buf;
}

template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const Tensor<Scalar>& gt) {
  if (logits.rank() != 3 || logits.dim(0) != 2 || gt.rank() != 2 || gt.dim(0) != logits.dim(1) ||
      gt.dim(1) != logits.dim(2)) {
    throw ShapeError("cross_entropy expects 2 x H x W logits and an H x W mask, got " + to_string(logits.shape()) +
                     " and " + to_string(gt.shape()));
  }
  if (!((gt.data() == Scalar(0)) || (gt.data() == Scalar(1))).all()) {
    throw std::invalid_argument("cross_entropy: ground-truth mask is not binary");
  }
  const Index hw = gt.size();
  Buffer<Scalar> onehot(2 * hw);
  for (Index i = 0; i < hw; ++i) {
    onehot[2 * i] = Scalar(1) - gt.data()[i];
    onehot[2 * i + 1] = gt.data()[i];
  }
  const Tensor<Scalar> log_probs = log_softmax_last(transpose(reshape(logits, {2, hw})));  // HW x 2
  return -(sum(mul(log_probs, Tensor<Scalar>({hw, 2}, std::move(onehot)))) / static_cast<Scalar>(hw));
}

template <typename Scalar>
Tensor<double> binarize(const Tensor<Scalar>& probs) {
  return Tensor<double>(probs.shape(), (probs.data() > Scalar(0.5)).template cast<double>());
}

double iou(const Tensor<double>& pred, const Tensor<double>& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("iou: shapes differ, " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
  }
  const auto p = pred.data() > 0.5;
  const auto g = gt.data() > 0.5;
  const auto inter = (p && g).count();
  const auto uni = (p || g).count();
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

template <typename Scalar>
Tensor<Scalar> total_loss(const EpisodeOutput<Scalar>& out, const Tensor<Scalar>& gt,
                          const std::array<double, 2>& weights) {
  Tensor<Scalar> loss = Tensor<Scalar>::scalar(0);
  if (weights[0] != 0) loss = loss + cross_entropy(out.coarse.logits, gt) * static_cast<Scalar>(weights[0]);
  if (weights[1] != 0) loss = loss + cross_entropy(out.fine.logits, gt) * static_cast<Scalar>(weights[1]);
  return loss;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename Scalar>
Optimizer<Scalar>::Optimizer(const TrainConfig& cfg, std::vector<NamedTensor<Scalar>> params)
    : cfg_(cfg), params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.push_back(Buffer<Scalar>::Zero(p.tensor.size()));
    v_.push_back(Buffer<Scalar>::Zero(p.tensor.size()));
  }
}

template <typename Scalar>
void Optimizer<Scalar>::step() {
  ++steps_;
  const auto lr = static_cast<Scalar>(cfg_.lr);
  if (cfg_.optimizer == "sgd") {
    for (auto& p : params_) {
      if (p.tensor.has_grad()) p.tensor.mutable_data() -= lr * p.tensor.grad();
    }
    return;
  }
  const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
  const auto eps = static_cast<Scalar>(cfg_.eps);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_)));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].tensor;
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
    v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.square();
    p.mutable_data() -= lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps);
  }
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> Optimizer<Scalar>::state() const {
  std::vector<NamedTensor<Scalar>> out;
  out.push_back({"opt.step", Tensor<Scalar>::scalar(static_cast<Scalar>(steps_))});
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"opt.m." + params_[i].name, Tensor<Scalar>(params_[i].tensor.shape(), m_[i])});
    out.push_back({"opt.v." + params_[i].name, Tensor<Scalar>(params_[i].tensor.shape(), v_[i])});
  }
  return out;
}

template <typename Scalar>
void Optimizer<Scalar>::load_state(const std::vector<NamedTensor<Scalar>>& state) {
  for (const auto& s : state) {
    if (s.name == "opt.step") {
      steps_ = static_cast<std::int64_t>(s.tensor.item());
      continue;
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (s.tensor.size() != params_[i].tensor.size()) continue;
      if (s.name == "opt.m." + params_[i].name) m_[i] = s.tensor.data();
      if (s.name == "opt.v." + params_[i].name) v_[i] = s.tensor.data();
    }
  }
}

// ---------------------------------------------------------------------------
// Training and evaluation

namespace {

template <typename Scalar>
std::string parameter_norms(const Model<Scalar>& model) {
  std::ostringstream os;
  for (const auto& p : model.trainable_parameters()) {
    os << "\n  " << p.name << " |w|=" << std::sqrt(static_cast<double>(p.tensor.data().square().sum()));
  }
  return os.str();
}

}  // namespace

template <typename Scalar>
TrainSummary train(Model<Scalar>& model, Optimizer<Scalar>& opt, const Dataset& ds, const TrainConfig& cfg,
                   const TrainCallbacks& callbacks) {
  cfg.validate();
  if (!ds.has_domain(cfg.domain)) throw SamplingError("training domain '" + cfg.domain + "' not in dataset");
  Rng repair_rng(derive_seed(cfg.seed, 0xa5c4));
  TrainSummary summary;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0;
    for (int i = 0; i < cfg.episodes_per_epoch; ++i) {
      const std::string id = std::to_string((epoch - 1) * cfg.episodes_per_epoch + i);
      Episode ep = sample_episode(ds, cfg.domain, cfg.k_shot,
                                  derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(i)));
      ep.episode_id = id + "(" + ep.episode_id + ")";
      const Tensor<Scalar> gt = ep.query_mask.cast<Scalar>();
      const EpisodeOutput<Scalar> out = segment_episode(ep, model, {});
      const Tensor<Scalar> coarse_ce = cross_entropy(out.coarse.logits, gt);
      const Tensor<Scalar> fine_ce = cross_entropy(out.fine.logits, gt);
      const Tensor<Scalar> loss = coarse_ce * static_cast<Scalar>(cfg.loss_weights[0]) +
                                  fine_ce * static_cast<Scalar>(cfg.loss_weights[1]);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NonFiniteError("non-finite loss at episode " + ep.episode_id + ", epoch " + std::to_string(epoch) +
                             "; parameter norms:" + parameter_norms(model));
      }
      model.zero_grad();
      loss.backward();
      opt.step();
      if (model.anchors.repair(repair_rng) > 0) warn("episode " + ep.episode_id + ": re-initialised a collapsed anchor");
      loss_sum += value;
      if (callbacks.on_row) {
        const Tensor<double> gt64 = ep.query_mask;
        callbacks.on_row({id, "coarse", static_cast<double>(coarse_ce.item()), iou(binarize(out.coarse.probs), gt64)});
        callbacks.on_row({id, "fine", static_cast<double>(fine_ce.item()), iou(binarize(out.fine.probs), gt64)});
      }
    }
    const double mean_loss = cfg.episodes_per_epoch > 0 ? loss_sum / cfg.episodes_per_epoch : 0.0;
    summary.epoch_mean_loss.push_back(mean_loss);
    if (callbacks.on_epoch_end) callbacks.on_epoch_end(epoch, mean_loss);
  }
  return summary;
}

template <typename Scalar>
EvalResult evaluate(const Model<Scalar>& model, const Dataset& ds, const std::string& domain_id, int n_episodes,
                    int k, std::uint64_t seed, int jobs) {
  if (n_episodes <= 0) throw std::invalid_argument("evaluate: n_episodes must be positive");
  if (!ds.has_domain(domain_id)) throw SamplingError("evaluation domain '" + domain_id + "' not in dataset");
  EvalResult result;
  result.rows.resize(static_cast<std::size_t>(n_episodes));
  const auto run = [&](int index) {
    Episode ep = sample_episode(ds, domain_id, k, derive_seed(seed, static_cast<std::uint64_t>(index)));
    ep.episode_id = std::to_string(index) + "(" + ep.episode_id + ")";
    const EpisodeOutput<Scalar> out = segment_episode(ep, model, {});
    const Tensor<Scalar> gt = ep.query_mask.cast<Scalar>();
    EvalRow& row = result.rows[static_cast<std::size_t>(index)];
    row.index = index;
    row.episode_id = ep.episode_id;
    row.coarse_ce = static_cast<double>(cross_entropy(out.coarse.logits, gt).item());
    row.fine_ce = static_cast<double>(cross_entropy(out.fine.logits, gt).item());
    row.coarse_iou = iou(binarize(out.coarse.probs), ep.query_mask);
    row.fine_iou = iou(binarize(out.fine.probs), ep.query_mask);
    row.fine_probs = out.fine.probs.template cast<double>();
  };
  jobs = std::max(1, std::min(jobs, n_episodes));
  if (jobs == 1) {
    for (int i = 0; i < n_episodes; ++i) run(i);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    std::vector<std::thread> workers;
    for (int t = 0; t < jobs; ++t) {
      workers.emplace_back([&, t] {
        try {
          for (int i = t; i < n_episodes; i += jobs) run(i);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  double fine = 0, coarse = 0;
  for (const auto& r : result.rows) {
    fine += r.fine_iou;
    coarse += r.coarse_iou;
  }
  result.mean_iou = fine / n_episodes;
  result.mean_coarse_iou = coarse / n_episodes;
  return result;
}

// ---------------------------------------------------------------------------
// Gradient verification

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradcheckReport gradcheck(Model<double>& model, const Episode& ep, const GradcheckOptions& opts) {
  const Tensor<double> gt = ep.query_mask;
  // Loss and branch fingerprint at the current parameter values.
  const auto evaluate_at = [&] {
    BranchTrace trace;
    const double loss = total_loss(segment_episode(ep, model, {}), gt, opts.loss_weights).item();
    return std::make_pair(loss, trace.fingerprint());
  };
  model.zero_grad();
  std::uint64_t base_branches = 0;
  {
    BranchTrace trace;
    total_loss(segment_episode(ep, model, {}), gt, opts.loss_weights).backward();
    base_branches = trace.fingerprint();
  }

  GradcheckReport report;
  report.tolerance = opts.tolerance;
  Rng rng(opts.seed);
  for (auto& p : model.trainable_parameters()) {
    GradcheckGroup group{p.name, 0, 0, 0.0, 0.0};
    const Index n = p.tensor.size();
    const Buffer<double> analytic = p.tensor.has_grad() ? p.tensor.grad() : Buffer<double>::Zero(n);
    std::vector<Index> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), Index{0});
    for (Index i = 0; i + 1 < n; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(n - i));
      std::swap(coords[static_cast<std::size_t>(i)], coords[j]);
    }
    const int wanted = static_cast<int>(std::min<Index>(n, opts.coords_per_group));
    for (Index c : coords) {
      if (group.coords == wanted) break;
      auto& data = p.tensor.mutable_data();
      const double saved = data[c];
      data[c] = saved + opts.step;
      const auto [plus, plus_branches] = evaluate_at();
      data[c] = saved - opts.step;
      const auto [minus, minus_branches] = evaluate_at();
      data[c] = saved;
      // A kink inside [x - h, x + h] invalidates the central difference.
      if (plus_branches != base_branches || minus_branches != base_branches) {
        ++group.skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2 * opts.step);
      group.max_rel_error = std::max(group.max_rel_error, relative_error(analytic[c], numeric));
      group.max_abs_error = std::max(group.max_abs_error, std::abs(analytic[c] - numeric));
      ++group.coords;
    }
    const bool enough = group.coords == std::min<Index>(wanted, n - group.skipped) && group.coords > 0;
    report.passed = report.passed && enough && group.max_rel_error <= opts.tolerance;
    report.groups.push_back(group);
  }
  return report;
}

template <typename Scalar>
Index parameter_count(const Model<Scalar>& model) {
  Index n = 0;
  for (const auto& p : model.trainable_parameters()) n += p.tensor.size();
  return n;
}

#define RESTNET_INSTANTIATE_TRAINER(S)                                                                            \
  template Tensor<S> cross_entropy(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<double> binarize(const Tensor<S>&);                                                             \
  template Tensor<S> total_loss(const EpisodeOutput<S>&, const Tensor<S>&, const std::array<double, 2>&);         \
  template class Optimizer<S>;                                                                                    \
  template TrainSummary train(Model<S>&, Optimizer<S>&, const Dataset&, const TrainConfig&, const TrainCallbacks&); \
  template EvalResult evaluate(const Model<S>&, const Dataset&, const std::string&, int, int, std::uint64_t, int);  \
  template Index parameter_count(const Model<S>&);

RESTNET_INSTANTIATE_TRAINER(float)
RESTNET_INSTANTIATE_TRAINER(double)

}  // namespace restnet

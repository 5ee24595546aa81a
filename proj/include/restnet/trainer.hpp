#pragma once

// Episodic training, evaluation, finite-difference gradient verification
// and parameter accounting.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "restnet/episodes.hpp"
#include "restnet/model.hpp"
#include "restnet/tensor_io.hpp"

namespace restnet {

struct TrainConfig {
  double lr = 1e-3;
  std::string optimizer = "adam";  // adam | sgd
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 10;
  int episodes_per_epoch = 100;
  int k_shot = 1;
  std::uint64_t seed = 42;
  std::array<double, 2> loss_weights{1.0, 1.0};  // coarse, fine
  DType dtype = DType::Float64;
  std::string domain = "source";

  void validate() const;
};

struct MetricsRow {
  std::string episode_id;
  std::string stage;  // coarse | fine
  double ce_loss = 0;
  double iou = 0;
};

inline constexpr const char* kMetricsHeader = "episode_id,stage,ce_loss,iou";
std::string format_metrics_row(const MetricsRow& row);

// Mean over pixels of -log softmax(logits)[gt]; gt must be binary.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const Tensor<Scalar>& gt);

// probs > 0.5.
template <typename Scalar>
Tensor<double> binarize(const Tensor<Scalar>& probs);

// Foreground IoU of two binary masks; 1.0 when the union is empty.
double iou(const Tensor<double>& pred, const Tensor<double>& gt);

template <typename Scalar>
Tensor<Scalar> total_loss(const EpisodeOutput<Scalar>& out, const Tensor<Scalar>& gt,
                          const std::array<double, 2>& weights);

// Adam (or plain SGD) over a fixed list of parameters.
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::vector<NamedTensor<Scalar>> params);

  void step();
  std::int64_t steps() const { return steps_; }

  // Moment tensors named "opt.m.<param>" / "opt.v.<param>" plus "opt.step".
  std::vector<NamedTensor<Scalar>> state() const;
  void load_state(const std::vector<NamedTensor<Scalar>>& state);

 private:
  TrainConfig cfg_;
  std::vector<NamedTensor<Scalar>> params_;
  std::vector<Buffer<Scalar>> m_, v_;
  std::int64_t steps_ = 0;
};

struct TrainCallbacks {
  std::function<void(const MetricsRow&)> on_row;
  std::function<void(int epoch, double mean_loss)> on_epoch_end;
};

struct TrainSummary {
  std::vector<double> epoch_mean_loss;
};

template <typename Scalar>
TrainSummary train(Model<Scalar>& model, Optimizer<Scalar>& opt, const Dataset& ds, const TrainConfig& cfg,
                   const TrainCallbacks& callbacks = {});

struct EvalRow {
  int index = 0;
  std::string episode_id;
  double coarse_ce = 0, fine_ce = 0;
  double coarse_iou = 0, fine_iou = 0;
  Tensor<double> fine_probs;
};

struct EvalResult {
  double mean_iou = 0;  // fine stage
  double mean_coarse_iou = 0;
  std::vector<EvalRow> rows;
};

// Episode i uses seed derive_seed(seed, i), so results do not depend on jobs.
template <typename Scalar>
EvalResult evaluate(const Model<Scalar>& model, const Dataset& ds, const std::string& domain_id, int n_episodes,
                    int k, std::uint64_t seed, int jobs = 1);

struct GradcheckOptions {
  double tolerance = 1e-4;
  int coords_per_group = 20;
  double step = 1e-5;
  std::uint64_t seed = 0;
  std::array<double, 2> loss_weights{1.0, 1.0};
};

struct GradcheckGroup {
  std::string name;
  int coords = 0;
  int skipped = 0;  // coordinates whose +-step interval crosses a kink
  double max_rel_error = 0;
  double max_abs_error = 0;
};

struct GradcheckReport {
  double tolerance = 0;
  bool passed = true;
  std::vector<GradcheckGroup> groups;
};

// |a - n| / max(|a|, |n|, floor). The floor sits at the round-off level of
// a central difference with step 1e-5 on an O(1) loss divided by the
// default tolerance, so gradients below it are compared absolutely.
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Central differences on the total loss, float64 only. Coordinates whose
// perturbation changes a relu/clamp/max branch are skipped and replaced.
GradcheckReport gradcheck(Model<double>& model, const Episode& ep, const GradcheckOptions& opts = {});

// Trainable scalars (backbone excluded).
template <typename Scalar>
Index parameter_count(const Model<Scalar>& model);

}  // namespace restnet

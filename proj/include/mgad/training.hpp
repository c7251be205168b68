#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mgad/checkpoint.hpp"
#include "mgad/denoiser.hpp"

namespace mgad {

struct OptimizerConfig {
  int steps = 2000;
  int batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
};

/// Adam over the trainable entries of a ParamSet.
class Adam {
 public:
  explicit Adam(OptimizerConfig cfg) : cfg_(cfg) {}
  void step(ParamSet& params, std::map<std::string, Tensor> grads);

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  int t_ = 0;
};

/// Training items with optional labels (1-based; empty means unlabeled).
struct LabeledData {
  std::vector<Tensor> items;
  std::vector<int> labels;
};

struct TrainBatch {
  std::vector<Tensor> x0;
  std::vector<int> labels;
  std::vector<int> t;
  std::vector<Tensor> noise;
};

/// Uniform items and steps, standard-normal noise, labels replaced by the
/// null tag with probability p_uncond.
TrainBatch make_train_batch(const LabeledData& data, const Schedule& sched, double p_uncond, std::size_t size,
                            RngStream& rng);

struct TrainResult {
  ParamSet params;
  std::vector<double> losses;  // one batch loss per step
};

/// Minimises the epsilon-prediction MSE with Adam. Throws NumericError naming
/// the step if the loss or a gradient goes non-finite.
TrainResult train_denoiser(const EpsNetwork& net, ParamSet params, const LabeledData& data, const Schedule& sched,
                           double p_uncond, const OptimizerConfig& opt, RngStream& rng);

Checkpoint denoiser_checkpoint(const EpsNetwork& net, const ParamSet& params, const ScheduleSpec& spec);

struct LoadedDenoiser {
  std::shared_ptr<const EpsNetwork> net;
  ParamSet params;
  ScheduleSpec schedule;
};
LoadedDenoiser denoiser_from_checkpoint(const Checkpoint& ck);

}  // namespace mgad

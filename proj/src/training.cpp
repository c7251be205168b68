#include "mgad/training.hpp"

#include <cmath>
#include <stdexcept>

#include "mgad/diffusion.hpp"
#include "mgad/error.hpp"

namespace mgad {

using ad::Var;

void Adam::step(ParamSet& params, std::map<std::string, Tensor> grads) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) sq += dot(g, g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;

  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (auto& [name, g] : grads) {
    if (params.frozen(name)) continue;
    Tensor& p = params.get_mut(name);
    auto [mit, fresh_m] = m_.try_emplace(name, p.shape());
    auto [vit, fresh_v] = v_.try_emplace(name, p.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

TrainBatch make_train_batch(const LabeledData& data, const Schedule& sched, double p_uncond, std::size_t size,
                            RngStream& rng) {
  if (data.items.empty()) throw std::invalid_argument("training data is empty");
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw std::invalid_argument("p_uncond must lie in [0, 1]");
  TrainBatch b;
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t k = rng.below(data.items.size());
    b.x0.push_back(data.items[k]);
    int label = data.labels.empty() ? kNullLabel : data.labels[k];
    if (rng.uniform() < p_uncond) label = kNullLabel;
    b.labels.push_back(label);
    b.t.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps()))));
    b.noise.push_back(gaussian(data.items[k].shape(), rng));
  }
  return b;
}

TrainResult train_denoiser(const EpsNetwork& net, ParamSet params, const LabeledData& data, const Schedule& sched,
                           double p_uncond, const OptimizerConfig& opt, RngStream& rng) {
  if (opt.steps < 1 || opt.batch_size < 1) throw std::invalid_argument("training needs steps >= 1 and batch >= 1");
  Adam adam(opt);
  TrainResult result;
  result.losses.reserve(static_cast<std::size_t>(opt.steps));
  for (int step = 0; step < opt.steps; ++step) {
    try {
      const TrainBatch b = make_train_batch(data, sched, p_uncond, static_cast<std::size_t>(opt.batch_size), rng);
      const BoundParams bound = params.bind();
      Var total;
      for (std::size_t i = 0; i < b.x0.size(); ++i) {
        const Var x_t = Var::constant(q_marginal(b.x0[i], b.t[i], sched, b.noise[i]));
        const Var pred = net.forward(bound, x_t, sched.model_step(b.t[i]), b.labels[i]);
        const Var loss = l_simple(Var::constant(b.noise[i]), pred);
        total = total.defined() ? ad::add(total, loss) : loss;
      }
      total = ad::scale(total, 1.0 / static_cast<double>(b.x0.size()));
      const double value = total.value().item();
      if (!std::isfinite(value)) throw NumericError("loss is not finite");
      result.losses.push_back(value);
      if (!total.requires_grad()) continue;
      const ad::Gradients grads = ad::backward(total);
      std::map<std::string, Tensor> g;
      for (const auto& [name, v] : bound.vars()) {
        if (v.requires_grad()) g.emplace(name, grads.of(v));
      }
      adam.step(params, std::move(g));
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step + 1) + ": " + e.what());
    }
  }
  result.params = std::move(params);
  return result;
}

Checkpoint denoiser_checkpoint(const EpsNetwork& net, const ParamSet& params, const ScheduleSpec& spec) {
  Checkpoint ck;
  ck.kind = "DEN";
  ck.header = {{"architecture", net.descriptor()}, {"schedule", spec}};
  ck.params = params;
  return ck;
}

LoadedDenoiser denoiser_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "DEN") throw std::invalid_argument("expected a denoiser checkpoint, got kind " + ck.kind);
  LoadedDenoiser out;
  out.net = network_from_descriptor(ck.header.at("architecture"));
  out.schedule = ck.header.at("schedule").get<ScheduleSpec>();
  RngStream probe(0, 0);
  const ParamSet expected = out.net->init(probe);
  for (const auto& [name, t] : expected.tensors()) {
    if (!ck.params.contains(name) || ck.params.get(name).shape() != t.shape()) {
      throw std::invalid_argument("checkpoint parameters do not match the architecture at '" + name + "'");
    }
  }
  out.params = ck.params;
  return out;
}

}  // namespace mgad

#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgad/layers.hpp"
#include "mgad/schedule.hpp"

namespace mgad {

/// Conditioning index 0 is the null tag; labels start at 1.
inline constexpr int kNullLabel = 0;

/// Isotropic Gaussian mixture over flat or image-shaped vectors.
///
/// Each component carries a conditioning label. By default component k has
/// label k + 1, so a label selects exactly one component; several components
/// may share a label (an empirical image distribution uses one point mass per
/// training image).
struct MixtureParams {
  std::vector<double> weights;
  std::vector<Tensor> means;
  std::vector<double> variances;
  std::vector<int> labels;  // empty: component k has label k + 1

  std::size_t size() const { return weights.size(); }
  int label_of(std::size_t k) const { return labels.empty() ? static_cast<int>(k) + 1 : labels[k]; }
  int label_count() const;
  void validate() const;
};

/// Equal-weight point masses, one per item.
MixtureParams empirical_mixture(const std::vector<Tensor>& items, const std::vector<int>& labels);

/// Draws n samples from q(x0); labels[i] is the drawn component's label.
struct MixtureSamples {
  std::vector<Tensor> items;
  std::vector<int> labels;
};
MixtureSamples sample_mixture(const MixtureParams& mix, std::size_t n, RngStream& rng);

/// Exact epsilon for the noised mixture: -sqrt(1 - alpha_bar_t) grad log p_t(x).
/// A non-null label restricts the mixture to that label's components.
Tensor analytic_eps(const Tensor& x_t, int t, const Schedule& sched, const MixtureParams& mix, int label);
/// Differentiable version of analytic_eps with respect to x_t.
ad::Var analytic_eps(const ad::Var& x_t, int t, const Schedule& sched, const MixtureParams& mix, int label);

/// log p_t(x) of the noised mixture (restricted to `label` unless null).
double mixture_log_density(const Tensor& x_t, int t, const Schedule& sched, const MixtureParams& mix, int label);

/// Noise predictor consumed by the samplers. `t` indexes `sched`, which may be
/// a respaced view of the training schedule.
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  virtual Tensor eps(const Tensor& x_t, int t, const Schedule& sched, int label) const = 0;
  virtual ad::Var eps_var(const ad::Var& x_t, int t, const Schedule& sched, int label) const = 0;
  /// Number of conditional labels, excluding the null tag.
  virtual int label_count() const = 0;
};

class AnalyticDenoiser final : public EpsModel {
 public:
  explicit AnalyticDenoiser(MixtureParams mix);
  Tensor eps(const Tensor& x_t, int t, const Schedule& sched, int label) const override;
  ad::Var eps_var(const ad::Var& x_t, int t, const Schedule& sched, int label) const override;
  int label_count() const override { return mix_.label_count(); }
  const MixtureParams& mixture() const { return mix_; }

 private:
  MixtureParams mix_;
};

/// A learnable epsilon network. `t` passed to forward is the training-schedule
/// step index.
class EpsNetwork {
 public:
  virtual ~EpsNetwork() = default;
  virtual Shape input_shape() const = 0;
  /// Conditioning vocabulary size including the null tag.
  virtual int vocab() const = 0;
  virtual ParamSet init(RngStream& rng) const = 0;
  virtual ad::Var forward(const BoundParams& p, const ad::Var& x, int t, int label) const = 0;
  virtual nlohmann::json descriptor() const = 0;

 protected:
  void check_inputs(const ad::Var& x, int label) const;
};

struct MlpConfig {
  std::size_t dim = 2;
  std::size_t hidden = 64;
  std::size_t depth = 2;
  std::size_t time_dim = 32;
  int vocab = 1;
};

/// Residual MLP for flat vectors; time and label embeddings are added to
/// every block.
class MlpNet final : public EpsNetwork {
 public:
  explicit MlpNet(MlpConfig cfg);
  Shape input_shape() const override { return {cfg_.dim}; }
  int vocab() const override { return cfg_.vocab; }
  ParamSet init(RngStream& rng) const override;
  ad::Var forward(const BoundParams& p, const ad::Var& x, int t, int label) const override;
  nlohmann::json descriptor() const override;
  const MlpConfig& config() const { return cfg_; }

 private:
  MlpConfig cfg_;
};

struct UNetConfig {
  std::size_t resolution = 16;
  std::size_t in_channels = 3;
  std::size_t base_width = 16;
  std::vector<std::size_t> channel_mult = {1, 2, 2};  // one entry per down/up stage
  std::vector<std::size_t> attention_resolutions = {2};
  std::size_t time_dim = 32;
  int vocab = 1;
  std::size_t groups = 4;

  std::size_t stages() const { return channel_mult.size(); }
  void validate() const;
};

/// Encoder/decoder with skip connections. Each stage is one residual block
/// (group norm, SiLU, 3x3 conv, time-embedding bias, group norm, SiLU, 3x3
/// conv) followed by 2x average pooling; the decoder mirrors it with nearest
/// upsampling. The bottleneck holds two residual blocks around self-attention.
class UNet final : public EpsNetwork {
 public:
  explicit UNet(UNetConfig cfg);
  Shape input_shape() const override { return {cfg_.in_channels, cfg_.resolution, cfg_.resolution}; }
  int vocab() const override { return cfg_.vocab; }
  ParamSet init(RngStream& rng) const override;
  ad::Var forward(const BoundParams& p, const ad::Var& x, int t, int label) const override;
  nlohmann::json descriptor() const override;
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
};

std::shared_ptr<const EpsNetwork> network_from_descriptor(const nlohmann::json& desc);

/// A trained network wrapped for sampling. Parameters are bound once as
/// constants.
class NetworkDenoiser final : public EpsModel {
 public:
  NetworkDenoiser(std::shared_ptr<const EpsNetwork> net, const ParamSet& params);
  Tensor eps(const Tensor& x_t, int t, const Schedule& sched, int label) const override;
  ad::Var eps_var(const ad::Var& x_t, int t, const Schedule& sched, int label) const override;
  int label_count() const override { return net_->vocab() - 1; }
  const EpsNetwork& network() const { return *net_; }

 private:
  std::shared_ptr<const EpsNetwork> net_;
  BoundParams bound_;
};

}  // namespace mgad

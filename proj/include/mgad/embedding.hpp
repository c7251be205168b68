#pragma once

#include <vector>

#include <json.hpp>

#include "mgad/checkpoint.hpp"
#include "mgad/layers.hpp"
#include "mgad/schedule.hpp"
#include "mgad/training.hpp"

namespace mgad {

using Tokens = std::vector<std::size_t>;

struct EmbedderConfig {
  std::size_t dim = 32;
  std::size_t resolution = 16;
  std::size_t channels = 3;
  std::size_t width = 16;  // first conv width; later convs use 2x
  std::size_t time_dim = 16;
  std::size_t vocab = 6;
  std::size_t groups = 4;
  double temperature = 0.07;

  void validate() const;
  nlohmann::json to_json() const;
  static EmbedderConfig from_json(const nlohmann::json& j);
};

ParamSet init_embedder(const EmbedderConfig& cfg, RngStream& rng);

/// Unit-norm text embedding: token table, mean pool, two-layer projection.
ad::Var text_embedding(const EmbedderConfig& cfg, const BoundParams& p, const Tokens& tokens);

/// Unit-norm embedding of a noised image x_t at step t (t = 0 means clean).
/// Three strided convs with group norm, SiLU and per-layer time biases, then
/// global average pooling and a linear projection.
ad::Var image_embedding(const EmbedderConfig& cfg, const BoundParams& p, const ad::Var& x, int t);

/// Symmetric InfoNCE over in-batch pairs: rows of `images` and `texts`
/// ([B, d]) with the same index are positives.
ad::Var contrastive_loss(const ad::Var& images, const ad::Var& texts, double temperature);

/// a.b / (|a| |b|), clamped to [-1, 1].
double cosine_similarity(const Tensor& a, const Tensor& b);

/// A frozen embedder plus the noise schedule its image branch was trained on.
class Embedder {
 public:
  Embedder(EmbedderConfig cfg, const ParamSet& params, ScheduleSpec schedule);

  Tensor embed_text(const Tokens& tokens) const;
  Tensor embed_image_noised(const Tensor& x_t, int t) const;
  ad::Var image_var(const ad::Var& x_t, int t) const;

  /// Cosine of the text embedding and the clean (t = 0) image embedding.
  double prompt_similarity(const Tokens& tokens, const Tensor& image) const;

  const EmbedderConfig& config() const { return cfg_; }
  const ScheduleSpec& schedule_spec() const { return spec_; }
  /// Number of forward steps the image branch understands.
  int steps() const { return spec_.steps; }
  const ParamSet& params() const { return params_; }

  Checkpoint to_checkpoint() const;
  static Embedder from_checkpoint(const Checkpoint& ck);

 private:
  void check_tokens(const Tokens& tokens) const;

  EmbedderConfig cfg_;
  ParamSet params_;
  BoundParams bound_;
  ScheduleSpec spec_;
};

struct CaptionedData {
  std::vector<Tensor> images;
  std::vector<Tokens> captions;
};

struct EmbedderTrainResult {
  ParamSet params;
  std::vector<double> losses;
};

/// Contrastive training. Each batch takes items with distinct captions where
/// possible; every image is noised to a uniform t in [0, T] of `schedule`.
EmbedderTrainResult train_embedder(const EmbedderConfig& cfg, const CaptionedData& data, const ScheduleSpec& schedule,
                                   const OptimizerConfig& opt, RngStream& rng);

}  // namespace mgad

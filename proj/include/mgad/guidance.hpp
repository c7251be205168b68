#pragma once

#include <optional>

#include "mgad/denoiser.hpp"
#include "mgad/diffusion.hpp"
#include "mgad/embedding.hpp"

namespace mgad {

/// Text and/or image prompt. A modality takes part in guidance only when it
/// is present and its flag is set.
struct MultimodalPrompt {
  Tokens text;
  std::optional<Tensor> image;
  bool use_text = true;
  bool use_image = true;
};

struct Conditioning {
  enum class Kind { Null, Label, Multimodal };
  Kind kind = Kind::Null;
  /// Label fed to the denoiser (null tag unless set). A multimodal prompt may
  /// also carry one for classifier-free guidance.
  int label = kNullLabel;
  MultimodalPrompt prompt;

  static Conditioning null() { return {}; }
  static Conditioning with_label(int y);
  static Conditioning multimodal(MultimodalPrompt prompt, int label = kNullLabel);

  bool text_active() const;
  bool image_active() const;
  /// Throws std::invalid_argument if a multimodal prompt has no active modality.
  void validate() const;
};

enum class GradTarget { Xt, X0 };

struct GuidanceConfig {
  double s_cfg = 1.0;
  double s_guid = 5000.0;  // lambda_MGS
  double w1 = 1.0;         // text weight
  double w2 = 1.0;         // image weight
  double lambda_tv = 300.0;
  double tau_discard = 0.1;
  GradTarget grad_target = GradTarget::Xt;
  /// Noise the prompt image to level t before encoding (false: encode clean).
  bool noise_prompt = true;

  void validate() const;
};

/// mu + s * variance * grad.
Tensor classifier_guided_mean(const ReverseMoments& moments, const Tensor& grad_logp, double s);

/// eps_null + s_cfg (eps_cond - eps_null); s_cfg = 1 returns eps_cond itself.
Tensor cfg_eps(const Tensor& eps_null, const Tensor& eps_cond, double s_cfg);

/// E'_I(x_t, t) . E_L(l). `t` is the embedder's step index.
ad::Var text_guidance(const ad::Var& x_t, const Tokens& text, int t, const Embedder& emb);
/// E'_I(x_t, t) . E'_I(x'_t, t_prompt), the prompt already noised to its level.
ad::Var image_guidance(const ad::Var& x_t, const Tensor& prompt_t, int t, int t_prompt, const Embedder& emb);

double combined_guidance(double f_text, double f_image, double w1, double w2);

/// Sum of squared differences between vertical and horizontal neighbours,
/// over all channels. Accepts [C, H, W] or [H, W].
double tv_loss(const Tensor& x);
ad::Var tv_loss(const ad::Var& x);

/// Everything guidance needs besides x_t, fixed for one sampling chain.
struct GuidanceContext {
  const Embedder* embedder = nullptr;  // required when a modality is active
  const EpsModel* eps_model = nullptr; // required for GradTarget::X0
  Tensor prompt_noise;                 // noise used to bring the prompt image to level t
};

struct GuidanceResult {
  double value = 0.0;  // G
  double f_text = 0.0;
  double f_image = 0.0;
  double tv = 0.0;
  Tensor grad;  // dG / dx_t
};

/// G = s_guid (w1 F_text + w2 F_image) - lambda_tv TV and its gradient at x_t.
/// With GradTarget::X0 the terms are evaluated on the one-step estimate
/// x0_hat(x_t) (embedder at t = 0) and the gradient flows back through the
/// denoiser. Zero-weight terms are skipped. Throws if no modality is active
/// and there is no TV term. TV applies only to image-shaped ([C, H, W] or
/// [H, W]) inputs.
GuidanceResult total_guidance(const Tensor& x_t, int t, const Schedule& sched, const Conditioning& cond,
                              const GuidanceConfig& cfg, const GuidanceContext& ctx);

/// True when total_guidance would contribute a nonzero gradient for samples
/// of this shape.
bool guidance_active(const Conditioning& cond, const GuidanceConfig& cfg, const Shape& sample_shape);

struct ModalityFlags {
  bool text = true;
  bool image = true;
  friend bool operator==(const ModalityFlags&, const ModalityFlags&) = default;
};

/// Keeps both prompts when their similarity reaches tau; otherwise drops the
/// lower-weighted one, the image on a tie.
ModalityFlags adaptive_prompt_discard(double similarity, double w1, double w2, double tau);
ModalityFlags adaptive_prompt_discard(const Tokens& text, const Tensor& image, double w1, double w2, double tau,
                                      const Embedder& emb);

/// grad log p(y | x_t) for the noised mixture, by Bayes over components.
Tensor analytic_classifier_grad(const Tensor& x_t, int t, int y, const MixtureParams& mix, const Schedule& sched);
/// log p(y | x_t).
double analytic_log_posterior(const Tensor& x_t, int t, int y, const MixtureParams& mix, const Schedule& sched);

}  // namespace mgad

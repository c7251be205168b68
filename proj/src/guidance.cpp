#include "mgad/guidance.hpp"

#include <cmath>
#include <stdexcept>

#include "mgad/error.hpp"

namespace mgad {

using ad::Var;

Conditioning Conditioning::with_label(int y) {
  if (y <= kNullLabel) throw std::invalid_argument("label conditioning needs a label >= 1");
  Conditioning c;
  c.kind = Kind::Label;
  c.label = y;
  return c;
}

Conditioning Conditioning::multimodal(MultimodalPrompt prompt, int label) {
  Conditioning c;
  c.kind = Kind::Multimodal;
  c.label = label;
  c.prompt = std::move(prompt);
  c.validate();
  return c;
}

bool Conditioning::text_active() const {
  return kind == Kind::Multimodal && prompt.use_text && !prompt.text.empty();
}

bool Conditioning::image_active() const {
  return kind == Kind::Multimodal && prompt.use_image && prompt.image.has_value();
}

void Conditioning::validate() const {
  if (label < kNullLabel) throw std::invalid_argument("negative conditioning label");
  if (kind == Kind::Multimodal && !text_active() && !image_active()) {
    throw std::invalid_argument("multimodal conditioning needs an active text or image prompt");
  }
}

void GuidanceConfig::validate() const {
  if (!(s_guid >= 0.0)) throw std::invalid_argument("s_guid must be >= 0");
  if (!(w1 >= 0.0 && w2 >= 0.0)) throw std::invalid_argument("prompt weights must be >= 0");
  if (!(lambda_tv >= 0.0)) throw std::invalid_argument("lambda_tv must be >= 0");
  if (!(tau_discard >= -1.0 && tau_discard <= 1.0)) throw std::invalid_argument("tau_discard must lie in [-1, 1]");
  if (!std::isfinite(s_cfg)) throw std::invalid_argument("s_cfg must be finite");
}

Tensor classifier_guided_mean(const ReverseMoments& moments, const Tensor& grad_logp, double s) {
  require_same_shape(moments.mean, grad_logp, "classifier_guided_mean");
  return axpy(moments.mean, s * moments.variance, grad_logp);
}

Tensor cfg_eps(const Tensor& eps_null, const Tensor& eps_cond, double s_cfg) {
  require_same_shape(eps_null, eps_cond, "cfg_eps");
  if (s_cfg == 1.0) return eps_cond;
  if (s_cfg == 0.0) return eps_null;
  return axpy(eps_null, s_cfg, eps_cond - eps_null);
}

Var text_guidance(const Var& x_t, const Tokens& text, int t, const Embedder& emb) {
  return ad::dot(emb.image_var(x_t, t), Var::constant(emb.embed_text(text)));
}

Var image_guidance(const Var& x_t, const Tensor& prompt_t, int t, int t_prompt, const Embedder& emb) {
  return ad::dot(emb.image_var(x_t, t), Var::constant(emb.embed_image_noised(prompt_t, t_prompt)));
}

double combined_guidance(double f_text, double f_image, double w1, double w2) { return w1 * f_text + w2 * f_image; }

namespace {

struct Grid {
  std::size_t c, h, w;
};

Grid grid_of(const Shape& s) {
  if (s.size() == 3) return {s[0], s[1], s[2]};
  if (s.size() == 2) return {1, s[0], s[1]};
  throw std::invalid_argument("tv_loss expects [C, H, W] or [H, W], got " + shape_string(s));
}

}  // namespace

double tv_loss(const Tensor& x) {
  const Grid g = grid_of(x.shape());
  double acc = 0.0;
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* p = x.data().data() + c * g.h * g.w;
    for (std::size_t i = 0; i < g.h; ++i) {
      for (std::size_t j = 0; j < g.w; ++j) {
        const double v = p[i * g.w + j];
        if (i + 1 < g.h) acc += (p[(i + 1) * g.w + j] - v) * (p[(i + 1) * g.w + j] - v);
        if (j + 1 < g.w) acc += (p[i * g.w + j + 1] - v) * (p[i * g.w + j + 1] - v);
      }
    }
  }
  return acc;
}

Var tv_loss(const Var& x) {
  const Grid g = grid_of(x.shape());
  return ad::make_op(
      Tensor::vector({tv_loss(x.value())}), {x},
      [g](const ad::Node& self, const Tensor& go, std::span<Tensor* const> pg) {
        if (!pg[0]) return;
        const Tensor& xv = self.input(0);
        const double s = 2.0 * go[0];
        for (std::size_t c = 0; c < g.c; ++c) {
          const std::size_t base = c * g.h * g.w;
          for (std::size_t i = 0; i < g.h; ++i) {
            for (std::size_t j = 0; j < g.w; ++j) {
              const std::size_t at = base + i * g.w + j;
              if (i + 1 < g.h) {
                const double d = s * (xv[at + g.w] - xv[at]);
                (*pg[0])[at + g.w] += d;
                (*pg[0])[at] -= d;
              }
              if (j + 1 < g.w) {
                const double d = s * (xv[at + 1] - xv[at]);
                (*pg[0])[at + 1] += d;
                (*pg[0])[at] -= d;
              }
            }
          }
        }
      },
      "tv_loss");
}

bool guidance_active(const Conditioning& cond, const GuidanceConfig& cfg, const Shape& sample_shape) {
  const bool clip = cfg.s_guid > 0.0 && ((cond.text_active() && cfg.w1 > 0.0) || (cond.image_active() && cfg.w2 > 0.0));
  return clip || (cfg.lambda_tv > 0.0 && sample_shape.size() >= 2);
}

namespace {

Tensor gradient_of(const Var& root, const Var& leaf) { return ad::backward(root).of(leaf); }

}  // namespace

GuidanceResult total_guidance(const Tensor& x_t, int t, const Schedule& sched, const Conditioning& cond,
                              const GuidanceConfig& cfg, const GuidanceContext& ctx) {
  cond.validate();
  const bool text = cond.text_active();
  const bool image = cond.image_active();
  const bool tv_on = cfg.lambda_tv > 0.0 && x_t.shape().size() >= 2;
  if (!text && !image && !tv_on) {
    throw std::invalid_argument("guidance has no active signal: no prompt modality and no TV term");
  }
  if ((text || image) && ctx.embedder == nullptr) throw std::invalid_argument("prompt guidance needs an embedder");
  sched.require_step(t);

  const bool at_x0 = cfg.grad_target == GradTarget::X0;
  // z is the point the terms are evaluated at: x_t itself or x0_hat(x_t).
  const Var xt_leaf = Var::tracked(x_t);
  Var z_graph;
  Tensor z = x_t;
  if (at_x0) {
    if (ctx.eps_model == nullptr) throw std::invalid_argument("x0 guidance needs the denoiser");
    z_graph = predict_x0(xt_leaf, ctx.eps_model->eps_var(xt_leaf, t, sched, cond.label), t, sched);
    z = z_graph.value();
  }
  const int t_emb = at_x0 ? 0 : sched.model_step(t);

  GuidanceResult out;
  Tensor g_clip(x_t.shape());
  bool have_clip = false;
  const bool use_text = text && cfg.w1 > 0.0 && cfg.s_guid > 0.0;
  const bool use_image = image && cfg.w2 > 0.0 && cfg.s_guid > 0.0;
  if (use_text) {
    const Var leaf = Var::tracked(z);
    const Var f = text_guidance(leaf, cond.prompt.text, t_emb, *ctx.embedder);
    out.f_text = f.value().item();
    g_clip = cfg.w1 * gradient_of(f, leaf);
    have_clip = true;
  }
  if (use_image) {
    const Tensor& prompt = *cond.prompt.image;
    Tensor prompt_t = prompt;
    int t_prompt = 0;
    if (cfg.noise_prompt && !at_x0) {
      if (ctx.prompt_noise.shape() != prompt.shape()) throw std::invalid_argument("prompt noise shape mismatch");
      prompt_t = q_marginal(prompt, t, sched, ctx.prompt_noise);
      t_prompt = t_emb;
    }
    const Var leaf = Var::tracked(z);
    const Var f = image_guidance(leaf, prompt_t, t_emb, t_prompt, *ctx.embedder);
    out.f_image = f.value().item();
    const Tensor gi = gradient_of(f, leaf);
    g_clip = have_clip ? axpy(g_clip, cfg.w2, gi) : cfg.w2 * gi;
    have_clip = true;
  }
  Tensor g_z = have_clip ? cfg.s_guid * g_clip : Tensor(x_t.shape());
  out.value = cfg.s_guid * combined_guidance(out.f_text, out.f_image, use_text ? cfg.w1 : 0.0, use_image ? cfg.w2 : 0.0);
  if (tv_on) {
    const Var leaf = Var::tracked(z);
    const Var tv = tv_loss(leaf);
    out.tv = tv.value().item();
    out.value -= cfg.lambda_tv * out.tv;
    g_z = axpy(g_z, -cfg.lambda_tv, gradient_of(tv, leaf));
  } else if (z.shape().size() >= 2) {
    out.tv = tv_loss(z);
  }
  out.grad = at_x0 ? ad::backward(z_graph, g_z).of(xt_leaf) : std::move(g_z);
  if (!out.grad.all_finite() || !std::isfinite(out.value)) {
    throw NumericError("guidance produced a non-finite value at step " + std::to_string(t));
  }
  return out;
}

ModalityFlags adaptive_prompt_discard(double similarity, double w1, double w2, double tau) {
  if (similarity >= tau) return {true, true};
  if (w1 < w2) return {false, true};
  return {true, false};
}

ModalityFlags adaptive_prompt_discard(const Tokens& text, const Tensor& image, double w1, double w2, double tau,
                                      const Embedder& emb) {
  return adaptive_prompt_discard(emb.prompt_similarity(text, image), w1, w2, tau);
}

namespace {

void check_classifier(int y, const MixtureParams& mix) {
  if (mix.size() < 2) throw std::invalid_argument("analytic classifier needs at least 2 components");
  if (y == kNullLabel) throw std::invalid_argument("analytic classifier needs a non-null label");
  double w = 0.0;
  for (std::size_t k = 0; k < mix.size(); ++k) {
    if (mix.label_of(k) == y) w += mix.weights[k];
  }
  if (!(w > 0.0)) throw std::invalid_argument("label " + std::to_string(y) + " has zero probability");
}

}  // namespace

Tensor analytic_classifier_grad(const Tensor& x_t, int t, int y, const MixtureParams& mix, const Schedule& sched) {
  check_classifier(y, mix);
  const Tensor diff = analytic_eps(x_t, t, sched, mix, kNullLabel) - analytic_eps(x_t, t, sched, mix, y);
  return (1.0 / std::sqrt(1.0 - sched.alpha_bar(t))) * diff;
}

double analytic_log_posterior(const Tensor& x_t, int t, int y, const MixtureParams& mix, const Schedule& sched) {
  check_classifier(y, mix);
  return mixture_log_density(x_t, t, sched, mix, y) - mixture_log_density(x_t, t, sched, mix, kNullLabel);
}

}  // namespace mgad

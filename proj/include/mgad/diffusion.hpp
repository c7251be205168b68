#pragma once

#include "mgad/autodiff.hpp"
#include "mgad/rng.hpp"
#include "mgad/schedule.hpp"
#include "mgad/tensor.hpp"

namespace mgad {

/// Mean and (scalar) variance of p(x_{t-1} | x_t).
struct ReverseMoments {
  Tensor mean;
  double variance = 0.0;
};

/// One forward step: sqrt(alpha_t) x_prev + sqrt(1 - alpha_t) z.
Tensor q_step(const Tensor& x_prev, int t, const Schedule& sched, RngStream& rng);

/// Closed-form marginal: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.
Tensor q_marginal(const Tensor& x0, int t, const Schedule& sched, const Tensor& noise);

/// Reverse moments from an epsilon prediction, with the fixed posterior
/// variance beta~_t.
ReverseMoments mean_from_eps(const Tensor& x_t, const Tensor& eps_hat, int t, const Schedule& sched);

/// One-step denoised estimate (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t).
Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const Schedule& sched);
ad::Var predict_x0(const ad::Var& x_t, const ad::Var& eps_hat, int t, const Schedule& sched);

/// Mean squared error over all elements.
double l_simple(const Tensor& eps_true, const Tensor& eps_pred);
ad::Var l_simple(const ad::Var& eps_true, const ad::Var& eps_pred);

}  // namespace mgad

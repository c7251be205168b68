#include "mgad/diffusion.hpp"

#include <cmath>

namespace mgad {

Tensor q_step(const Tensor& x_prev, int t, const Schedule& sched, RngStream& rng) {
  const double a = sched.alpha(t);
  return axpy(std::sqrt(a) * x_prev, std::sqrt(1.0 - a), gaussian(x_prev.shape(), rng));
}

Tensor q_marginal(const Tensor& x0, int t, const Schedule& sched, const Tensor& noise) {
  require_same_shape(x0, noise, "q_marginal");
  const double ab = sched.alpha_bar(t);
  return axpy(std::sqrt(ab) * x0, std::sqrt(1.0 - ab), noise);
}

ReverseMoments mean_from_eps(const Tensor& x_t, const Tensor& eps_hat, int t, const Schedule& sched) {
  require_same_shape(x_t, eps_hat, "mean_from_eps");
  const double b = sched.beta(t);
  const double coef = b / std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor mean = (1.0 / std::sqrt(sched.alpha(t))) * axpy(x_t, -coef, eps_hat);
  return {std::move(mean), sched.posterior_variance(t)};
}

Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const Schedule& sched) {
  require_same_shape(x_t, eps_hat, "predict_x0");
  const double ab = sched.alpha_bar(t);
  return (1.0 / std::sqrt(ab)) * axpy(x_t, -std::sqrt(1.0 - ab), eps_hat);
}

ad::Var predict_x0(const ad::Var& x_t, const ad::Var& eps_hat, int t, const Schedule& sched) {
  const double ab = sched.alpha_bar(t);
  return ad::scale(ad::sub(x_t, ad::scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

double l_simple(const Tensor& eps_true, const Tensor& eps_pred) {
  require_same_shape(eps_true, eps_pred, "l_simple");
  double acc = 0.0;
  for (std::size_t i = 0; i < eps_true.size(); ++i) {
    const double d = eps_true[i] - eps_pred[i];
    acc += d * d;
  }
  return acc / static_cast<double>(eps_true.size());
}

ad::Var l_simple(const ad::Var& eps_true, const ad::Var& eps_pred) {
  return ad::mean(ad::square(ad::sub(eps_true, eps_pred)));
}

}  // namespace mgad

#include "mgad/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mgad {

Schedule::Schedule(std::vector<double> betas, std::vector<double> alpha_bars, std::vector<int> model_steps,
                   ScheduleSpec spec)
    : betas_(std::move(betas)), alpha_bars_(std::move(alpha_bars)), model_steps_(std::move(model_steps)),
      spec_(std::move(spec)) {
  alphas_.reserve(betas_.size());
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) {
      throw std::invalid_argument("schedule beta out of (0, 1) at step " + std::to_string(i + 1));
    }
    alphas_.push_back(1.0 - betas_[i]);
    const double prev = i == 0 ? 1.0 : alpha_bars_[i - 1];
    if (!(alpha_bars_[i] < prev && alpha_bars_[i] > 0.0)) {
      throw std::invalid_argument("alpha_bar must decrease strictly and stay positive");
    }
  }
}

std::size_t Schedule::index(int t) const {
  require_step(t);
  return static_cast<std::size_t>(t - 1);
}

void Schedule::require_step(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
}

double Schedule::posterior_variance(int t) const {
  if (t == 1) return 0.0;
  return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
}

Schedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("linear schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  std::vector<double> alpha_bars(betas.size());
  std::vector<int> model_steps(betas.size());
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
    prod *= 1.0 - betas[static_cast<std::size_t>(i)];
    alpha_bars[static_cast<std::size_t>(i)] = prod;
    model_steps[static_cast<std::size_t>(i)] = i + 1;
  }
  return Schedule(std::move(betas), std::move(alpha_bars), std::move(model_steps),
                  ScheduleSpec{"linear", steps, beta_start, beta_end, 0});
}

Schedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("schedule needs T >= 1");
  std::vector<double> alpha_bars(betas.size());
  std::vector<int> model_steps(betas.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    prod *= 1.0 - betas[i];
    alpha_bars[i] = prod;
    model_steps[i] = static_cast<int>(i) + 1;
  }
  const int steps = static_cast<int>(betas.size());
  const double first = betas.front(), last = betas.back();
  return Schedule(std::move(betas), std::move(alpha_bars), std::move(model_steps),
                  ScheduleSpec{"custom", steps, first, last, 0});
}

Schedule make_cosine_schedule(int steps) {
  if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
  constexpr double offset = 0.008;
  auto f = [&](double t) {
    const double c = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> betas(static_cast<std::size_t>(steps));
  std::vector<double> alpha_bars(betas.size());
  std::vector<int> model_steps(betas.size());
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double b = std::min(1.0 - f(i + 1) / f(i), 0.999);
    betas[static_cast<std::size_t>(i)] = b;
    prod *= 1.0 - b;
    alpha_bars[static_cast<std::size_t>(i)] = prod;
    model_steps[static_cast<std::size_t>(i)] = i + 1;
  }
  return Schedule(std::move(betas), std::move(alpha_bars), std::move(model_steps),
                  ScheduleSpec{"cosine", steps, 0.0, 0.999, 0});
}

Schedule respace(const Schedule& schedule, int n) {
  const int total = schedule.steps();
  if (n < 1 || n > total) {
    throw std::invalid_argument("respace: need 1 <= n <= T (n = " + std::to_string(n) + ", T = " +
                                std::to_string(total) + ")");
  }
  if (n == total) return schedule;
  std::vector<double> betas, alpha_bars;
  std::vector<int> model_steps;
  double prev = 1.0;
  for (int i = 1; i <= n; ++i) {
    // round(i * T / n); strictly increasing because T / n >= 1, and t_n = T.
    const long long num = 2LL * i * total + n;
    const int t = static_cast<int>(num / (2LL * n));
    const double ab = schedule.alpha_bar(t);
    betas.push_back(1.0 - ab / prev);
    alpha_bars.push_back(ab);
    model_steps.push_back(schedule.model_step(t));
    prev = ab;
  }
  ScheduleSpec spec = schedule.spec();
  spec.respaced_steps = n;
  return Schedule(std::move(betas), std::move(alpha_bars), std::move(model_steps), std::move(spec));
}

Schedule build_schedule(const ScheduleSpec& spec) {
  Schedule base = [&] {
    if (spec.profile == "linear") return make_linear_schedule(spec.steps, spec.beta_start, spec.beta_end);
    if (spec.profile == "cosine") return make_cosine_schedule(spec.steps);
    throw std::invalid_argument("unknown schedule profile '" + spec.profile + "'");
  }();
  if (spec.respaced_steps > 0 && spec.respaced_steps != spec.steps) return respace(base, spec.respaced_steps);
  return base;
}

ScheduleSpec scaled_linear_spec(int steps) {
  const double scale = 1000.0 / static_cast<double>(steps);
  return ScheduleSpec{"linear", steps, 1e-4 * scale, std::min(0.02 * scale, 0.999), 0};
}

}  // namespace mgad

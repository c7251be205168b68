#pragma once

#include <string>
#include <vector>

namespace mgad {

/// Recipe a Schedule is rebuilt from; this is what checkpoints and configs
/// store.
struct ScheduleSpec {
  std::string profile = "linear";  // "linear" | "cosine"
  int steps = 2000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int respaced_steps = 0;  // 0 keeps every step

  friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;
};

/// Variance schedule with derived tables. Steps are 1-based: t in [1, T].
/// alpha_bar(0) is 1 by convention.
class Schedule {
 public:
  int steps() const { return static_cast<int>(betas_.size()); }

  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return alphas_.at(index(t)); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars_.at(index(t)); }
  double alpha_bar_prev(int t) const { return alpha_bar(t - 1); }
  /// beta~_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); zero at t = 1.
  double posterior_variance(int t) const;

  /// Step index of the original (training) schedule that step t stands for.
  /// Identity unless the schedule was respaced.
  int model_step(int t) const { return model_steps_.at(index(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  const ScheduleSpec& spec() const { return spec_; }

  void require_step(int t) const;

  friend Schedule make_linear_schedule(int, double, double);
  friend Schedule schedule_from_betas(std::vector<double>);
  friend Schedule make_cosine_schedule(int);
  friend Schedule respace(const Schedule&, int);

 private:
  Schedule(std::vector<double> betas, std::vector<double> alpha_bars, std::vector<int> model_steps, ScheduleSpec spec);
  std::size_t index(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<int> model_steps_;
  ScheduleSpec spec_;
};

/// beta_t linearly interpolated from beta_start (t = 1) to beta_end (t = T).
Schedule make_linear_schedule(int steps, double beta_start, double beta_end);

/// Arbitrary betas (profile "custom"; not rebuildable from a spec).
Schedule schedule_from_betas(std::vector<double> betas);

/// Squared-cosine alpha_bar profile (offset 0.008), betas clipped to 0.999.
Schedule make_cosine_schedule(int steps);

/// Keeps `n` evenly strided steps (always including T). Effective betas are
/// recomputed so alpha_bar at every kept step equals the original exactly.
Schedule respace(const Schedule& schedule, int n);

/// Builds the schedule a spec describes (including respacing).
Schedule build_schedule(const ScheduleSpec& spec);

/// Linear profile with endpoints scaled by 1000/T, so short toy chains still
/// end close to pure noise.
ScheduleSpec scaled_linear_spec(int steps);

}  // namespace mgad

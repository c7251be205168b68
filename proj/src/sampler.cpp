#include "mgad/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <stdexcept>
#include <thread>

#include "mgad/error.hpp"

namespace mgad {

namespace {

constexpr std::uint64_t kPromptNoiseTag = 0x70726f6d7074ULL;

}  // namespace

void SampleRun::validate() const {
  if (!schedule || !model) throw std::invalid_argument("sample run needs a schedule and a denoiser");
  if (shape.empty()) throw std::invalid_argument("sample run needs a sample shape");
  cond.validate();
  guidance.validate();
  if (cond.label > model->label_count()) {
    throw std::invalid_argument("conditioning label " + std::to_string(cond.label) + " unknown to the denoiser");
  }
  const bool prompts = guidance.s_guid > 0.0 && (cond.text_active() || cond.image_active());
  if (prompts) {
    if (!embedder) throw std::invalid_argument("prompt guidance needs an embedder");
    if (guidance.grad_target == GradTarget::Xt && embedder->steps() < schedule->model_step(schedule->steps())) {
      throw std::invalid_argument("embedder schedule is shorter than the sampling schedule");
    }
  }
  if (cond.image_active() && cond.prompt.image->shape() != shape) {
    throw std::invalid_argument("prompt image shape " + shape_string(cond.prompt.image->shape()) +
                                " differs from the sample shape " + shape_string(shape));
  }
  if (classifier && !classifier->mixture) throw std::invalid_argument("classifier guidance needs a mixture");
  if (sampler.steps < 0 || sampler.steps > schedule->steps()) {
    throw std::invalid_argument("sampler steps must lie in [1, T]");
  }
  if (!(sampler.eta >= 0.0 && sampler.eta <= 1.0)) throw std::invalid_argument("eta must lie in [0, 1]");
}

nlohmann::json StepRecord::to_json() const {
  return {{"t", t}, {"next", next}, {"G", guidance}, {"grad_norm", grad_norm}, {"eps_norm", eps_norm}};
}

Tensor prompt_noise_for(const SampleRun& run) {
  RngStream rng = RngStream(run.seed, run.stream).derive(kPromptNoiseTag);
  return gaussian(run.shape, rng);
}

namespace {

struct Chain {
  const SampleRun& run;
  const Schedule& sched;
  GuidanceContext ctx;
  bool guided;

  Chain(const SampleRun& r, const Schedule& s) : run(r), sched(s) {
    guided = guidance_active(r.cond, r.guidance, r.shape);
    ctx.embedder = r.embedder;
    ctx.eps_model = r.model;
    if (r.cond.image_active()) ctx.prompt_noise = prompt_noise_for(r);
  }

  Tensor eps(const Tensor& x, int t) const {
    const Tensor cond = run.model->eps(x, t, sched, run.cond.label);
    if (run.guidance.s_cfg == 1.0) return cond;
    return cfg_eps(run.model->eps(x, t, sched, kNullLabel), cond, run.guidance.s_cfg);
  }

  void check(const Tensor& x, int t) const {
    if (!x.all_finite()) throw NumericError("sampler state became non-finite at step " + std::to_string(t));
  }
};

void finish(Tensor& x, const SampleRun& run) {
  if (run.clamp) x = clamp(x, -1.0, 1.0);
}

Schedule sampling_schedule(const SampleRun& run, int steps) {
  if (steps == 0 || steps == run.schedule->steps()) return *run.schedule;
  return respace(*run.schedule, steps);
}

}  // namespace

SampleResult sample_ddpm(const SampleRun& run) {
  run.validate();
  const Schedule sched = sampling_schedule(run, run.sampler.steps);
  Chain chain(run, sched);
  RngStream rng(run.seed, run.stream);
  SampleResult out;
  Tensor x = gaussian(run.shape, rng);
  for (int t = sched.steps(); t >= 1; --t) {
    const Tensor eps = chain.eps(x, t);
    ReverseMoments m = mean_from_eps(x, eps, t, sched);
    StepRecord rec{t, t - 1, 0.0, 0.0, l2_norm(eps)};
    if (chain.guided) {
      const GuidanceResult g = total_guidance(x, t, sched, run.cond, run.guidance, chain.ctx);
      m.mean = classifier_guided_mean(m, g.grad, 1.0);
      rec.guidance = g.value;
      rec.grad_norm = l2_norm(g.grad);
    }
    if (run.classifier && run.classifier->scale != 0.0) {
      const Tensor g = analytic_classifier_grad(x, t, run.classifier->label, *run.classifier->mixture, sched);
      m.mean = classifier_guided_mean(m, g, run.classifier->scale);
    }
    x = m.variance > 0.0 ? axpy(m.mean, std::sqrt(m.variance), gaussian(run.shape, rng)) : std::move(m.mean);
    chain.check(x, t);
    if (run.trace) out.trace.push_back(rec);
  }
  finish(x, run);
  out.x0 = std::move(x);
  return out;
}

SampleResult sample_ddim(const SampleRun& run, int n_steps, double eta) {
  run.validate();
  if (n_steps < 1 || n_steps > run.schedule->steps()) throw std::invalid_argument("DDIM steps must lie in [1, T]");
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in [0, 1]");
  const Schedule sched = sampling_schedule(run, n_steps);
  Chain chain(run, sched);
  RngStream rng(run.seed, run.stream);
  SampleResult out;
  Tensor x = gaussian(run.shape, rng);
  for (int t = sched.steps(); t >= 1; --t) {
    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1);
    const double s1 = std::sqrt(1.0 - ab);
    Tensor eps = chain.eps(x, t);
    StepRecord rec{t, t - 1, 0.0, 0.0, 0.0};
    if (chain.guided) {
      const GuidanceResult g = total_guidance(x, t, sched, run.cond, run.guidance, chain.ctx);
      eps = axpy(eps, -s1, g.grad);
      rec.guidance = g.value;
      rec.grad_norm = l2_norm(g.grad);
    }
    if (run.classifier && run.classifier->scale != 0.0) {
      const Tensor g = analytic_classifier_grad(x, t, run.classifier->label, *run.classifier->mixture, sched);
      eps = axpy(eps, -s1 * run.classifier->scale, g);
    }
    rec.eps_norm = l2_norm(eps);
    Tensor x0 = predict_x0(x, eps, t, sched);
    if (run.clamp) {
      x0 = clamp(x0, -1.0, 1.0);
      eps = (1.0 / s1) * axpy(x, -std::sqrt(ab), x0);
    }
    const double sigma =
        eta == 0.0 ? 0.0 : eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
    Tensor next = axpy(std::sqrt(ab_prev) * x0, std::sqrt(std::max(1.0 - ab_prev - sigma * sigma, 0.0)), eps);
    if (sigma > 0.0) next = axpy(next, sigma, gaussian(run.shape, rng));
    x = std::move(next);
    chain.check(x, t);
    if (run.trace) out.trace.push_back(rec);
  }
  finish(x, run);
  out.x0 = std::move(x);
  return out;
}

SampleResult sample(const SampleRun& run) {
  if (run.sampler.kind == SamplerSpec::Kind::Ddim) {
    return sample_ddim(run, run.sampler.steps == 0 ? run.schedule->steps() : run.sampler.steps, run.sampler.eta);
  }
  return sample_ddpm(run);
}

std::vector<SampleResult> sample_batch(const std::vector<SampleRun>& runs, unsigned threads) {
  std::set<std::pair<std::uint64_t, std::uint64_t>> ids;
  for (const auto& r : runs) {
    if (!ids.insert({r.seed, r.stream}).second) {
      throw std::invalid_argument("duplicate rng stream id " + std::to_string(r.stream) + " in sample batch");
    }
  }
  std::vector<SampleResult> out(runs.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, runs.size()));
  if (threads <= 1) {
    for (std::size_t i = 0; i < runs.size(); ++i) out[i] = sample(runs[i]);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(runs.size());
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < runs.size(); i = next++) {
        try {
          out[i] = sample(runs[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

void write_trace(std::ostream& out, const std::vector<StepRecord>& trace) {
  for (const auto& r : trace) out << r.to_json().dump() << '\n';
}

}  // namespace mgad

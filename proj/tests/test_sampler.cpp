#include <cmath>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "mgad/error.hpp"
#include "mgad/sampler.hpp"

using namespace mgad;

namespace {

MixtureParams standard_normal(std::size_t dim) {
  MixtureParams mix;
  mix.weights = {1.0};
  mix.means = {Tensor(Shape{dim}, 0.0)};
  mix.variances = {1.0};
  return mix;
}

MixtureParams two_blobs() {
  MixtureParams mix;
  mix.weights = {0.5, 0.5};
  mix.means = {Tensor::vector({-1.0, 0.5}), Tensor::vector({1.0, -0.5})};
  mix.variances = {0.05, 0.05};
  return mix;
}

SampleRun base_run(const Schedule& s, const EpsModel& m, Shape shape, std::uint64_t stream) {
  SampleRun r;
  r.schedule = &s;
  r.model = &m;
  r.shape = std::move(shape);
  r.seed = 42;
  r.stream = stream;
  r.guidance.lambda_tv = 0.0;
  return r;
}

// Blows up after a few steps.
class Exploding final : public EpsModel {
 public:
  Tensor eps(const Tensor& x, int, const Schedule&, int) const override { return -1e200 * x; }
  ad::Var eps_var(const ad::Var& x, int, const Schedule&, int) const override { return ad::scale(x, -1e200); }
  int label_count() const override { return 0; }
};

}  // namespace

TEST_CASE("DDPM is deterministic per stream") {
  const Schedule s = build_schedule(scaled_linear_spec(50));
  const AnalyticDenoiser den(two_blobs());
  const SampleRun r = base_run(s, den, {2}, 3);
  CHECK(sample_ddpm(r).x0 == sample_ddpm(r).x0);
  SampleRun other = r;
  other.stream = 4;
  CHECK(sample_ddpm(other).x0 != sample_ddpm(r).x0);
}

TEST_CASE("unguided DDPM equals a plain ancestral loop") {
  const Schedule s = build_schedule(scaled_linear_spec(60));
  const AnalyticDenoiser den(two_blobs());
  const SampleRun r = base_run(s, den, {2}, 11);
  RngStream rng(r.seed, r.stream);
  Tensor x = gaussian({2}, rng);
  for (int t = s.steps(); t >= 1; --t) {
    const ReverseMoments m = mean_from_eps(x, den.eps(x, t, s, kNullLabel), t, s);
    x = t > 1 ? axpy(m.mean, std::sqrt(m.variance), gaussian({2}, rng)) : m.mean;
  }
  CHECK(sample_ddpm(r).x0 == x);
  CHECK(s.posterior_variance(1) == 0.0);
}

TEST_CASE("zero guidance scale reproduces the conditional run bitwise") {
  const Schedule s = build_schedule(scaled_linear_spec(40));
  const AnalyticDenoiser den(two_blobs());
  SampleRun plain = base_run(s, den, {2}, 5);
  plain.cond = Conditioning::with_label(2);

  EmbedderConfig ecfg;
  RngStream er(1, 0);
  // Embedder is never evaluated when s_guid = 0; any shape-compatible one will do.
  const Embedder emb(ecfg, init_embedder(ecfg, er), scaled_linear_spec(40));
  SampleRun off = plain;
  MultimodalPrompt p;
  p.text = {0, 4};
  off.cond = Conditioning::multimodal(p, 2);
  off.embedder = &emb;
  off.guidance.s_guid = 0.0;
  off.guidance.s_cfg = 1.0;
  CHECK(sample_ddpm(off).x0 == sample_ddpm(plain).x0);
  CHECK(sample_ddim(off, 10, 0.0).x0 == sample_ddim(plain, 10, 0.0).x0);
}

TEST_CASE("analytic DDPM matches N(0, I) within Monte Carlo bounds") {
  const Schedule s = make_linear_schedule(200, 1e-4, 0.02);
  const AnalyticDenoiser den(standard_normal(2));
  std::vector<SampleRun> runs;
  for (std::uint64_t i = 0; i < 10000; ++i) runs.push_back(base_run(s, den, {2}, i));
  const auto out = sample_batch(runs, 1);

  // Exact output variance of the chain: V_{t-1} = alpha_t V_t + beta~_t, V_T = 1.
  double v = 1.0;
  for (int t = s.steps(); t >= 1; --t) v = s.alpha(t) * v + s.posterior_variance(t);
  CHECK(v == doctest::Approx(0.98084523493).epsilon(1e-9));
  const double n = static_cast<double>(out.size());
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (const auto& r : out) mean += r.x0[c];
    mean /= n;
    for (const auto& r : out) var += (r.x0[c] - mean) * (r.x0[c] - mean);
    var /= n - 1.0;
    CHECK(std::abs(mean) < 0.04);
    CHECK(var >= 0.94);
    CHECK(var <= 1.06);
    CHECK(std::abs(mean) < 3.0 * std::sqrt(v / n));
    CHECK(std::abs(var - v) < 3.0 * v * std::sqrt(2.0 / (n - 1.0)));
  }
}

TEST_CASE("DDIM determinism and closed-form inversion") {
  const Schedule s = build_schedule(scaled_linear_spec(100));
  const AnalyticDenoiser den(two_blobs());
  const SampleRun r = base_run(s, den, {2}, 8);
  CHECK(sample_ddim(r, 20, 0.0).x0 == sample_ddim(r, 20, 0.0).x0);
  CHECK(sample_ddim(r, 20, 1.0).x0 != sample_ddim(r, 20, 0.0).x0);

  MixtureParams point;
  point.weights = {1.0};
  point.means = {Tensor::vector({0.3, -0.8})};
  point.variances = {0.0};
  const AnalyticDenoiser pm(point);
  const Tensor x = sample_ddim(base_run(s, pm, {2}, 1), 1, 0.0).x0;
  CHECK(max_abs_diff(x, point.means[0]) < 1e-12);

  CHECK_THROWS_AS(sample_ddim(r, 0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(sample_ddim(r, 101, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(sample_ddim(r, 10, 1.5), std::invalid_argument);
}

TEST_CASE("respaced DDPM uses the requested number of steps") {
  const Schedule s = build_schedule(scaled_linear_spec(100));
  const AnalyticDenoiser den(two_blobs());
  SampleRun r = base_run(s, den, {2}, 2);
  r.trace = true;
  r.sampler.steps = 25;
  const auto out = sample_ddpm(r);
  REQUIRE(out.trace.size() == 25);
  CHECK(out.trace.front().t == 25);
  CHECK(out.trace.back().next == 0);
  r.sampler.kind = SamplerSpec::Kind::Ddim;
  CHECK(sample(r).trace.size() == 25);
}

TEST_CASE("sample batch is independent of parallelism") {
  const Schedule s = build_schedule(scaled_linear_spec(30));
  const AnalyticDenoiser den(two_blobs());
  std::vector<SampleRun> runs;
  for (std::uint64_t i = 0; i < 4; ++i) runs.push_back(base_run(s, den, {2}, i));
  runs[2].sampler.kind = SamplerSpec::Kind::Ddim;
  runs[2].sampler.steps = 10;
  const auto seq = sample_batch(runs, 1);
  const auto par = sample_batch(runs, 4);
  REQUIRE(seq.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(seq[i].x0 == par[i].x0);
  CHECK(sample_batch({}, 4).empty());
  runs[3].stream = runs[0].stream;
  CHECK_THROWS_AS(sample_batch(runs, 2), std::invalid_argument);
}

TEST_CASE("every chain's trace ends at step 0") {
  const Schedule s = build_schedule(scaled_linear_spec(20));
  const AnalyticDenoiser den(two_blobs());
  std::vector<SampleRun> runs;
  for (std::uint64_t i = 0; i < 100; ++i) {
    runs.push_back(base_run(s, den, {2}, i));
    runs.back().trace = true;
  }
  for (const auto& r : sample_batch(runs, 3)) {
    REQUIRE(r.trace.size() == 20);
    CHECK(r.trace.back().next == 0);
    CHECK(r.trace.back().t == 1);
  }
}

TEST_CASE("trace is written as one JSON object per line") {
  std::vector<StepRecord> trace{{3, 2, 0.5, 1.0, 2.0}, {2, 1, 0.25, 0.5, 1.5}};
  std::ostringstream os;
  write_trace(os, trace);
  std::istringstream in(os.str());
  std::string line;
  int count = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("t").get<int>() == trace[count].t);
    CHECK(j.at("G").get<double>() == trace[count].guidance);
    ++count;
  }
  CHECK(count == 2);
}

TEST_CASE("run validation and numeric failure") {
  const Schedule s = build_schedule(scaled_linear_spec(30));
  const AnalyticDenoiser den(two_blobs());
  SampleRun r = base_run(s, den, {2}, 0);
  r.cond = Conditioning::with_label(3);
  CHECK_THROWS_AS(sample_ddpm(r), std::invalid_argument);
  r = base_run(s, den, {2}, 0);
  MultimodalPrompt p;
  p.text = {0, 4};
  r.cond = Conditioning::multimodal(p);
  CHECK_THROWS_AS(sample_ddpm(r), std::invalid_argument);  // no embedder
  r = base_run(s, den, {2}, 0);
  r.sampler.steps = 31;
  CHECK_THROWS_AS(sample_ddpm(r), std::invalid_argument);
  SampleRun none;
  CHECK_THROWS_AS(sample_ddpm(none), std::invalid_argument);

  const Exploding boom;
  const SampleRun bad = base_run(s, boom, {2}, 0);
  try {
    sample_ddpm(bad);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("classifier guidance concentrates samples") {
  MixtureParams mix;
  mix.weights = {0.5, 0.5};
  mix.means = {Tensor::vector({-1.0}), Tensor::vector({1.0})};
  mix.variances = {0.1, 0.1};
  const Schedule s = build_schedule(scaled_linear_spec(100));
  const AnalyticDenoiser den(mix);
  int hits = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    SampleRun r = base_run(s, den, {1}, i);
    r.classifier = ClassifierGuide{&mix, 1, 10.0};
    hits += sample_ddpm(r).x0[0] < 0.0;
  }
  CHECK(hits >= 190);
}

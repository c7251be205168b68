#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <vector>

#include <json.hpp>

#include "mgad/guidance.hpp"

namespace mgad {

/// Classifier guidance toward label `label` with the analytic mixture
/// classifier, scaled by `scale`.
struct ClassifierGuide {
  const MixtureParams* mixture = nullptr;
  int label = 1;
  double scale = 0.0;
};

struct SamplerSpec {
  enum class Kind { Ddpm, Ddim };
  Kind kind = Kind::Ddpm;
  int steps = 0;  // respaced step count; 0 runs every step of the schedule
  double eta = 0.0;
};

struct SampleRun {
  const Schedule* schedule = nullptr;
  const EpsModel* model = nullptr;
  Conditioning cond;
  GuidanceConfig guidance;
  const Embedder* embedder = nullptr;
  std::optional<ClassifierGuide> classifier;
  SamplerSpec sampler;
  Shape shape;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  bool trace = false;
  bool clamp = false;  // image task: clamp x0 estimates and the output to [-1, 1]

  /// Throws std::invalid_argument on missing pieces or inconsistent settings.
  void validate() const;
};

struct StepRecord {
  int t = 0;
  int next = 0;  // step the chain moved to (0 after the last step)
  double guidance = 0.0;
  double grad_norm = 0.0;
  double eps_norm = 0.0;

  nlohmann::json to_json() const;
};

struct SampleResult {
  Tensor x0;
  std::vector<StepRecord> trace;
};

/// Ancestral sampling with classifier-free mixing and the guided mean
/// mu + Sigma grad G. The t = 1 step adds no noise.
SampleResult sample_ddpm(const SampleRun& run);
/// DDIM over `n_steps` respaced steps; guidance shifts eps by
/// -sqrt(1 - alpha_bar_t) grad G.
SampleResult sample_ddim(const SampleRun& run, int n_steps, double eta);
/// Dispatches on run.sampler.
SampleResult sample(const SampleRun& run);

/// Runs every chain, on up to `threads` workers (0: hardware concurrency).
/// Results do not depend on the thread count. Duplicate (seed, stream) pairs
/// are rejected.
std::vector<SampleResult> sample_batch(const std::vector<SampleRun>& runs, unsigned threads = 0);

/// One JSON object per line.
void write_trace(std::ostream& out, const std::vector<StepRecord>& trace);

/// The prompt-image noise for a chain; drawn from a stream derived from the
/// chain's, so enabling it never shifts the main stream.
Tensor prompt_noise_for(const SampleRun& run);

}  // namespace mgad

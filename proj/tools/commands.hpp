#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgad/metrics.hpp"
#include "mgad/sampler.hpp"

namespace mgad::cli {

struct PromptSpec {
  std::vector<std::string> text;  // caption words; empty means no text prompt
  std::string image;              // prompt image path; empty means none
  int label = kNullLabel;         // denoiser conditioning label
  bool adaptive_discard = true;
};

/// Everything `sample` needs. The JSON form uses the field names verbatim.
struct RunConfig {
  std::string task = "shapes16";
  std::optional<std::uint64_t> seed;  // mandatory
  int samples = 8;
  std::string out = "samples";
  std::string denoiser = "analytic";  // "analytic" or a DEN checkpoint path
  std::string dataset;                // required for analytic denoisers
  std::string embedder;               // EMB checkpoint path
  std::optional<ScheduleSpec> schedule;
  SamplerSpec sampler;
  GuidanceConfig guidance;
  PromptSpec prompt;
  bool trace = false;
  unsigned threads = 0;
  std::string format = "png";  // png | ppm
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);

struct SampleOutput {
  std::vector<Tensor> samples;
  std::vector<SampleResult> results;
  ModalityFlags active{false, false};
  double seconds = 0.0;
  nlohmann::json manifest;
};

/// Resolves the config, runs every chain, and (when `write` is set) writes
/// samples, grid, traces and manifest.json into cfg.out.
SampleOutput run_sample(const RunConfig& cfg, bool write = true);

struct TrainConfig {
  std::string kind = "denoiser";  // denoiser | embedder
  std::string dataset;
  std::string out;
  std::optional<std::uint64_t> seed;
  ScheduleSpec schedule;
  OptimizerConfig opt;
  double p_uncond = 0.1;
  // denoiser architecture (MLP for Gaussian tasks, U-Net for shapes16)
  std::size_t hidden = 64;
  std::size_t depth = 2;
  std::size_t base_width = 16;
  // embedder
  std::size_t embed_dim = 32;
  std::size_t embed_width = 16;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& c);

/// Trains and writes the checkpoint plus `<out>.loss.txt` (one loss per line).
void run_train(const TrainConfig& cfg);

struct AblateRow {
  nlohmann::json cell;
  std::optional<double> diversity;  // image tasks
  std::optional<double> w1;         // Gaussian tasks
  double guidance = 0.0;            // mean G at the last guided step
  double ms_per_step = 0.0;
};

/// Sweeps "mgs", "steps" or "balance" over `grid` (empty: the default grid).
std::vector<AblateRow> run_ablate(const std::string& sweep, const RunConfig& base, std::vector<double> grid,
                                  bool write = true);

/// Diversity report over every .png/.ppm in `dir` except grid*; written to `out` (.txt and
/// .json) when `out` is nonempty.
DiversityReport run_evaluate(const std::filesystem::path& dir, const std::filesystem::path& out);

/// Full command-line entry point; returns the process exit code
/// (0 ok, 2 config error, 3 numeric failure, 4 I/O failure).
int run_cli(const std::vector<std::string>& args);

}  // namespace mgad::cli

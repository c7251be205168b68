#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgad/denoiser.hpp"
#include "mgad/rng.hpp"

namespace mgad {

/// Toy caption vocabulary: four colours followed by two shapes.
const std::vector<std::string>& shape_vocabulary();
inline constexpr std::size_t kShapeColors = 4;
inline constexpr std::size_t kShapeKinds = 2;
inline constexpr int kShapeClasses = 8;

/// Token ids for words in shape_vocabulary(); throws on unknown words.
std::vector<std::size_t> tokenize(const std::vector<std::string>& words);
/// Class label (1..8) of a colour/shape caption.
int caption_label(const std::vector<std::size_t>& tokens);
std::vector<std::size_t> label_caption(int label);

struct CaptionedImage {
  Tensor image;                      // [3, 16, 16] in [-1, 1], 8-bit levels
  std::vector<std::size_t> caption;  // colour token, shape token
  int label = 0;                     // 1..8
};

/// Renders one 16x16 shape of the given class with random placement, size and
/// a dark jittered background. Pixel values are quantised to 8-bit levels.
CaptionedImage render_shape(int label, RngStream& rng);

/// n images cycling through the 8 classes.
std::vector<CaptionedImage> make_shapes16(std::size_t n, RngStream& rng);

/// A dataset file: either a Gaussian task (mixture + samples) or shapes16.
struct Dataset {
  std::string task;  // gaussian1d | gaussian2d | shapes16
  MixtureParams mixture;
  std::vector<Tensor> items;
  std::vector<int> labels;
  std::vector<std::vector<std::size_t>> captions;  // shapes16 only
};

/// Default mixture for a Gaussian task.
MixtureParams default_mixture(const std::string& task);
Dataset make_dataset(const std::string& task, std::size_t n, RngStream& rng, const MixtureParams* mixture = nullptr);

nlohmann::json mixture_to_json(const MixtureParams& mix);
MixtureParams mixture_from_json(const nlohmann::json& j);

nlohmann::json dataset_to_json(const Dataset& d);
Dataset dataset_from_json(const nlohmann::json& j);
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace mgad

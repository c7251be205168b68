#include "mgad/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mgad/checkpoint.hpp"
#include "mgad/error.hpp"

namespace mgad {

const std::vector<std::string>& shape_vocabulary() {
  static const std::vector<std::string> vocab = {"red", "green", "blue", "yellow", "square", "circle"};
  return vocab;
}

std::vector<std::size_t> tokenize(const std::vector<std::string>& words) {
  if (words.empty()) throw std::invalid_argument("empty prompt");
  const auto& vocab = shape_vocabulary();
  std::vector<std::size_t> ids;
  for (const auto& w : words) {
    const auto it = std::find(vocab.begin(), vocab.end(), w);
    if (it == vocab.end()) throw std::invalid_argument("unknown token '" + w + "'");
    ids.push_back(static_cast<std::size_t>(it - vocab.begin()));
  }
  return ids;
}

int caption_label(const std::vector<std::size_t>& tokens) {
  if (tokens.size() != 2 || tokens[0] >= kShapeColors || tokens[1] < kShapeColors ||
      tokens[1] >= kShapeColors + kShapeKinds) {
    throw std::invalid_argument("caption must be a colour followed by a shape");
  }
  return 1 + static_cast<int>(tokens[0] * kShapeKinds + (tokens[1] - kShapeColors));
}

std::vector<std::size_t> label_caption(int label) {
  if (label < 1 || label > kShapeClasses) throw std::invalid_argument("shape label out of range");
  const auto k = static_cast<std::size_t>(label - 1);
  return {k / kShapeKinds, kShapeColors + k % kShapeKinds};
}

CaptionedImage render_shape(int label, RngStream& rng) {
  static constexpr double palette[kShapeColors][3] = {{1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}, {1, 1, -1}};
  constexpr std::size_t n = 16;
  constexpr int sub = 4;
  CaptionedImage out;
  out.caption = label_caption(label);
  out.label = label;
  const double* color = palette[out.caption[0]];
  const bool circle = out.caption[1] == kShapeColors + 1;

  const double half = 3.0 + 2.0 * rng.uniform();  // radius or half side
  const double cx = half + 0.5 + (n - 1 - 2 * half) * rng.uniform();
  const double cy = half + 0.5 + (n - 1 - 2 * half) * rng.uniform();
  const double bg = -0.9 + 0.2 * rng.uniform();

  out.image = Tensor({3, n, n});
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      int hits = 0;
      for (int sy = 0; sy < sub; ++sy) {
        for (int sx = 0; sx < sub; ++sx) {
          const double px = x + (sx + 0.5) / sub, py = y + (sy + 0.5) / sub;
          const double dx = px - cx, dy = py - cy;
          hits += circle ? (dx * dx + dy * dy <= half * half) : (std::abs(dx) <= half && std::abs(dy) <= half);
        }
      }
      const double cover = hits / static_cast<double>(sub * sub);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = bg + cover * (color[c] - bg);
        // Snap to the 8-bit grid so images survive export unchanged.
        out.image[(c * n + y) * n + x] = std::round((v + 1.0) * 127.5) / 127.5 - 1.0;
      }
    }
  }
  return out;
}

std::vector<CaptionedImage> make_shapes16(std::size_t n, RngStream& rng) {
  std::vector<CaptionedImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(render_shape(1 + static_cast<int>(i % kShapeClasses), rng));
  return out;
}

MixtureParams default_mixture(const std::string& task) {
  MixtureParams mix;
  if (task == "gaussian1d") {
    mix.weights = {0.5, 0.5};
    mix.means = {Tensor::vector({-1.0}), Tensor::vector({1.0})};
    mix.variances = {0.1, 0.1};
  } else if (task == "gaussian2d") {
    mix.weights = {0.5, 0.5};
    mix.means = {Tensor::vector({-0.6, 0.3}), Tensor::vector({0.5, -0.4})};
    mix.variances = {0.01, 0.02};
  } else {
    throw std::invalid_argument("no mixture preset for task '" + task + "'");
  }
  return mix;
}

Dataset make_dataset(const std::string& task, std::size_t n, RngStream& rng, const MixtureParams* mixture) {
  if (n == 0) throw std::invalid_argument("dataset size must be positive");
  Dataset d;
  d.task = task;
  if (task == "shapes16") {
    for (auto& item : make_shapes16(n, rng)) {
      d.items.push_back(std::move(item.image));
      d.labels.push_back(item.label);
      d.captions.push_back(std::move(item.caption));
    }
    return d;
  }
  if (task != "gaussian1d" && task != "gaussian2d") throw std::invalid_argument("unknown task '" + task + "'");
  d.mixture = mixture ? *mixture : default_mixture(task);
  d.mixture.validate();
  const std::size_t dim = task == "gaussian1d" ? 1 : 2;
  if (d.mixture.means[0].shape() != Shape{dim}) {
    throw std::invalid_argument(task + " needs " + std::to_string(dim) + "-dimensional means");
  }
  MixtureSamples s = sample_mixture(d.mixture, n, rng);
  d.items = std::move(s.items);
  d.labels = std::move(s.labels);
  return d;
}

nlohmann::json mixture_to_json(const MixtureParams& mix) {
  nlohmann::json means = nlohmann::json::array();
  for (const Tensor& m : mix.means) means.push_back(m.values());
  nlohmann::json j = {{"weights", mix.weights}, {"means", means}, {"variances", mix.variances}};
  if (!mix.labels.empty()) j["labels"] = mix.labels;
  return j;
}

MixtureParams mixture_from_json(const nlohmann::json& j) {
  MixtureParams mix;
  try {
    mix.weights = j.at("weights").get<std::vector<double>>();
    mix.variances = j.at("variances").get<std::vector<double>>();
    for (const auto& m : j.at("means")) {
      auto v = m.get<std::vector<double>>();
      mix.means.emplace_back(Shape{v.size()}, std::move(v));
    }
    if (j.contains("labels")) mix.labels = j.at("labels").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad mixture description: ") + e.what());
  }
  mix.validate();
  return mix;
}

nlohmann::json dataset_to_json(const Dataset& d) {
  nlohmann::json j = {{"task", d.task}, {"labels", d.labels}};
  nlohmann::json items = nlohmann::json::array();
  if (d.task == "shapes16") {
    j["vocabulary"] = shape_vocabulary();
    j["shape"] = d.items.at(0).shape();
    j["captions"] = d.captions;
    for (const Tensor& t : d.items) {
      std::vector<int> levels(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) levels[i] = static_cast<int>(std::lround((t[i] + 1.0) * 127.5));
      items.push_back(levels);
    }
  } else {
    j["mixture"] = mixture_to_json(d.mixture);
    for (const Tensor& t : d.items) items.push_back(t.values());
  }
  j["items"] = std::move(items);
  return j;
}

Dataset dataset_from_json(const nlohmann::json& j) {
  Dataset d;
  try {
    d.task = j.at("task").get<std::string>();
    d.labels = j.at("labels").get<std::vector<int>>();
    if (d.task == "shapes16") {
      const Shape shape = j.at("shape").get<Shape>();
      d.captions = j.at("captions").get<std::vector<std::vector<std::size_t>>>();
      for (const auto& levels : j.at("items")) {
        std::vector<double> v;
        for (const auto& p : levels) v.push_back(p.get<int>() / 127.5 - 1.0);
        d.items.emplace_back(shape, std::move(v));
      }
    } else {
      d.mixture = mixture_from_json(j.at("mixture"));
      for (const auto& x : j.at("items")) {
        auto v = x.get<std::vector<double>>();
        d.items.emplace_back(Shape{v.size()}, std::move(v));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed dataset: ") + e.what());
  }
  if (d.items.empty() || d.labels.size() != d.items.size()) throw IoError("dataset items and labels disagree");
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  write_file(path, dataset_to_json(d).dump() + "\n");
}

Dataset load_dataset(const std::filesystem::path& path) {
  try {
    return dataset_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace mgad

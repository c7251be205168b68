#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mgad/tensor.hpp"

namespace mgad {

/// 8-bit interleaved image (row-major, channels innermost).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Image8&, const Image8&) = default;
};

/// v in [-1, 1] -> round((v + 1) * 127.5), clamped to [0, 255]. Accepts
/// [C, H, W] with C = 1 or 3.
Image8 to_image8(const Tensor& chw);
/// p -> p / 127.5 - 1, as [C, H, W].
Tensor from_image8(const Image8& img);

std::string encode_ppm(const Image8& img);
Image8 decode_ppm(const std::string& bytes);
std::string encode_png(const Image8& img);
Image8 decode_png(const std::string& bytes);

/// Picks the format from the extension (.ppm or .png).
void save_image(const Image8& img, const std::filesystem::path& path);
Image8 load_image(const std::filesystem::path& path);

/// Tiles equal-shape [C, H, W] images into a grid with `pad` pixels of
/// value -1 between cells.
Tensor compose_grid(const std::vector<Tensor>& images, std::size_t cols, std::size_t pad = 1);

}  // namespace mgad

#include "mgad/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "mgad/checkpoint.hpp"
#include "mgad/error.hpp"

namespace mgad {

Image8 to_image8(const Tensor& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3)) {
    throw std::invalid_argument("image export needs [1|3, H, W], got " + shape_string(chw.shape()));
  }
  Image8 img{chw.dim(2), chw.dim(1), chw.dim(0), {}};
  img.pixels.resize(img.width * img.height * img.channels);
  const std::size_t plane = img.width * img.height;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = std::round((chw[c * plane + i] + 1.0) * 127.5);
      img.pixels[i * img.channels + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return img;
}

Tensor from_image8(const Image8& img) {
  Tensor out({img.channels, img.height, img.width});
  const std::size_t plane = img.width * img.height;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = img.pixels[i * img.channels + c] / 127.5 - 1.0;
  }
  return out;
}

std::string encode_ppm(const Image8& img) {
  if (img.channels != 3) throw std::invalid_argument("PPM export needs 3 channels");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

Image8 decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") throw IoError("not a binary PPM (P6)");
  Image8 img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw IoError("only 8-bit PPM is supported");
  } catch (const std::logic_error&) {
    throw IoError("malformed PPM header");
  }
  ++pos;  // single whitespace byte before the raster
  img.channels = 3;
  const std::size_t n = img.width * img.height * 3;
  if (img.width == 0 || img.height == 0 || bytes.size() < pos + n) throw IoError("PPM raster truncated");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

namespace {

// libpng reports errors by longjmp; the message is kept for the IoError
// raised once control is back in C++.
struct PngError {
  std::string message;
};

void png_fail(png_structp png, png_const_charp msg) {
  static_cast<PngError*>(png_get_error_ptr(png))->message = msg;
  png_longjmp(png, 1);
}
void png_warn(png_structp, png_const_charp) {}

void png_append(png_structp p, png_bytep data, png_size_t len) {
  static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), len);
}

struct Cursor {
  const std::string* bytes;
  std::size_t pos;
};

void png_consume(png_structp p, png_bytep data, png_size_t len) {
  auto* c = static_cast<Cursor*>(png_get_io_ptr(p));
  if (c->bytes->size() - c->pos < len) png_error(p, "truncated");
  std::memcpy(data, c->bytes->data() + c->pos, len);
  c->pos += len;
}

}  // namespace

std::string encode_png(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("PNG export needs 1 or 3 channels");
  PngError err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::string out;
  const std::size_t stride = img.width * img.channels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG: " + err.message);
  }
  png_set_write_fn(png, &out, png_append, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

Image8 decode_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw IoError("not a PNG file");
  }
  PngError err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  Cursor cursor{&bytes, 0};
  Image8 img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("PNG: " + err.message);
  }
  png_set_read_fn(png, &cursor, png_consume);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  if (img.channels != 1 && img.channels != 3) png_error(png, "unsupported channel layout");
  img.pixels.resize(img.width * img.height * img.channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_read_row(png, img.pixels.data() + y * img.width * img.channels, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void save_image(const Image8& img, const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".ppm") return write_file(path, encode_ppm(img));
  if (ext == ".png") return write_file(path, encode_png(img));
  throw std::invalid_argument("unknown image extension '" + ext + "'");
}

Image8 load_image(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".ppm") return decode_ppm(read_file(path));
  if (ext == ".png") return decode_png(read_file(path));
  throw std::invalid_argument("unknown image extension '" + ext + "'");
}

Tensor compose_grid(const std::vector<Tensor>& images, std::size_t cols, std::size_t pad) {
  if (images.empty() || cols == 0) throw std::invalid_argument("grid needs images and cols >= 1");
  const Shape s = images[0].shape();
  if (s.size() != 3) throw std::invalid_argument("grid needs [C, H, W] images");
  const std::size_t c = s[0], h = s[1], w = s[2];
  const std::size_t n_cols = std::min(cols, images.size());
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t gh = rows * h + (rows - 1) * pad, gw = n_cols * w + (n_cols - 1) * pad;
  Tensor grid({c, gh, gw}, -1.0);
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (images[k].shape() != s) throw std::invalid_argument("grid images differ in shape");
    const std::size_t oy = (k / cols) * (h + pad), ox = (k % cols) * (w + pad);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) grid[(ch * gh + oy + y) * gw + ox + x] = images[k][(ch * h + y) * w + x];
      }
    }
  }
  return grid;
}

}  // namespace mgad

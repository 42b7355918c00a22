// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace wnet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Single-channel raster, row-major, values in [0, 1] (0 = black).
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 0.f)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

inline GrayImage finish_png_read(png_image& img, const std::string& what) {
  img.format = PNG_FORMAT_GA;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw ImageError("cannot decode PNG " + what + ": " + msg);
  }
  GrayImage out(static_cast<int>(img.width), static_cast<int>(img.height));
  // Transparent pixels are composited over white paper.
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const float g = buf[2 * i] / 255.f;
    const float a = buf[2 * i + 1] / 255.f;
    out.pixels[i] = g * a + (1.f - a);
  }
  return out;
}

}  // namespace detail

inline GrayImage decode_png(const void* data, std::size_t size) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, data, size)) {
    throw ImageError(std::string("cannot decode PNG from memory: ") + img.message);
  }
  return detail::finish_png_read(img, "from memory");
}

inline GrayImage read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw ImageError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return detail::finish_png_read(img, path.string());
}

/// 8-bit grayscale PNG bytes; identical input gives identical bytes.
inline std::string encode_png(const GrayImage& image) {
  std::vector<png_byte> buf(image.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<png_byte>(std::lround(std::clamp(image.pixels[i], 0.f, 1.f) * 255.f));
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, buf.data(), 0, nullptr)) {
    throw ImageError(std::string("cannot size PNG: ") + img.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, buf.data(), 0, nullptr)) {
    throw ImageError(std::string("cannot encode PNG: ") + img.message);
  }
  out.resize(size);
  return out;
}

inline void write_png(const std::filesystem::path& path, const GrayImage& image) {
  const std::string bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write image " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Bilinear resampling with half-pixel centers and edge clamping.
inline GrayImage resize_bilinear(const GrayImage& src, int width, int height) {
  if (src.width == width && src.height == height) return src;
  if (src.width <= 0 || src.height <= 0) throw ImageError("cannot resize an empty image");
  GrayImage dst(width, height);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      const double top = src.at(x0, y0) * (1 - tx) + src.at(x1, y0) * tx;
      const double bottom = src.at(x0, y1) * (1 - tx) + src.at(x1, y1) * tx;
      dst.at(x, y) = static_cast<float>(top * (1 - ty) + bottom * ty);
    }
  }
  return dst;
}

}  // namespace wnet

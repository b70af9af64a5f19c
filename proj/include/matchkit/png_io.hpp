#pragma once

// 8-bit PNG input/output. Floats map to bytes by round(255 * v) and back by
// v / 255. Writer settings are fixed so identical images give identical files.

#include <png.h>

#include <cstring>
#include <filesystem>
#include <string>

#include "matchkit/image.hpp"

namespace matchkit::io {

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
template <std::size_t C>
void quantize_in_place(PlanarImage<C>& img) {
  for (auto& v : img.data) v = quantize(v) / 255.0f;
}

namespace detail {

template <std::size_t C>
void write_png(const std::filesystem::path& path, const PlanarImage<C>& img) {
  static_assert(C == 1 || C == 3);
  std::vector<std::uint8_t> bytes(img.width * img.height * C);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < C; ++c) bytes[(y * img.width + x) * C + c] = quantize(img.at(c, y, x));
    }
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = C == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

template <std::size_t C>
PlanarImage<C> read_png(const std::filesystem::path& path) {
  static_assert(C == 1 || C == 3);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = C == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  PlanarImage<C> out(image.width, image.height);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      for (std::size_t c = 0; c < C; ++c) out.at(c, y, x) = bytes[(y * out.width + x) * C + c] / 255.0f;
    }
  }
  return out;
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const RgbImage& img) { detail::write_png<3>(path, img); }
inline void write_png(const std::filesystem::path& path, const GrayImage& img) { detail::write_png<1>(path, img); }
inline RgbImage read_png_rgb(const std::filesystem::path& path) { return detail::read_png<3>(path); }
inline GrayImage read_png_gray(const std::filesystem::path& path) { return detail::read_png<1>(path); }

// Color type stored in the file header (PNG_COLOR_TYPE_*), bit depth.
inline std::pair<int, int> png_header(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) throw IoError("cannot read PNG " + path.string());
  const int colour = (image.format & PNG_FORMAT_FLAG_COLOR) ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  const int depth = (image.format & PNG_FORMAT_FLAG_LINEAR) ? 16 : 8;
  png_image_free(&image);
  return {colour, depth};
}

}  // namespace matchkit::io

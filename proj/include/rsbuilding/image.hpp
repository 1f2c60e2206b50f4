#pragma once

// In-memory images and binary masks, and their 8-bit PNG encodings.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rsbuilding/errors.hpp"

namespace rsb {

// Interleaved RGB image with values in [0, 1].
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w * 3, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

// Binary mask with values in {0, 1}.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }
  bool operator==(const Mask&) const = default;
};

inline Mask mask_xor(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("mask_xor: mask sizes differ");
  Mask out(a.height, a.width);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = a.values[i] ^ b.values[i];
  return out;
}

namespace detail {

inline void write_png(const std::filesystem::path& path, std::size_t h, std::size_t w, png_uint_32 format,
                      const std::vector<std::uint8_t>& bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

inline std::vector<std::uint8_t> read_png(const std::filesystem::path& path, png_uint_32 format, std::size_t& h,
                                          std::size_t& w) {
  if (!std::filesystem::exists(path)) throw DataError("missing file '" + path.string() + "'");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw DataError("cannot read PNG '" + path.string() + "': " + img.message);
  }
  img.format = format;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  h = img.height;
  w = img.width;
  return bytes;
}

}  // namespace detail

inline void write_png_rgb(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  detail::write_png(path, image.height, image.width, PNG_FORMAT_RGB, bytes);
}

inline Image read_png_rgb(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  const auto bytes = detail::read_png(path, PNG_FORMAT_RGB, h, w);
  Image image(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) image.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return image;
}

// Masks are stored as 8-bit grayscale with values {0, 255}.
inline void write_png_mask(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.values[i] ? 255 : 0;
  detail::write_png(path, mask.height, mask.width, PNG_FORMAT_GRAY, bytes);
}

inline Mask read_png_mask(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  const auto bytes = detail::read_png(path, PNG_FORMAT_GRAY, h, w);
  Mask mask(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] != 0 && bytes[i] != 255) {
      throw DataError("mask '" + path.string() + "' is not binary: value " + std::to_string(bytes[i]) +
                      " at pixel " + std::to_string(i));
    }
    mask.values[i] = bytes[i] ? 1 : 0;
  }
  return mask;
}

}  // namespace rsb

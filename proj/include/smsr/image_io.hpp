#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "smsr/tensor.hpp"

namespace smsr {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads an 8-bit PNG as a (1, channels, h, w) tensor with values in [0, 255].
/// `channels` is 3 (RGB) or 1 (grayscale); colour conversion is done by libpng.
inline Tensor<float> read_png(const std::string& path, int channels = 3) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("read_png: channels must be 1 or 3");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
    throw ImageIoError("cannot read " + path + ": " + image.message);
  }
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr) == 0) {
    png_image_free(&image);
    throw ImageIoError("cannot decode " + path + ": " + image.message);
  }
  const int h = static_cast<int>(image.height);
  const int w = static_cast<int>(image.width);
  Tensor<float> out(1, channels, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        out(0, c, y, x) = buffer[(static_cast<std::size_t>(y) * w + x) * channels + c];
  return out;
}

/// Writes sample 0 of a 1- or 3-channel tensor in [0, 255]; values are rounded and clamped.
inline void write_png(const std::string& path, const Tensor<float>& img) {
  if (img.n() < 1 || (img.c() != 1 && img.c() != 3)) {
    throw ShapeError("write_png: expected 1 or 3 channels, got " + to_string(img.shape()));
  }
  const int channels = img.c();
  std::vector<std::uint8_t> buffer(static_cast<std::size_t>(img.h()) * img.w() * channels);
  for (int y = 0; y < img.h(); ++y)
    for (int x = 0; x < img.w(); ++x)
      for (int c = 0; c < channels; ++c) {
        const float v = std::clamp(std::round(img(0, c, y, x)), 0.0f, 255.0f);
        buffer[(static_cast<std::size_t>(y) * img.w() + x) * channels + c] = static_cast<std::uint8_t>(v);
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.w());
  image.height = static_cast<png_uint_32>(img.h());
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr) == 0) {
    throw ImageIoError("cannot write " + path + ": " + image.message);
  }
}

/// Rounds to the 8-bit grid, as a PNG round trip would.
inline Tensor<float> quantize_u8(const Tensor<float>& img) {
  Tensor<float> out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = std::clamp(std::round(img[i]), 0.0f, 255.0f);
  return out;
}

}  // namespace smsr

#pragma once

// 8-bit RGB PNG files and the fixed mapping between images and latents:
// a latent is an area-downsampled image with channels
// (2r-1, 2g-1, 2b-1, 2*luma-1); latents render back from their first three
// channels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "idportrait/errors.hpp"
#include "idportrait/landmark3d.hpp"
#include "idportrait/ops.hpp"

namespace idportrait::io {

struct RgbImage {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> rgb;  // row-major HWC

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

inline RgbImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IngestionError("cannot read PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  RgbImage out{img.height, img.width, std::vector<uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IngestionError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const RgbImage& im) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.rgb.data(), 0, nullptr))
    throw IngestionError("cannot write PNG " + path.string() + ": " + img.message);
}

inline uint8_t to_byte(double v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline RgbImage control_to_image(const ControlImage& c) {
  RgbImage out{c.height, c.width, std::vector<uint8_t>(c.pixels.size())};
  std::transform(c.pixels.begin(), c.pixels.end(), out.rgb.begin(), to_byte);
  return out;
}

/// Renders item n of a latent batch at `upscale` pixels per latent cell.
inline RgbImage latent_to_image(const Tensor& z, int64_t n = 0, int64_t upscale = 4) {
  if (z.ndim() != 4) throw ShapeError("latent_to_image: expected [N, C, H, W]");
  const int64_t c = z.dim(1), h = z.dim(2), w = z.dim(3);
  RgbImage out{h * upscale, w * upscale, std::vector<uint8_t>(static_cast<size_t>(h * w * upscale * upscale * 3))};
  for (int64_t y = 0; y < out.height; ++y)
    for (int64_t x = 0; x < out.width; ++x)
      for (int64_t k = 0; k < 3; ++k) {
        const int64_t ch = std::min(k, c - 1);
        const double v = z[((n * c + ch) * h + y / upscale) * w + x / upscale];
        out.rgb[static_cast<size_t>((y * out.width + x) * 3 + k)] = to_byte((v + 1.0) * 0.5);
      }
  return out;
}

/// [1, channels, size, size] latent of an image. Integer downscale factors
/// average whole pixel blocks; other sizes resample bilinearly.
inline Tensor image_to_latent(const RgbImage& im, int64_t channels, int64_t size) {
  if (im.height < 1 || im.width < 1) throw IngestionError("image_to_latent: empty image");
  std::vector<double> chw(static_cast<size_t>(3 * im.height * im.width));
  for (int64_t y = 0; y < im.height; ++y)
    for (int64_t x = 0; x < im.width; ++x)
      for (int64_t k = 0; k < 3; ++k)
        chw[static_cast<size_t>((k * im.height + y) * im.width + x)] =
            im.rgb[static_cast<size_t>((y * im.width + x) * 3 + k)] / 255.0;
  std::vector<double> small(static_cast<size_t>(3 * size * size), 0.0);
  if (im.height % size == 0 && im.width % size == 0) {
    const int64_t fy = im.height / size, fx = im.width / size;
    for (int64_t k = 0; k < 3; ++k)
      for (int64_t y = 0; y < im.height; ++y)
        for (int64_t x = 0; x < im.width; ++x)
          small[static_cast<size_t>((k * size + y / fy) * size + x / fx)] +=
              chw[static_cast<size_t>((k * im.height + y) * im.width + x)];
    for (double& v : small) v /= static_cast<double>(fy * fx);
  } else {
    const Tensor t = crop_resize(Tensor::from_data({1, 3, im.height, im.width}, chw), {Box{0, 0, 1, 1}}, size, size);
    small.assign(t.data().begin(), t.data().end());
  }
  std::vector<double> z(static_cast<size_t>(channels * size * size), 0.0);
  const auto plane = static_cast<size_t>(size * size);
  for (size_t i = 0; i < plane; ++i) {
    const double r = small[i], g = small[plane + i], b = small[2 * plane + i];
    const double vals[4] = {r, g, b, 0.299 * r + 0.587 * g + 0.114 * b};
    for (int64_t k = 0; k < std::min<int64_t>(channels, 4); ++k)
      z[static_cast<size_t>(k) * plane + i] = 2.0 * vals[k] - 1.0;
  }
  return Tensor::from_data({1, channels, size, size}, std::move(z));
}

}  // namespace idportrait::io

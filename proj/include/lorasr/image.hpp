// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lorasr/tensor.hpp"

namespace lorasr {

/// 8-bit RGB image, interleaved, row-major.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const ImageU8&) const = default;
};

/// Planar floating-point image; one height x width array per channel,
/// nominal range [0, 1].
struct ImageF {
  std::vector<Eigen::ArrayXXd> planes;

  ImageF() = default;
  ImageF(int channels, Index height, Index width)
      : planes(static_cast<std::size_t>(channels), Eigen::ArrayXXd::Zero(height, width)) {}

  int channels() const { return static_cast<int>(planes.size()); }
  Index height() const { return planes.empty() ? 0 : planes.front().rows(); }
  Index width() const { return planes.empty() ? 0 : planes.front().cols(); }
};

/// Reads an 8-bit PNG. Grayscale and palette images are promoted to RGB and
/// alpha is dropped; 16-bit images are rejected.
ImageU8 load_image(const std::filesystem::path& path);
void save_image(const ImageU8& image, const std::filesystem::path& path);

ImageF to_float(const ImageU8& image);
/// Clamp to [0,1], scale by 255, round to nearest.
ImageU8 to_u8(const ImageF& image);
/// to_float(to_u8(image)).
ImageF quantize(const ImageF& image);

/// Anti-aliased bicubic (a = -0.5) downscale by an integer factor with edge
/// clamping; separable, kernel stretched by the factor, weights normalised.
ImageF bicubic_downsample(const ImageF& image, int factor);

/// Bicubic kernel with a = -0.5.
double cubic_kernel(double x);

/// BT.601 studio-swing luma: (65.481 R + 128.553 G + 24.966 B + 16) / 255.
ImageF rgb_to_y(const ImageF& image);

ImageF crop(const ImageF& image, Index x, Index y, Index width, Index height);
ImageF crop_border(const ImageF& image, int border);
/// Crops to the largest size divisible by `factor` (top-left anchored).
ImageF mod_crop(const ImageF& image, int factor);

/// Horizontal flip followed by `quarter_turns` counter-clockwise 90 degree rotations.
ImageF flip_rotate(const ImageF& image, bool flip, int quarter_turns);

/// Packs equally sized 3-channel images into an [N,3,H,W] tensor.
TensorF to_tensor(const std::vector<ImageF>& batch);
ImageF from_tensor(const TensorF& tensor, Index sample = 0);

/// Smooth procedural test image: gradients, stripes and soft-edged shapes.
ImageU8 synthetic_image(int width, int height, std::uint64_t seed);

}  // namespace lorasr

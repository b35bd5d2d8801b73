// SPDX-License-Identifier: Apache-2.0
#include "lorasr/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "lorasr/error.hpp"

namespace lorasr {

ImageU8 load_image(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw IoError("cannot read PNG '" + path.string() + "': " + image.message);
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw IoError("unsupported PNG bit depth 16 in '" + path.string() + "' (only 8-bit images are supported)");
  }
  image.format = PNG_FORMAT_RGB;
  ImageU8 out(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr))
    throw IoError("cannot decode PNG '" + path.string() + "': " + image.message);
  return out;
}

void save_image(const ImageU8& img, const std::filesystem::path& path) {
  if (img.width < 1 || img.height < 1) throw IoError("cannot save empty image to '" + path.string() + "'");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + path.string() + "': " + image.message);
}

ImageF to_float(const ImageU8& img) {
  ImageF out(3, img.height, img.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.planes[c](y, x) = img.at(x, y, c) / 255.0;
  return out;
}

ImageU8 to_u8(const ImageF& img) {
  if (img.channels() != 3) throw ShapeError("to_u8 expects a 3-channel image");
  ImageU8 out(static_cast<int>(img.width()), static_cast<int>(img.height()));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) {
        const double v = std::clamp(img.planes[c](y, x), 0.0, 1.0);
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return out;
}

ImageF quantize(const ImageF& img) {
  ImageF out = img;
  for (auto& p : out.planes) p = (p.max(0.0).min(1.0) * 255.0).round() / 255.0;
  return out;
}

double cubic_kernel(double x) {
  constexpr double a = -0.5;
  const double t = std::abs(x);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace {

struct AxisWeights {
  std::vector<std::vector<std::pair<Index, double>>> taps;  // per output index
};

AxisWeights axis_weights(Index in_size, int factor) {
  AxisWeights w;
  const Index out_size = in_size / factor;
  for (Index i = 0; i < out_size; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * factor - 0.5;
    const Index lo = static_cast<Index>(std::floor(center - 2.0 * factor));
    const Index hi = static_cast<Index>(std::ceil(center + 2.0 * factor));
    std::vector<std::pair<Index, double>> taps;
    double total = 0.0;
    for (Index j = lo; j <= hi; ++j) {
      const double weight = cubic_kernel((center - static_cast<double>(j)) / factor);
      if (weight == 0.0) continue;
      taps.emplace_back(std::clamp<Index>(j, 0, in_size - 1), weight);
      total += weight;
    }
    for (auto& t : taps) t.second /= total;
    w.taps.push_back(std::move(taps));
  }
  return w;
}

}  // namespace

ImageF bicubic_downsample(const ImageF& img, int factor) {
  if (factor < 1) throw ShapeError("bicubic_downsample: factor must be >= 1");
  if (img.height() % factor != 0 || img.width() % factor != 0)
    throw ShapeError("bicubic_downsample: image " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                     " not divisible by " + std::to_string(factor));
  if (factor == 1) return img;
  const AxisWeights rows = axis_weights(img.height(), factor);
  const AxisWeights cols = axis_weights(img.width(), factor);
  const Index out_h = img.height() / factor, out_w = img.width() / factor;
  ImageF out(img.channels(), out_h, out_w);
  for (int c = 0; c < img.channels(); ++c) {
    const Eigen::ArrayXXd& src = img.planes[c];
    Eigen::ArrayXXd horizontal = Eigen::ArrayXXd::Zero(img.height(), out_w);
    for (Index x = 0; x < out_w; ++x)
      for (const auto& [j, weight] : cols.taps[x]) horizontal.col(x) += weight * src.col(j);
    Eigen::ArrayXXd& dst = out.planes[c];
    for (Index y = 0; y < out_h; ++y)
      for (const auto& [j, weight] : rows.taps[y]) dst.row(y) += weight * horizontal.row(j);
  }
  return out;
}

ImageF rgb_to_y(const ImageF& img) {
  if (img.channels() != 3) throw ShapeError("rgb_to_y expects a 3-channel image");
  ImageF out;
  out.planes.push_back((65.481 * img.planes[0] + 128.553 * img.planes[1] + 24.966 * img.planes[2] + 16.0) / 255.0);
  return out;
}

ImageF crop(const ImageF& img, Index x, Index y, Index width, Index height) {
  if (x < 0 || y < 0 || width < 1 || height < 1 || x + width > img.width() || y + height > img.height())
    throw ShapeError("crop window out of bounds");
  ImageF out;
  for (const auto& p : img.planes) out.planes.push_back(p.block(y, x, height, width));
  return out;
}

ImageF crop_border(const ImageF& img, int border) {
  if (border < 0) throw ConfigError("border crop must be >= 0");
  if (border == 0) return img;
  if (img.width() <= 2 * border || img.height() <= 2 * border)
    throw ShapeError("image " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                     " too small for border crop " + std::to_string(border));
  return crop(img, border, border, img.width() - 2 * border, img.height() - 2 * border);
}

ImageF mod_crop(const ImageF& img, int factor) {
  const Index w = img.width() - img.width() % factor, h = img.height() - img.height() % factor;
  if (w < 1 || h < 1) throw ShapeError("image smaller than scale factor");
  return crop(img, 0, 0, w, h);
}

ImageF flip_rotate(const ImageF& img, bool flip, int quarter_turns) {
  ImageF out = img;
  for (auto& p : out.planes) {
    if (flip) p = p.rowwise().reverse().eval();
    for (int k = 0; k < ((quarter_turns % 4) + 4) % 4; ++k) p = p.transpose().colwise().reverse().eval();
  }
  return out;
}

TensorF to_tensor(const std::vector<ImageF>& batch) {
  if (batch.empty()) throw ShapeError("to_tensor: empty batch");
  const Index h = batch.front().height(), w = batch.front().width();
  TensorF out({static_cast<Index>(batch.size()), 3, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    if (batch[n].channels() != 3 || batch[n].height() != h || batch[n].width() != w)
      throw ShapeError("to_tensor: images in a batch must share size and have 3 channels");
    for (int c = 0; c < 3; ++c)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) out.at(static_cast<Index>(n), c, y, x) = static_cast<float>(batch[n].planes[c](y, x));
  }
  return out;
}

ImageF from_tensor(const TensorF& t, Index sample) {
  require_rank(t.shape(), 4, "from_tensor");
  const Index channels = t.dim(1), h = t.dim(2), w = t.dim(3);
  ImageF out(static_cast<int>(channels), h, w);
  for (Index c = 0; c < channels; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out.planes[c](y, x) = t.at(sample, c, y, x);
  return out;
}

ImageU8 synthetic_image(int width, int height, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageF img(3, height, width);
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.2 + 0.6 * u(rng);
    gx[c] = (u(rng) - 0.5) * 0.6;
    gy[c] = (u(rng) - 0.5) * 0.6;
  }
  const double freq = 2.0 + 10.0 * u(rng), angle = 3.14159265358979 * u(rng), amp = 0.08 + 0.12 * u(rng);
  struct Blob {
    double cx, cy, r, color[3];
  };
  std::vector<Blob> blobs(3 + static_cast<int>(u(rng) * 4));
  for (auto& b : blobs) {
    b.cx = u(rng) * width;
    b.cy = u(rng) * height;
    b.r = (0.1 + 0.25 * u(rng)) * std::min(width, height);
    for (double& c : b.color) c = u(rng);
  }
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double fx = static_cast<double>(x) / width, fy = static_cast<double>(y) / height;
      const double stripe = amp * std::sin(2.0 * 3.14159265358979 * freq * (fx * std::cos(angle) + fy * std::sin(angle)));
      for (int c = 0; c < 3; ++c) img.planes[c](y, x) = base[c] + gx[c] * (fx - 0.5) + gy[c] * (fy - 0.5) + stripe;
      for (const auto& b : blobs) {
        const double d = std::hypot(x - b.cx, y - b.cy);
        const double mask = 1.0 / (1.0 + std::exp((d - b.r) / 1.5));
        for (int c = 0; c < 3; ++c) img.planes[c](y, x) = (1.0 - mask) * img.planes[c](y, x) + mask * b.color[c];
      }
    }
  return to_u8(img);
}

}  // namespace lorasr

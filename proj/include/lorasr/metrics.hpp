// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "lorasr/image.hpp"
#include "lorasr/network.hpp"

namespace lorasr {

enum class ChannelMode { Y, RGB };

/// Benchmark sets are scored on Y with a 4-pixel crop; DIV2K-style
/// validation sets on RGB with the same crop.
struct EvalProtocol {
  int border_crop = 4;
  ChannelMode channel_mode = ChannelMode::Y;
  int scale = 4;
  bool quantize = true;  // round SR output to 8 bits before scoring
};

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// PSNR in dB with MAX = 1. Identical inputs give +infinity.
double psnr(const ImageF& a, const ImageF& b, const EvalProtocol& proto);

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, L = 1, averaged over valid window positions and channels.
double ssim(const ImageF& a, const ImageF& b, const EvalProtocol& proto);

/// SSIM of one plane pair, no cropping or colour conversion.
double ssim_plane(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b);

struct ImageScore {
  std::string name;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<ImageScore> images;  // sorted by name
  double mean_psnr_db = 0.0;
  double mean_ssim = 0.0;
  int skipped = 0;

  std::string to_table() const;
  std::string to_json() const;
};

/// Scores `model` on every PNG in `dir`, sorted by file name. If `dir`
/// contains HR/ (and optionally LR/) subdirectories those are used as pairs;
/// otherwise every PNG is an HR image and its LR input is derived by bicubic
/// downscaling. With `model == nullptr` each HR image is scored against
/// itself, which exercises the harness without a network.
EvalReport evaluate_dataset(const SpanModel<float>* model, const std::filesystem::path& dir, const EvalProtocol& proto);

}  // namespace lorasr

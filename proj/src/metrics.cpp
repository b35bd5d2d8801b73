// SPDX-License-Identifier: Apache-2.0
#include "lorasr/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "lorasr/error.hpp"

namespace lorasr {

namespace {

ImageF prepare(const ImageF& img, const EvalProtocol& proto) {
  ImageF out = crop_border(img, proto.border_crop);
  if (proto.channel_mode == ChannelMode::Y && out.channels() == 3) out = rgb_to_y(out);
  return out;
}

void check_pair(const ImageF& a, const ImageF& b) {
  if (a.channels() != b.channels() || a.width() != b.width() || a.height() != b.height())
    throw ShapeError("metric inputs differ in size: " + std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                     "x" + std::to_string(a.channels()) + " vs " + std::to_string(b.width()) + "x" +
                     std::to_string(b.height()) + "x" + std::to_string(b.channels()));
}

constexpr int kWindow = 11;

Eigen::VectorXd gaussian_window() {
  Eigen::VectorXd g(kWindow);
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
  }
  return g / g.sum();
}

// Separable 'valid' filtering with the Gaussian window.
Eigen::ArrayXXd filter_valid(const Eigen::ArrayXXd& in, const Eigen::VectorXd& g) {
  const Index oh = in.rows() - kWindow + 1, ow = in.cols() - kWindow + 1;
  Eigen::ArrayXXd rows_done = Eigen::ArrayXXd::Zero(oh, in.cols());
  for (int k = 0; k < kWindow; ++k) rows_done += g[k] * in.middleRows(k, oh);
  Eigen::ArrayXXd out = Eigen::ArrayXXd::Zero(oh, ow);
  for (int k = 0; k < kWindow; ++k) out += g[k] * rows_done.middleCols(k, ow);
  return out;
}

std::string format_psnr(double v) {
  if (std::isinf(v)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

double psnr(const ImageF& a, const ImageF& b, const EvalProtocol& proto) {
  check_pair(a, b);
  const ImageF pa = prepare(a, proto), pb = prepare(b, proto);
  double sum = 0.0;
  Index count = 0;
  for (int c = 0; c < pa.channels(); ++c) {
    sum += (pa.planes[c] - pb.planes[c]).square().sum();
    count += pa.planes[c].size();
  }
  const double mse = sum / static_cast<double>(count);
  if (mse == 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim_plane(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b) {
  if (a.rows() < kWindow || a.cols() < kWindow)
    throw ShapeError("SSIM needs at least " + std::to_string(kWindow) + "x" + std::to_string(kWindow) +
                     " pixels after cropping, got " + std::to_string(a.cols()) + "x" + std::to_string(a.rows()));
  constexpr double c1 = (0.01 * 1.0) * (0.01 * 1.0);
  constexpr double c2 = (0.03 * 1.0) * (0.03 * 1.0);
  const Eigen::VectorXd g = gaussian_window();
  const Eigen::ArrayXXd mu_a = filter_valid(a, g), mu_b = filter_valid(b, g);
  const Eigen::ArrayXXd var_a = filter_valid(a * a, g) - mu_a * mu_a;
  const Eigen::ArrayXXd var_b = filter_valid(b * b, g) - mu_b * mu_b;
  const Eigen::ArrayXXd cov = filter_valid(a * b, g) - mu_a * mu_b;
  const Eigen::ArrayXXd map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                              ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
  return map.mean();
}

double ssim(const ImageF& a, const ImageF& b, const EvalProtocol& proto) {
  check_pair(a, b);
  const ImageF pa = prepare(a, proto), pb = prepare(b, proto);
  double total = 0.0;
  for (int c = 0; c < pa.channels(); ++c) total += ssim_plane(pa.planes[c], pb.planes[c]);
  return total / pa.channels();
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  std::size_t width = 4;
  for (const auto& s : images) width = std::max(width, s.name.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %10s  %8s\n", static_cast<int>(width), "name", "PSNR(dB)", "SSIM");
  os << buf;
  for (const auto& s : images) {
    std::snprintf(buf, sizeof buf, "%-*s  %10s  %8.4f\n", static_cast<int>(width), s.name.c_str(),
                  format_psnr(s.psnr_db).c_str(), s.ssim);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-*s  %10s  %8.4f\n", static_cast<int>(width), "mean",
                format_psnr(mean_psnr_db).c_str(), mean_ssim);
  os << buf;
  if (skipped) os << "skipped " << skipped << " unreadable image(s)\n";
  return os.str();
}

std::string EvalReport::to_json() const {
  auto number = [](double v) -> nlohmann::json {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
  };
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  for (const auto& s : images) j["images"].push_back({{"name", s.name}, {"psnr_db", number(s.psnr_db)}, {"ssim", s.ssim}});
  j["mean"] = {{"name", "mean"}, {"psnr_db", number(mean_psnr_db)}, {"ssim", mean_ssim}};
  j["skipped"] = skipped;
  return j.dump(2) + "\n";
}

namespace {

std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  return out;
}

}  // namespace

EvalReport evaluate_dataset(const SpanModel<float>* model, const std::filesystem::path& dir, const EvalProtocol& proto) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory '" + dir.string() + "' does not exist");
  const bool paired = std::filesystem::is_directory(dir / "HR");
  const std::filesystem::path hr_dir = paired ? dir / "HR" : dir;
  const std::filesystem::path lr_dir = dir / "LR";
  const auto files = list_pngs(hr_dir);
  if (files.empty()) throw IoError("dataset directory '" + hr_dir.string() + "' contains no PNG images");
  const int scale = model ? static_cast<int>(model->config.scale) : proto.scale;

  EvalReport report;
  for (const auto& path : files) {
    ImageF hr, lr;
    try {
      hr = mod_crop(to_float(load_image(path)), model ? scale : 1);
      if (model) {
        if (paired && std::filesystem::exists(lr_dir / path.filename()))
          lr = to_float(load_image(lr_dir / path.filename()));
        else
          lr = bicubic_downsample(hr, scale);
      }
    } catch (const Error& e) {
      std::cerr << "warning: skipping " << path.filename().string() << ": " << e.what() << "\n";
      ++report.skipped;
      continue;
    }
    ImageF sr = hr;
    if (model) {
      sr = from_tensor(infer(*model, to_tensor({lr})).output);
      if (sr.height() != hr.height() || sr.width() != hr.width())
        throw ShapeError("SR output size does not match HR for '" + path.filename().string() + "'");
      if (proto.quantize) sr = quantize(sr);
    }
    report.images.push_back({path.filename().string(), psnr(hr, sr, proto), ssim(hr, sr, proto)});
  }
  if (report.images.empty()) throw IoError("no readable images in '" + hr_dir.string() + "'");
  double p = 0.0, s = 0.0;
  for (const auto& r : report.images) {
    p += r.psnr_db;
    s += r.ssim;
  }
  report.mean_psnr_db = p / static_cast<double>(report.images.size());
  report.mean_ssim = s / static_cast<double>(report.images.size());
  return report;
}

}  // namespace lorasr

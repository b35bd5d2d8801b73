#include <png.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "lorasr/image.hpp"
#include "lorasr/metrics.hpp"

using namespace lorasr;
namespace fs = std::filesystem;

namespace {

std::mt19937_64 rng(404);

fs::path tmp_dir(const std::string& name) {
  const fs::path p = fs::path(LORASR_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ImageF random_image(int channels, Index h, Index w) {
  ImageF img(channels, h, w);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& p : img.planes)
    for (Index i = 0; i < p.size(); ++i) p(i) = u(rng);
  return img;
}

double keys(double x) {
  const double a = -0.5, t = std::abs(x);
  if (t <= 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
  if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
  return 0;
}

// Direct 2D kernel sum with clamped edges.
double oracle_downsample_pixel(const Eigen::ArrayXXd& src, int s, Index oy, Index ox) {
  auto weights = [s](Index o, Index n) {
    std::vector<double> w(static_cast<std::size_t>(n), 0.0);
    const double center = (o + 0.5) * s - 0.5;
    double total = 0;
    for (Index j = -4 * s; j < n + 4 * s; ++j) {
      const double k = keys((center - static_cast<double>(j)) / s);
      total += k;
      w[static_cast<std::size_t>(std::clamp<Index>(j, 0, n - 1))] += k;
    }
    for (double& v : w) v /= total;
    return w;
  };
  const auto wy = weights(oy, src.rows()), wx = weights(ox, src.cols());
  double acc = 0;
  for (Index y = 0; y < src.rows(); ++y)
    for (Index x = 0; x < src.cols(); ++x) acc += wy[y] * wx[x] * src(y, x);
  return acc;
}

// Straight-line PSNR: crop, Y conversion, MSE, log.
double oracle_psnr(const ImageF& a, const ImageF& b, int crop, bool y_mode) {
  double sum = 0;
  long n = 0;
  for (Index y = crop; y < a.height() - crop; ++y)
    for (Index x = crop; x < a.width() - crop; ++x) {
      if (y_mode) {
        auto Y = [&](const ImageF& im) {
          return (65.481 * im.planes[0](y, x) + 128.553 * im.planes[1](y, x) + 24.966 * im.planes[2](y, x) + 16.0) /
                 255.0;
        };
        const double d = Y(a) - Y(b);
        sum += d * d;
        ++n;
      } else {
        for (int c = 0; c < 3; ++c) {
          const double d = a.planes[c](y, x) - b.planes[c](y, x);
          sum += d * d;
          ++n;
        }
      }
    }
  return 10.0 * std::log10(1.0 / (sum / static_cast<double>(n)));
}

// Non-separable SSIM: explicit 11x11 window at every valid position.
double oracle_ssim_plane(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b) {
  double g[11][11], gs = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      gs += g[i][j];
    }
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  long count = 0;
  for (Index y = 0; y + 11 <= a.rows(); ++y)
    for (Index x = 0; x + 11 <= a.cols(); ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double w = g[i][j] / gs, va = a(y + i, x + j), vb = b(y + i, x + j);
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * va * vb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

void write_png16(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = 2;
  image.height = 2;
  image.format = PNG_FORMAT_LINEAR_RGB;
  std::vector<png_uint_16> data(12, 1000);
  REQUIRE(png_image_write_to_file(&image, path.string().c_str(), 0, data.data(), 0, nullptr));
}

}  // namespace

TEST_CASE("cubic kernel") {
  CHECK(cubic_kernel(0.0) == 1.0);
  CHECK(cubic_kernel(1.0) == 0.0);
  CHECK(cubic_kernel(2.0) == 0.0);
  CHECK(cubic_kernel(0.5) == doctest::Approx(keys(0.5)));
  CHECK(cubic_kernel(-1.5) == doctest::Approx(keys(1.5)));
  double s = 0;
  for (int k = -3; k <= 3; ++k) s += cubic_kernel(0.3 + k);
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bicubic downsample") {
  ImageF flat(3, 16, 12);
  for (auto& p : flat.planes) p.setConstant(0.37);
  const ImageF small = bicubic_downsample(flat, 4);
  CHECK(small.height() == 4);
  CHECK(small.width() == 3);
  for (const auto& p : small.planes) CHECK((p - 0.37).abs().maxCoeff() < 1e-6);

  ImageF ramp(1, 8, 32);
  for (Index x = 0; x < 32; ++x) ramp.planes[0].col(x).setConstant(0.01 * static_cast<double>(x));
  const ImageF r2 = bicubic_downsample(ramp, 2);
  for (Index x = 3; x < 13; ++x) {
    CHECK(std::abs((r2.planes[0](2, x) - r2.planes[0](2, x - 1)) - 0.02) < 1e-4);
    CHECK(std::abs(r2.planes[0](2, x) - 0.01 * (2.0 * static_cast<double>(x) + 0.5)) < 1e-4);
  }

  const ImageF rnd = random_image(1, 16, 16);
  const ImageF d = bicubic_downsample(rnd, 4);
  double worst = 0;
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 4; ++x)
      worst = std::max(worst, std::abs(d.planes[0](y, x) - oracle_downsample_pixel(rnd.planes[0], 4, y, x)));
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(bicubic_downsample(random_image(1, 10, 12), 4), ShapeError);
}

TEST_CASE("Y channel closed forms") {
  ImageF img(3, 1, 3);
  img.planes[0] << 1, 0, 0;
  img.planes[1] << 1, 0, 1;
  img.planes[2] << 1, 0, 0;
  const ImageF y = rgb_to_y(img);
  CHECK(y.planes[0](0, 0) == doctest::Approx(235.0 / 255.0).epsilon(1e-12));
  CHECK(y.planes[0](0, 1) == doctest::Approx(16.0 / 255.0).epsilon(1e-12));
  CHECK(y.planes[0](0, 2) == doctest::Approx(0.566875).epsilon(1e-6));
  CHECK(y.planes[0](0, 2) == doctest::Approx((128.553 + 16.0) / 255.0).epsilon(1e-12));
}

TEST_CASE("PSNR") {
  EvalProtocol rgb{0, ChannelMode::RGB, 4, true};
  const ImageF a = random_image(3, 20, 20);
  ImageF b = a;
  for (auto& p : b.planes) p += 1.0 / 255.0;
  CHECK(std::abs(psnr(a, b, rgb) - 48.1308) < 1e-3);
  CHECK(std::abs(psnr(a, b, rgb) - 20.0 * std::log10(255.0)) < 1e-9);
  CHECK(std::isinf(psnr(a, a, rgb)));
  CHECK(psnr(a, a, rgb) > 0);

  const ImageF c = random_image(3, 24, 20);
  const ImageF d = random_image(3, 24, 20);
  EvalProtocol y4;
  CHECK(std::abs(psnr(c, d, y4) - oracle_psnr(c, d, 4, true)) < 1e-6);
  EvalProtocol rgb4{4, ChannelMode::RGB, 4, true};
  CHECK(std::abs(psnr(c, d, rgb4) - oracle_psnr(c, d, 4, false)) < 1e-6);
  CHECK(psnr(c, d, y4) == psnr(d, c, y4));
  CHECK_THROWS_AS(psnr(c, random_image(3, 20, 20), y4), ShapeError);
}

TEST_CASE("PSNR decreases with more noise") {
  const ImageF a = random_image(3, 32, 32);
  std::normal_distribution<double> n(0.0, 1.0);
  ImageF lo = a, hi = a;
  for (int c = 0; c < 3; ++c)
    for (Index i = 0; i < a.planes[c].size(); ++i) {
      const double e = n(rng);
      lo.planes[c](i) += 0.01 * e;
      hi.planes[c](i) += 0.01 * e + 0.02 * n(rng);
    }
  EvalProtocol p;
  CHECK(psnr(a, hi, p) < psnr(a, lo, p));
}

TEST_CASE("SSIM") {
  EvalProtocol rgb{0, ChannelMode::RGB, 4, true};
  const ImageF a = random_image(3, 20, 24);
  CHECK(ssim(a, a, rgb) == 1.0);

  ImageF checker(1, 24, 24), inverted(1, 24, 24);
  for (Index y = 0; y < 24; ++y)
    for (Index x = 0; x < 24; ++x) {
      checker.planes[0](y, x) = ((x / 3 + y / 3) % 2) ? 0.9 : 0.1;
      inverted.planes[0](y, x) = 1.0 - checker.planes[0](y, x);
    }
  const double inv = ssim(checker, inverted, rgb);
  CHECK(inv < 0.5);
  CHECK(std::abs(inv - oracle_ssim_plane(checker.planes[0], inverted.planes[0])) < 1e-9);

  const ImageF b = random_image(3, 20, 24);
  double ref = 0;
  for (int c = 0; c < 3; ++c) ref += oracle_ssim_plane(a.planes[c], b.planes[c]) / 3.0;
  CHECK(std::abs(ssim(a, b, rgb) - ref) < 1e-9);
  CHECK(std::abs(ssim(a, b, rgb) - ssim(b, a, rgb)) < 1e-9);

  ImageF ca(1, 12, 12), cb(1, 12, 12);
  ca.planes[0].setConstant(0.3);
  cb.planes[0].setConstant(0.6);
  const double c1 = 1e-4;
  CHECK(ssim(ca, cb, rgb) == doctest::Approx((2 * 0.3 * 0.6 + c1) / (0.09 + 0.36 + c1)).epsilon(1e-9));

  try {
    ssim(random_image(3, 18, 18), random_image(3, 18, 18), EvalProtocol{});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("11x11") != std::string::npos);
  }
}

TEST_CASE("border crop equals pre-cropped inputs exactly") {
  const ImageF a = random_image(3, 30, 26), b = random_image(3, 30, 26);
  for (ChannelMode mode : {ChannelMode::Y, ChannelMode::RGB}) {
    EvalProtocol four{4, mode, 4, true}, zero{0, mode, 4, true};
    const ImageF ac = crop(a, 4, 4, 18, 22), bc = crop(b, 4, 4, 18, 22);
    CHECK(psnr(a, b, four) == psnr(ac, bc, zero));
    CHECK(ssim(a, b, four) == ssim(ac, bc, zero));
  }
}

TEST_CASE("u8 round trip and PNG I/O") {
  ImageU8 img(7, 5);
  std::uniform_int_distribution<int> u(0, 255);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(u(rng));
  CHECK(to_u8(to_float(img)) == img);

  const fs::path dir = tmp_dir("png");
  save_image(img, dir / "a.png");
  CHECK(load_image(dir / "a.png") == img);
  ImageU8 one(1, 1);
  one.pixels = {1, 2, 3};
  save_image(one, dir / "one.png");
  CHECK(load_image(dir / "one.png") == one);

  write_png16(dir / "deep.png");
  try {
    load_image(dir / "deep.png");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("16") != std::string::npos);
    CHECK(std::string(e.what()).find("deep.png") != std::string::npos);
  }
  CHECK_THROWS_AS(load_image(dir / "missing.png"), IoError);
}

TEST_CASE("dataset evaluation harness") {
  const fs::path dir = tmp_dir("evalset");
  for (const char* name : {"c.png", "a.png", "b.png"}) save_image(synthetic_image(24, 20, name[0]), dir / name);
  {
    std::ofstream junk(dir / "z.png");
    junk << "not a png";
  }
  const EvalReport r = evaluate_dataset(nullptr, dir, EvalProtocol{});
  REQUIRE(r.images.size() == 3);
  CHECK(r.images[0].name == "a.png");
  CHECK(r.images[2].name == "c.png");
  CHECK(r.skipped == 1);
  for (const auto& s : r.images) {
    CHECK(std::isinf(s.psnr_db));
    CHECK(s.ssim == 1.0);
  }
  CHECK(r.mean_ssim == 1.0);
  CHECK(r.to_json().find("\"inf\"") != std::string::npos);
  CHECK(evaluate_dataset(nullptr, dir, EvalProtocol{}).to_table() == r.to_table());

  ModelConfig cfg;
  cfg.channels = 4;
  cfg.num_blocks = 1;
  const SpanModel<float> model = build_model<float>(cfg, 1);
  const EvalReport m = evaluate_dataset(&model, dir, EvalProtocol{});
  double mean = 0;
  for (const auto& s : m.images) mean += s.psnr_db / 3.0;
  CHECK(std::abs(m.mean_psnr_db - mean) < 1e-9);
  CHECK(m.to_json() == evaluate_dataset(&model, dir, EvalProtocol{}).to_json());

  CHECK_THROWS_AS(evaluate_dataset(nullptr, tmp_dir("empty"), EvalProtocol{}), IoError);
}

#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "smsr/image_ops.hpp"
#include "smsr/tensor.hpp"

namespace smsr {

namespace detail {

// Luminance of sample 0 with `border` pixels removed on every side. 1-channel inputs are
// taken to be luminance already.
inline Tensor<double> cropped_luminance(const Tensor<float>& img, int border) {
  if (img.c() != 1 && img.c() != 3) throw ShapeError("metrics: expected 1 or 3 channels, got " + to_string(img.shape()));
  const int h = img.h() - 2 * border;
  const int w = img.w() - 2 * border;
  if (h <= 0 || w <= 0) throw ShapeError("metrics: image " + to_string(img.shape()) + " vanishes after border crop");
  Tensor<double> rgb(1, img.c(), h, w);
  for (int c = 0; c < img.c(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) rgb(0, c, y, x) = img(0, c, y + border, x + border);
  return img.c() == 3 ? rgb_to_luminance(rgb) : rgb;
}

inline void check_pair(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("metrics: shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

}  // namespace detail

/// PSNR on the luminance channel after cropping `scale` border pixels. Inputs are in [0, 255].
/// Identical images give +infinity.
inline double psnr(const Tensor<float>& sr, const Tensor<float>& hr, int scale) {
  detail::check_pair(sr, hr);
  const Tensor<double> a = detail::cropped_luminance(sr, scale);
  const Tensor<double> b = detail::cropped_luminance(hr, scale);
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

inline std::vector<double> gaussian_window(int size = 11, double sigma = 1.5) {
  std::vector<double> g(size);
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += g[i];
  }
  for (double& v : g) v /= sum;
  return g;
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03, range 255),
/// luminance channel, `scale`-pixel border crop.
inline double ssim(const Tensor<float>& sr, const Tensor<float>& hr, int scale) {
  constexpr int kWin = 11;
  detail::check_pair(sr, hr);
  const Tensor<double> a = detail::cropped_luminance(sr, scale);
  const Tensor<double> b = detail::cropped_luminance(hr, scale);
  const int h = a.h();
  const int w = a.w();
  if (h < kWin || w < kWin) throw ShapeError("ssim: image smaller than the 11x11 window after cropping");
  const std::vector<double> g = gaussian_window(kWin, 1.5);
  const int oh = h - kWin + 1;
  const int ow = w - kWin + 1;

  // Separable valid filtering of a, b, a^2, b^2, ab.
  auto filter = [&](auto&& pixel) {
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int k = 0; k < kWin; ++k) s += g[k] * pixel(y, x + k);
        rows[static_cast<std::size_t>(y) * ow + x] = s;
      }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int k = 0; k < kWin; ++k) s += g[k] * rows[static_cast<std::size_t>(y + k) * ow + x];
        out[static_cast<std::size_t>(y) * ow + x] = s;
      }
    return out;
  };
  const auto mu_a = filter([&](int y, int x) { return a(0, 0, y, x); });
  const auto mu_b = filter([&](int y, int x) { return b(0, 0, y, x); });
  const auto aa = filter([&](int y, int x) { return a(0, 0, y, x) * a(0, 0, y, x); });
  const auto bb = filter([&](int y, int x) { return b(0, 0, y, x) * b(0, 0, y, x); });
  const auto ab = filter([&](int y, int x) { return a(0, 0, y, x) * b(0, 0, y, x); });

  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = aa[i] - mu_a[i] * mu_a[i];
    const double vb = bb[i] - mu_b[i] * mu_b[i];
    const double cov = ab[i] - mu_a[i] * mu_b[i];
    total += ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

}  // namespace smsr

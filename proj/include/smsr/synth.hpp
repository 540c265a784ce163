#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "smsr/tensor.hpp"

namespace smsr {

/// Procedural test image in [0, 255]: a smooth colour gradient with flat-shaded shapes and a
/// striped patch, so it contains both flat regions and edges/texture. Each pixel averages 4x4
/// samples, like a sensor integrating over its area, so edges are anti-aliased.
inline Tensor<float> synthetic_image(int h, int w, std::uint64_t seed) {
  constexpr double kPi = 3.14159265358979;
  constexpr int kSub = 4;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double base[3], dx[3], dy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 40.0 + 170.0 * u(rng);
    dx[c] = (u(rng) - 0.5) * 60.0;
    dy[c] = (u(rng) - 0.5) * 60.0;
  }
  struct Shape {
    double col[3], cy, cx, ry, rx, angle;
    int kind;
  };
  auto colour = [&](double out[3]) {
    for (int c = 0; c < 3; ++c) out[c] = 255.0 * u(rng);
  };
  std::vector<Shape> shapes(4 + static_cast<std::size_t>(u(rng) * 4));
  for (auto& s : shapes) {
    colour(s.col);
    s.cy = u(rng) * h;
    s.cx = u(rng) * w;
    s.ry = (0.08 + 0.2 * u(rng)) * h;
    s.rx = (0.08 + 0.2 * u(rng)) * w;
    s.kind = static_cast<int>(u(rng) * 3);
    s.angle = u(rng) * kPi;
  }
  auto inside = [](const Shape& s, double y, double x) {
    const double py = y - s.cy;
    const double px = x - s.cx;
    if (s.kind == 0) return std::abs(py) < s.ry && std::abs(px) < s.rx;
    if (s.kind == 1) return (py * py) / (s.ry * s.ry) + (px * px) / (s.rx * s.rx) < 1.0;
    const double ay = py * std::cos(s.angle) - px * std::sin(s.angle);
    const double ax = py * std::sin(s.angle) + px * std::cos(s.angle);
    return ay > -s.ry && ay < s.ry && std::abs(ax) < (s.ry - ay) * s.rx / (2.0 * s.ry);
  };
  // one striped patch for high-frequency texture
  double a[3], b[3];
  colour(a);
  colour(b);
  const double py0 = static_cast<int>(u(rng) * h * 0.6);
  const double px0 = static_cast<int>(u(rng) * w * 0.6);
  const double ph = std::max(4, static_cast<int>(h * 0.25));
  const double pw = std::max(4, static_cast<int>(w * 0.25));
  const double period = 3.0 + 5.0 * u(rng);
  const double theta = u(rng) * kPi;

  Tensor<float> img(1, 3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc[3] = {0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double yy = y + (sy + 0.5) / kSub;
          const double xx = x + (sx + 0.5) / kSub;
          const double* col = nullptr;
          double grad[3];
          if (yy >= py0 && yy < py0 + ph && xx >= px0 && xx < px0 + pw) {
            col = std::sin((xx * std::cos(theta) + yy * std::sin(theta)) * 2.0 * kPi / period) > 0 ? a : b;
          } else {
            for (auto it = shapes.rbegin(); it != shapes.rend() && col == nullptr; ++it)
              if (inside(*it, yy, xx)) col = it->col;
          }
          if (col == nullptr) {
            for (int c = 0; c < 3; ++c) grad[c] = base[c] + dx[c] * xx / w + dy[c] * yy / h;
            col = grad;
          }
          for (int c = 0; c < 3; ++c) acc[c] += col[c];
        }
      for (int c = 0; c < 3; ++c)
        img(0, c, y, x) = std::clamp(static_cast<float>(std::round(acc[c] / (kSub * kSub))), 0.0f, 255.0f);
    }
  return img;
}

}  // namespace smsr

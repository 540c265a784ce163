#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "smsr/tensor.hpp"

namespace smsr {

template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  if (r <= 0) throw ShapeError("pixel_shuffle: factor must be positive");
  const int rr = r * r;
  if (x.c() % rr != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(x.c()) + " not divisible by " +
                     std::to_string(rr));
  }
  Tensor<T> out(x.n(), x.c() / rr, x.h() * r, x.w() * r);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < out.c(); ++c)
      for (int dy = 0; dy < r; ++dy)
        for (int dx = 0; dx < r; ++dx) {
          const T* src = x.plane(n, c * rr + dy * r + dx);
          for (int y = 0; y < x.h(); ++y)
            for (int xx = 0; xx < x.w(); ++xx) out(n, c, y * r + dy, xx * r + dx) = src[y * x.w() + xx];
        }
  return out;
}

/// Exact inverse permutation of pixel_shuffle.
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
  if (r <= 0 || x.h() % r != 0 || x.w() % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial size " + to_string(x.shape()) + " not divisible by " +
                     std::to_string(r));
  }
  const int rr = r * r;
  Tensor<T> out(x.n(), x.c() * rr, x.h() / r, x.w() / r);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int dy = 0; dy < r; ++dy)
        for (int dx = 0; dx < r; ++dx)
          for (int y = 0; y < out.h(); ++y)
            for (int xx = 0; xx < out.w(); ++xx)
              out(n, c * rr + dy * r + dx, y, xx) = x(n, c, y * r + dy, xx * r + dx);
  return out;
}

/// Positive rational scale factor.
struct Ratio {
  int num = 1;
  int den = 1;
  [[nodiscard]] double value() const { return static_cast<double>(num) / den; }
  /// ceil(len * num / den) in exact integer arithmetic.
  [[nodiscard]] int apply(int len) const {
    const long long p = static_cast<long long>(len) * num;
    return static_cast<int>((p + den - 1) / den);
  }
};

/// Cubic convolution kernel with a = -0.5.
inline double cubic_kernel(double x) {
  const double ax = std::abs(x);
  const double ax2 = ax * ax;
  const double ax3 = ax2 * ax;
  if (ax <= 1.0) return 1.5 * ax3 - 2.5 * ax2 + 1.0;
  if (ax <= 2.0) return -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0;
  return 0.0;
}

/// Sparse resampling weights for one axis: out[i] = sum_j weight[i][j] * in[index[i][j]].
struct ResampleTable {
  int taps = 0;
  std::vector<int> index;      // out_len * taps, clamped to [0, in_len)
  std::vector<double> weight;  // out_len * taps, each row sums to 1
};

/// Builds bicubic weights; when downscaling the kernel is stretched by 1/scale (antialiasing).
inline ResampleTable bicubic_table(int in_len, int out_len, double scale) {
  const double kernel_width = scale < 1.0 ? 4.0 / scale : 4.0;
  ResampleTable t;
  t.taps = static_cast<int>(std::ceil(kernel_width)) + 2;
  t.index.resize(static_cast<std::size_t>(out_len) * t.taps);
  t.weight.resize(t.index.size());
  for (int i = 0; i < out_len; ++i) {
    // 1-based sample centres, as in the usual SR-dataset resampler.
    const double u = (i + 1) / scale + 0.5 * (1.0 - 1.0 / scale);
    const double left = std::floor(u - kernel_width / 2.0);
    double sum = 0.0;
    for (int j = 0; j < t.taps; ++j) {
      const double pos = left + j;
      const double d = u - pos;
      const double wgt = scale < 1.0 ? scale * cubic_kernel(scale * d) : cubic_kernel(d);
      const int idx = std::clamp(static_cast<int>(pos) - 1, 0, in_len - 1);
      t.index[static_cast<std::size_t>(i) * t.taps + j] = idx;
      t.weight[static_cast<std::size_t>(i) * t.taps + j] = wgt;
      sum += wgt;
    }
    for (int j = 0; j < t.taps; ++j) t.weight[static_cast<std::size_t>(i) * t.taps + j] /= sum;
  }
  return t;
}

/// Bicubic resize to an explicit output size; `scale` sets kernel phase and antialias width.
template <class T>
Tensor<T> bicubic_resize_to(const Tensor<T>& img, int out_h, int out_w, double scale_h, double scale_w) {
  if (scale_h <= 0.0 || scale_w <= 0.0) throw std::invalid_argument("bicubic_resize: scale must be positive");
  if (out_h == img.h() && out_w == img.w() && scale_h == 1.0 && scale_w == 1.0) return img;
  const ResampleTable tw = bicubic_table(img.w(), out_w, scale_w);
  const ResampleTable th = bicubic_table(img.h(), out_h, scale_h);
  Tensor<T> out(img.n(), img.c(), out_h, out_w);
  std::vector<double> mid(static_cast<std::size_t>(img.h()) * out_w);
  for (int n = 0; n < img.n(); ++n) {
    for (int c = 0; c < img.c(); ++c) {
      const T* src = img.plane(n, c);
      for (int y = 0; y < img.h(); ++y) {
        for (int x = 0; x < out_w; ++x) {
          double s = 0.0;
          for (int j = 0; j < tw.taps; ++j) {
            const std::size_t k = static_cast<std::size_t>(x) * tw.taps + j;
            s += tw.weight[k] * src[static_cast<std::size_t>(y) * img.w() + tw.index[k]];
          }
          mid[static_cast<std::size_t>(y) * out_w + x] = s;
        }
      }
      T* dst = out.plane(n, c);
      for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
          double s = 0.0;
          for (int j = 0; j < th.taps; ++j) {
            const std::size_t k = static_cast<std::size_t>(y) * th.taps + j;
            s += th.weight[k] * mid[static_cast<std::size_t>(th.index[k]) * out_w + x];
          }
          dst[static_cast<std::size_t>(y) * out_w + x] = static_cast<T>(s);
        }
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> bicubic_resize(const Tensor<T>& img, Ratio scale) {
  if (scale.num <= 0 || scale.den <= 0) throw std::invalid_argument("bicubic_resize: scale must be positive");
  return bicubic_resize_to(img, scale.apply(img.h()), scale.apply(img.w()), scale.value(), scale.value());
}

/// BT.601 luma of an RGB image in [0, 255]; result lies in [16, 235].
template <class T>
Tensor<T> rgb_to_luminance(const Tensor<T>& image) {
  if (image.c() != 3) {
    throw ShapeError("rgb_to_luminance: expected 3 channels, got " + to_string(image.shape()));
  }
  Tensor<T> out(image.n(), 1, image.h(), image.w());
  const std::size_t plane = static_cast<std::size_t>(image.h()) * image.w();
  for (int n = 0; n < image.n(); ++n) {
    const T* r = image.plane(n, 0);
    const T* g = image.plane(n, 1);
    const T* b = image.plane(n, 2);
    T* y = out.plane(n, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = 16.0 + (65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]) / 255.0;
      y[i] = static_cast<T>(v);
    }
  }
  return out;
}

/// Rotates every plane 90 degrees counter-clockwise.
template <class T>
Tensor<T> rot90(const Tensor<T>& x) {
  Tensor<T> out(x.n(), x.c(), x.w(), x.h());
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < out.h(); ++i)
        for (int j = 0; j < out.w(); ++j) out(n, c, i, j) = x(n, c, j, x.w() - 1 - i);
  return out;
}

template <class T>
Tensor<T> flip_horizontal(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < x.h(); ++i)
        for (int j = 0; j < x.w(); ++j) out(n, c, i, j) = x(n, c, i, x.w() - 1 - j);
  return out;
}

/// One of the 8 dihedral transforms: index 0 is identity, bit 2 flips, low bits count quarter turns.
template <class T>
Tensor<T> dihedral(const Tensor<T>& x, int index) {
  if (index < 0 || index >= 8) throw std::invalid_argument("dihedral index must lie in [0, 8)");
  Tensor<T> out = index >= 4 ? flip_horizontal(x) : x;
  for (int k = 0; k < index % 4; ++k) out = rot90(out);
  return out;
}

}  // namespace smsr

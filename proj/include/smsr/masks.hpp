#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "smsr/autodiff.hpp"
#include "smsr/conv.hpp"
#include "smsr/image_ops.hpp"
#include "smsr/tensor.hpp"

namespace smsr {

enum class MaskMode { Softened, Binary };

/// Per-sample spatial mask, stored as (n, 1, h, w).
template <class T>
struct SpatialMask {
  Tensor<T> values;
  MaskMode mode = MaskMode::Binary;
};

/// Channel mask stored as (1, c, 1, 1). 1 marks a dense channel, 0 a sparse one.
template <class T>
struct ChannelMask {
  Tensor<T> values;
  MaskMode mode = MaskMode::Binary;

  [[nodiscard]] int channels() const { return values.c(); }
  static ChannelMask dense(int c) { return {Tensor<T>(1, c, 1, 1, T(1)), MaskMode::Binary}; }
  static ChannelMask from(std::span<const T> v, MaskMode mode = MaskMode::Binary) {
    return {Tensor<T>(Shape{1, static_cast<int>(v.size()), 1, 1}, std::vector<T>(v.begin(), v.end())), mode};
  }
};

template <class T>
bool is_binary(const Tensor<T>& m) {
  return std::all_of(m.values().begin(), m.values().end(), [](T v) { return v == T(0) || v == T(1); });
}

/// Seeded source of Gumbel(0, 1) noise.
class GumbelSampler {
 public:
  explicit GumbelSampler(std::uint64_t seed) : rng_(seed) {}

  template <class T = float>
  Tensor<T> sample(Shape shape) {
    Tensor<T> out(shape);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double u = std::clamp(uniform(rng_), 1e-12, 1.0 - 1e-12);
      out[i] = static_cast<T>(-std::log(-std::log(u)));
    }
    return out;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

namespace detail {
inline void check_tau(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
}
}  // namespace detail

namespace ad {

/// Differentiable two-way Gumbel softmax; returns the "keep" component along `axis`.
template <class T>
Var<T> gumbel_softmax(const Var<T>& logits, const Tensor<T>* noise, double tau, int axis) {
  smsr::detail::check_tau(tau);
  if (logits.shape().dim(axis) != 2) {
    throw ShapeError("gumbel_softmax: axis " + std::to_string(axis) + " of " + to_string(logits.shape()) +
                     " must have size 2");
  }
  Var<T> x = logits;
  if (noise != nullptr) x = add(x, x.tape()->constant(*noise));
  return slice(softmax(affine(x, T(1.0 / tau), T(0)), axis), axis, 1, 2);
}

}  // namespace ad

/// Component 1 of softmax((logits + noise) / tau) over a two-way `axis`. `noise` may be null.
template <class T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, const Tensor<T>* noise, double tau, int axis) {
  Tape<T> tape;
  return ad::gumbel_softmax(tape.constant(logits), noise, tau, axis).value();
}

/// Hard decision over a two-way axis: 1 where logit[1] >= logit[0] (ties preserve).
template <class T>
Tensor<T> argmax_mask(const Tensor<T>& logits, int axis) {
  if (logits.shape().dim(axis) != 2) throw ShapeError("argmax_mask: two-way axis expected");
  Shape s = logits.shape();
  s.set_dim(axis, 1);
  Tensor<T> out(s);
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (int d = 0; d < axis; ++d) outer *= logits.shape().dim(d);
  for (int d = axis + 1; d < 4; ++d) inner *= logits.shape().dim(d);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const T drop = logits[o * 2 * inner + i];
      const T keep = logits[o * 2 * inner + inner + i];
      out[o * inner + i] = keep >= drop ? T(1) : T(0);
    }
  return out;
}

/// Weights of the spatial-mask predictor: stride-2 3x3 conv (C -> C/4), 3x3 conv (C/4 -> C/4),
/// nearest x2 upsampling back to the input size, 3x3 conv (C/4 -> 2).
template <class T>
struct HourglassParams {
  Parameter<T> down_w, down_b;
  Parameter<T> mid_w, mid_b;
  Parameter<T> out_w, out_b;

  [[nodiscard]] int channels() const { return down_w.value.c(); }
  [[nodiscard]] int hidden() const { return down_w.value.n(); }
};

inline int hourglass_hidden(int channels) { return std::max(1, channels / 4); }

namespace ad {

/// Spatial logits (n, 2, h, w) for a feature map on the tape.
template <class T>
Var<T> hourglass(const Var<T>& feature, HourglassParams<T>& hg, MacCounter* counter = nullptr) {
  Tape<T>& t = *feature.tape();
  const int h = feature.shape().h;
  const int w = feature.shape().w;
  auto dw = t.param(hg.down_w);
  auto db = t.param(hg.down_b);
  auto x = relu(conv2d(feature, dw, &db, 2, 1, counter));
  auto mw = t.param(hg.mid_w);
  auto mb = t.param(hg.mid_b);
  x = relu(conv2d(x, mw, &mb, 1, 1, counter));
  x = upsample_nearest(x, 2, h, w);
  auto ow = t.param(hg.out_w);
  auto ob = t.param(hg.out_b);
  return conv2d(x, ow, &ob, 1, 1, counter);
}

/// Spatial mask (n, 1, h, w): Gumbel softmax over the hourglass logits when softened,
/// argmax (noise ignored, no gradient) when binary.
template <class T>
Var<T> spatial_mask(const Var<T>& feature, HourglassParams<T>& hg, const Tensor<T>* noise, double tau,
                    MaskMode mode) {
  Var<T> logits = hourglass(feature, hg);
  if (mode == MaskMode::Binary) return feature.tape()->constant(argmax_mask(logits.value(), 1));
  return gumbel_softmax(logits, noise, tau, 1);
}

/// Channel mask (1, c, 1, 1) from logits stored as (2, c, 1, 1).
template <class T>
Var<T> channel_mask(const Var<T>& logits, const Tensor<T>* noise, double tau, MaskMode mode) {
  if (mode == MaskMode::Binary) {
    return logits.tape()->constant(argmax_mask(logits.value(), 0));
  }
  return gumbel_softmax(logits, noise, tau, 0);
}

/// Ratio of activated output locations for one layer:
/// eta = 1/(CHW) * sum_{c,x,y} (1 - m_ch[c]) m_spa[x,y] + m_ch[c].
/// The double sum factorises, so eta = (1 - mean(m_ch)) * mean(m_spa) + mean(m_ch).
/// With a batch of spatial masks this is the batch mean of the per-sample terms.
template <class T>
Var<T> sparsity_term(const Var<T>& m_ch, const Var<T>& m_spa) {
  auto ch = mean(m_ch);
  return add(mul(affine(ch, T(-1), T(1)), mean(m_spa)), ch);
}

/// Mean of the per-layer sparsity terms.
template <class T>
Var<T> reg_loss(std::span<const Var<T>> etas) {
  if (etas.empty()) throw std::invalid_argument("reg_loss: no sparsity terms");
  Var<T> s = etas.front();
  for (std::size_t i = 1; i < etas.size(); ++i) s = add(s, etas[i]);
  return affine(s, T(1) / static_cast<T>(etas.size()), T(0));
}

}  // namespace ad

/// Sparsity term on plain masks; the spatial mask may hold several samples (averaged).
template <class T>
double sparsity_term(const ChannelMask<T>& m_ch, const SpatialMask<T>& m_spa) {
  double ch = 0.0;
  for (T v : m_ch.values.values()) ch += v;
  ch /= static_cast<double>(m_ch.values.size());
  double spa = 0.0;
  for (T v : m_spa.values.values()) spa += v;
  spa /= static_cast<double>(m_spa.values.size());
  return (1.0 - ch) * spa + ch;
}

inline double reg_loss(std::span<const double> etas) {
  if (etas.empty()) throw std::invalid_argument("reg_loss: no sparsity terms");
  double s = 0.0;
  for (double e : etas) s += e;
  return s / static_cast<double>(etas.size());
}

/// tau = max(floor, 1 - t / period).
inline double temperature_schedule(double epoch, double period = 500.0, double floor = 0.4) {
  return std::max(floor, 1.0 - epoch / period);
}

/// lambda = lambda0 * min(t / warmup, 1).
inline double lambda_schedule(double epoch, double lambda0, double warmup = 50.0) {
  return lambda0 * std::min(epoch / warmup, 1.0);
}

/// Fixed mask marking pixels whose central-difference gradient magnitude (0-255 scale) exceeds
/// alpha. Accepts a 1-channel image or an RGB image (converted to luminance first).
template <class T>
SpatialMask<T> heuristic_spatial_mask(const Tensor<T>& image, double alpha) {
  const Tensor<T> lum = image.c() == 3 ? rgb_to_luminance(image) : image;
  if (lum.c() != 1) throw ShapeError("heuristic_spatial_mask: expected 1 or 3 channels, got " + to_string(image.shape()));
  const int h = lum.h();
  const int w = lum.w();
  Tensor<T> mask(lum.n(), 1, h, w);
  for (int n = 0; n < lum.n(); ++n)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double gx = (static_cast<double>(lum(n, 0, y, std::min(x + 1, w - 1))) - lum(n, 0, y, std::max(x - 1, 0))) / 2.0;
        const double gy = (static_cast<double>(lum(n, 0, std::min(y + 1, h - 1), x)) - lum(n, 0, std::max(y - 1, 0), x)) / 2.0;
        mask(n, 0, y, x) = std::sqrt(gx * gx + gy * gy) > alpha ? T(1) : T(0);
      }
  return {std::move(mask), MaskMode::Binary};
}

/// Ratio of exact zeros per channel, pooled over the batch.
template <class T>
std::vector<double> feature_sparsity_probe(const Tensor<T>& feature) {
  std::vector<double> out(feature.c(), 0.0);
  const std::size_t plane = static_cast<std::size_t>(feature.h()) * feature.w();
  for (int c = 0; c < feature.c(); ++c) {
    std::size_t zeros = 0;
    for (int n = 0; n < feature.n(); ++n) {
      const T* p = feature.plane(n, c);
      zeros += static_cast<std::size_t>(std::count(p, p + plane, T(0)));
    }
    const std::size_t total = plane * feature.n();
    out[c] = total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
  }
  return out;
}

}  // namespace smsr

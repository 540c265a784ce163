#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "smsr/conv.hpp"
#include "smsr/masks.hpp"
#include "smsr/model.hpp"
#include "smsr/sparse_exec.hpp"

namespace smsr {

/// Per-layer sparsity terms of one inference and their summaries.
struct SparsityReport {
  std::vector<std::vector<double>> eta;      // [k][l]
  std::vector<double> module_sparsity;       // 1 - mean_l eta[k][l]
  std::vector<std::size_t> important_pixels;  // N_imp per module (first sample)
  double aggregate = 0.0;                    // 1 - mean_{k,l} eta[k][l]

  static SparsityReport from_trace(const InferenceTrace& trace) {
    SparsityReport r;
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& m : trace.modules) {
      r.eta.push_back(m.etas);
      double s = 0.0;
      for (double e : m.etas) s += e;
      r.module_sparsity.push_back(m.etas.empty() ? 0.0 : 1.0 - s / static_cast<double>(m.etas.size()));
      r.important_pixels.push_back(m.important.empty() ? 0 : m.important.front());
      sum += s;
      count += m.etas.size();
    }
    r.aggregate = count == 0 ? 0.0 : 1.0 - sum / static_cast<double>(count);
    return r;
  }
};

/// Masks of one image, reduced to what the cost model needs.
struct ModuleMasks {
  std::size_t important = 0;                      // N_imp
  std::vector<ChannelMask<float>> channel_masks;  // L output masks
};

struct NetworkMasks {
  std::vector<ModuleMasks> modules;
  bool heuristic = false;  // spatial masks not predicted, so no hourglass cost

  static NetworkMasks from_trace(const InferenceTrace& trace, bool heuristic = false) {
    NetworkMasks nm;
    nm.heuristic = heuristic;
    for (const auto& m : trace.modules) nm.modules.push_back({m.important.empty() ? 0 : m.important.front(), m.channel_masks});
    return nm;
  }

  static NetworkMasks dense(const ModelConfig& cfg, int h, int w) {
    NetworkMasks nm;
    for (int k = 0; k < cfg.num_modules; ++k) {
      ModuleMasks mm;
      mm.important = static_cast<std::size_t>(h) * w;
      for (int l = 0; l < cfg.num_layers; ++l) mm.channel_masks.push_back(ChannelMask<float>::dense(cfg.channels));
      nm.modules.push_back(std::move(mm));
    }
    return nm;
  }
};

struct LayerFlops {
  std::string name;
  std::uint64_t flops = 0;
};

/// FLOP counts (2 per multiply-accumulate) of one inference.
struct FlopReport {
  std::vector<LayerFlops> layers;
  std::uint64_t total = 0;
  std::uint64_t dense_total = 0;  // same network with every mask set to 1
  double ratio = 1.0;
  int lr_height = 0;
  int lr_width = 0;
};

/// Cost of one sparse mask convolution: dense->dense over the full plane, the other three
/// branches over the N_imp important pixels.
inline std::uint64_t sparse_layer_flops(int k, std::uint64_t din, std::uint64_t sin, std::uint64_t dout,
                                        std::uint64_t sout, std::uint64_t pixels, std::uint64_t important) {
  const std::uint64_t kk = static_cast<std::uint64_t>(k) * k;
  return 2 * kk * (din * dout * pixels + (din * sout + sin * dout + sin * sout) * important);
}

namespace detail {

inline std::uint64_t conv_flops(std::uint64_t cout, std::uint64_t cin, int k, std::uint64_t out_pixels) {
  return 2 * cout * cin * static_cast<std::uint64_t>(k) * k * out_pixels;
}

inline std::vector<LayerFlops> network_flops(const ModelConfig& cfg, const NetworkMasks& masks, int h, int w) {
  if (masks.modules.size() != static_cast<std::size_t>(cfg.num_modules)) {
    throw std::invalid_argument("count_flops: expected one mask set per module");
  }
  const std::uint64_t c = cfg.channels;
  const std::uint64_t hw = static_cast<std::uint64_t>(h) * w;
  const int hid = hourglass_hidden(cfg.channels);
  const std::uint64_t half = static_cast<std::uint64_t>(conv_out_size(h, 3, 2, 1)) * conv_out_size(w, 3, 2, 1);
  std::vector<LayerFlops> out;
  out.push_back({"head", conv_flops(c, 3, 3, hw)});
  for (int k = 0; k < cfg.num_modules; ++k) {
    const std::string p = "smm" + std::to_string(k);
    const ModuleMasks& mm = masks.modules[k];
    if (mm.channel_masks.size() != static_cast<std::size_t>(cfg.num_layers)) {
      throw std::invalid_argument("count_flops: expected one channel mask per layer");
    }
    if (!masks.heuristic) {
      out.push_back({p + ".hourglass", conv_flops(hid, c, 3, half) + conv_flops(hid, hid, 3, half) +
                                           conv_flops(2, hid, 3, hw)});
    }
    std::uint64_t din = c;
    std::uint64_t sin = 0;
    for (int l = 0; l < cfg.num_layers; ++l) {
      const ChannelMask<float>& m = mm.channel_masks[l];
      std::uint64_t dout = 0;
      for (float v : m.values.values()) dout += v == 1.0f ? 1 : 0;
      const std::uint64_t sout = c - dout;
      out.push_back({p + ".conv" + std::to_string(l), sparse_layer_flops(3, din, sin, dout, sout, hw, mm.important)});
      din = dout;
      sin = sout;
    }
    out.push_back({p + ".fusion", conv_flops(c, c * cfg.num_layers, 1, hw)});
  }
  const std::uint64_t r2 = static_cast<std::uint64_t>(cfg.scale) * cfg.scale;
  out.push_back({"tail.expand", conv_flops(c * r2, c, 3, hw)});
  out.push_back({"tail.out", conv_flops(3, c, 3, hw * r2)});
  return out;
}

}  // namespace detail

/// Analytic FLOPs for an LR input of h x w. Mask generation (hourglass) is included; channel
/// masks are fixed after training and cost nothing at inference.
inline FlopReport count_flops(const ModelConfig& cfg, const NetworkMasks& masks, int h, int w) {
  FlopReport r;
  r.lr_height = h;
  r.lr_width = w;
  r.layers = detail::network_flops(cfg, masks, h, w);
  for (const auto& l : r.layers) r.total += l.flops;
  NetworkMasks dense = NetworkMasks::dense(cfg, h, w);
  dense.heuristic = masks.heuristic;
  for (const auto& l : detail::network_flops(cfg, dense, h, w)) r.dense_total += l.flops;
  r.ratio = r.dense_total == 0 ? 1.0 : static_cast<double>(r.total) / static_cast<double>(r.dense_total);
  return r;
}

/// LR size whose x`scale` output is 1280x720.
inline std::pair<int, int> reference_720p_lr(int scale) { return {720 / scale, 1280 / scale}; }

/// Rescales per-module important-pixel counts measured at one LR size to another, keeping the
/// spatial density.
inline NetworkMasks rescale_masks(NetworkMasks masks, int from_h, int from_w, int to_h, int to_w) {
  const double f = static_cast<double>(to_h) * to_w / (static_cast<double>(from_h) * from_w);
  for (auto& m : masks.modules) m.important = static_cast<std::size_t>(std::llround(m.important * f));
  return masks;
}

struct BenchStats {
  double median_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  int runs = 0;
};

/// Median wall time of `runs` calls after `warmup` untimed calls.
template <class F>
BenchStats time_it(F&& fn, int warmup = 3, int runs = 10) {
  if (runs < 1) throw std::invalid_argument("time_it: need at least one timed run");
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> ms;
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t mid = ms.size() / 2;
  const double median = ms.size() % 2 ? ms[mid] : 0.5 * (ms[mid - 1] + ms[mid]);
  return {median, ms.front(), ms.back(), runs};
}

struct BenchResult {
  BenchStats dense;
  BenchStats sparse;
  double speedup = 0.0;   // dense median / sparse median
  double sparsity = 0.0;  // 1 - eta of the benchmarked masks
};

/// A synthetic sparse mask convolution layer: `dense_fraction` of the channels dense, a random
/// `spatial_fraction` of the pixels important, and sparse input channels zero elsewhere.
struct SyntheticLayer {
  Tensor<float> feature;
  ConvSpec<float> spec;
  ChannelMask<float> m_in;
  ChannelMask<float> m_out;
  SpatialMask<float> m_spa;

  [[nodiscard]] double sparsity() const { return 1.0 - sparsity_term(m_out, m_spa); }

  static SyntheticLayer make(int channels, int h, int w, double dense_fraction, double spatial_fraction,
                             std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
    SyntheticLayer s;
    s.spec.weight = Tensor<float>(channels, channels, 3, 3);
    for (auto& v : s.spec.weight.values()) v = uni(rng) * 0.1f;
    s.spec.bias = Tensor<float>(1, channels, 1, 1);
    for (auto& v : s.spec.bias.values()) v = uni(rng) * 0.1f;
    s.spec.pad = 1;
    auto channel_mask = [&] {
      std::vector<float> m(channels, 0.0f);
      const int dense = static_cast<int>(std::lround(dense_fraction * channels));
      std::fill_n(m.begin(), dense, 1.0f);
      std::shuffle(m.begin(), m.end(), rng);
      return ChannelMask<float>::from(m);
    };
    s.m_in = channel_mask();
    s.m_out = channel_mask();
    std::vector<float> spa(static_cast<std::size_t>(h) * w, 0.0f);
    std::fill_n(spa.begin(), static_cast<std::size_t>(std::lround(spatial_fraction * h * w)), 1.0f);
    std::shuffle(spa.begin(), spa.end(), rng);
    s.m_spa = {Tensor<float>(Shape{1, 1, h, w}, std::move(spa)), MaskMode::Binary};
    s.feature = Tensor<float>(1, channels, h, w);
    for (int c = 0; c < channels; ++c) {
      const bool dense_channel = s.m_in.values[c] == 1.0f;
      float* p = s.feature.plane(0, c);
      for (int i = 0; i < h * w; ++i) p[i] = (dense_channel || s.m_spa.values[i] == 1.0f) ? uni(rng) : 0.0f;
    }
    return s;
  }
};

/// Dense im2col convolution vs. sparse mask convolution on one layer, single threaded.
inline BenchResult bench_layer(const SyntheticLayer& layer, int runs = 10, int warmup = 3) {
  set_blas_threads(1);
  const KernelSplit<float> split = split_kernel(layer.spec, layer.m_in, layer.m_out);
  const ImportantIndexList idx = ImportantIndexList::compile(layer.m_spa.values);
  BenchResult r;
  r.dense = time_it([&] { (void)conv2d_dense(layer.feature, layer.spec); }, warmup, runs);
  r.sparse = time_it([&] { (void)sparse_mask_conv_infer(layer.feature, split, idx); }, warmup, runs);
  r.speedup = r.dense.median_ms / r.sparse.median_ms;
  r.sparsity = layer.sparsity();
  return r;
}

/// Whole-network timing: dense execution of the same weights vs. sparse inference.
inline BenchResult bench_model(const SmsrModel& model, const Tensor<float>& lr, int runs = 10, int warmup = 3) {
  set_blas_threads(1);
  const SparseEngine engine(model);
  BenchResult r;
  r.dense = time_it([&] { (void)engine.run_dense(lr); }, warmup, runs);
  InferenceTrace trace;
  r.sparse = time_it([&] { (void)engine.run(lr, &trace); }, warmup, runs);
  r.speedup = r.dense.median_ms / r.sparse.median_ms;
  r.sparsity = SparsityReport::from_trace(trace).aggregate;
  return r;
}

}  // namespace smsr

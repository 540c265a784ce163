#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "smsr/smsr.hpp"

using namespace smsr;

namespace {

Tensor<float> noisy_copy(const Tensor<float>& img, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Tensor<float> out = img;
  for (auto& v : out.values()) v = static_cast<float>(std::clamp(std::round(v + n(rng)), 0.0, 255.0));
  return out;
}

NetworkMasks uniform_masks(const ModelConfig& cfg, int h, int w, double x) {
  NetworkMasks nm;
  const int dense = static_cast<int>(std::lround(x * cfg.channels));
  for (int k = 0; k < cfg.num_modules; ++k) {
    ModuleMasks mm;
    mm.important = static_cast<std::size_t>(std::llround(x * h * w));
    std::vector<float> m(cfg.channels, 0.0f);
    std::fill_n(m.begin(), dense, 1.0f);
    for (int l = 0; l < cfg.num_layers; ++l) mm.channel_masks.push_back(ChannelMask<float>::from(m));
    nm.modules.push_back(std::move(mm));
  }
  return nm;
}

}  // namespace

TEST(Psnr, UniformOffsetLuminance) {
  Tensor<float> hr(1, 1, 20, 20, 100.0f), sr(1, 1, 20, 20, 116.0f);
  EXPECT_NEAR(psnr(sr, hr, 2), 20.0 * std::log10(255.0 / 16.0), 1e-9);
  EXPECT_NEAR(psnr(sr, hr, 2), 24.05, 0.01);
}

TEST(Psnr, IdenticalIsInfinite) {
  auto img = synthetic_image(24, 24, 1);
  EXPECT_TRUE(std::isinf(psnr(img, img, 2)));
  EXPECT_GT(psnr(img, img, 2), 0.0);
}

TEST(Psnr, BorderCropAndColour) {
  Tensor<float> hr(1, 3, 10, 10, 50.0f), sr = hr;
  // damage confined to the cropped border
  for (int c = 0; c < 3; ++c) sr(0, c, 0, 5) = 250.0f;
  EXPECT_TRUE(std::isinf(psnr(sr, hr, 1)));
  EXPECT_FALSE(std::isinf(psnr(sr, hr, 0)));
  // white vs black in RGB differs by 219 in luminance
  Tensor<float> black(1, 3, 6, 6), white(1, 3, 6, 6, 255.0f);
  EXPECT_NEAR(psnr(white, black, 1), 20.0 * std::log10(255.0 / 219.0), 1e-9);
  EXPECT_THROW(psnr(black, Tensor<float>(1, 3, 6, 5), 1), ShapeError);
  EXPECT_THROW(psnr(black, black, 3), ShapeError);
}

TEST(Ssim, MatchesNaiveReference) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto hr = synthetic_image(30 + seed * 3, 28 + seed, seed);
    auto sr = noisy_copy(hr, 6.0 * seed, seed + 100);
    for (int border : {0, 2, 3})
      EXPECT_NEAR(ssim(sr, hr, border), oracle::naive_ssim(sr, hr, border), 1e-6) << seed << " " << border;
  }
  // single-channel input
  auto y = synthetic_image(16, 19, 4);
  Tensor<float> g(1, 1, 16, 19);
  for (int i = 0; i < 16 * 19; ++i) g[i] = y[i];
  auto gn = noisy_copy(g, 10.0, 5);
  EXPECT_NEAR(ssim(gn, g, 1), oracle::naive_ssim(gn, g, 1), 1e-6);
}

TEST(Ssim, IdenticalIsOneAndDamageLowersIt) {
  auto img = synthetic_image(32, 32, 7);
  EXPECT_NEAR(ssim(img, img, 2), 1.0, 1e-12);
  const double mild = ssim(noisy_copy(img, 3.0, 1), img, 2);
  const double heavy = ssim(noisy_copy(img, 30.0, 1), img, 2);
  EXPECT_LT(mild, 1.0);
  EXPECT_LT(heavy, mild);
  EXPECT_THROW(ssim(Tensor<float>(1, 1, 12, 12), Tensor<float>(1, 1, 12, 12), 1), ShapeError);
}

TEST(Ssim, GaussianWindow) {
  auto g = gaussian_window();
  ASSERT_EQ(g.size(), 11u);
  double s = 0;
  for (double v : g) s += v;
  EXPECT_NEAR(s, 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(g[0], g[10]);
  EXPECT_NEAR(g[4] / g[5], std::exp(-1.0 / 4.5), 1e-15);
}

TEST(CountFlops, EqualsInstrumentedCounter) {
  for (ModelConfig cfg : {ModelConfig{2, 2, 2, 8}, ModelConfig{3, 1, 3, 4}, ModelConfig{4, 3, 1, 6}}) {
    for (std::uint64_t seed : {1u, 2u}) {
      auto model = SmsrModel::init(cfg, seed);
      Tensor<float> lr = synthetic_image(9 + seed, 11, seed);
      for (auto& v : lr.values()) v /= 255.0f;
      InferenceTrace trace;
      MacCounter mc;
      SparseEngine(model).run(lr, &trace, &mc);
      auto rep = count_flops(cfg, NetworkMasks::from_trace(trace), lr.h(), lr.w());
      EXPECT_EQ(rep.total, 2 * mc.macs);
      MacCounter dense;
      SparseEngine(model).run_dense(lr, &dense);
      // the dense reference keeps mask generation; run_dense skips it
      const auto dref = count_flops(cfg, NetworkMasks::dense(cfg, lr.h(), lr.w()), lr.h(), lr.w());
      std::uint64_t hourglass = 0;
      for (const auto& l : dref.layers)
        if (l.name.ends_with(".hourglass")) hourglass += l.flops;
      EXPECT_EQ(dref.total, rep.dense_total);
      EXPECT_EQ(rep.dense_total, 2 * dense.macs + hourglass);
      std::uint64_t sum = 0;
      for (const auto& l : rep.layers) sum += l.flops;
      EXPECT_EQ(sum, rep.total);
    }
  }
}

TEST(CountFlops, HeuristicMasksSkipHourglass) {
  const ModelConfig cfg{2, 2, 2, 8};
  auto model = SmsrModel::init(cfg, 3);
  model.heuristic_alpha = 20.0;
  Tensor<float> lr = synthetic_image(12, 12, 3);
  for (auto& v : lr.values()) v /= 255.0f;
  InferenceTrace trace;
  MacCounter mc;
  SparseEngine(model).run(lr, &trace, &mc);
  auto rep = count_flops(cfg, NetworkMasks::from_trace(trace, true), 12, 12);
  EXPECT_EQ(rep.total, 2 * mc.macs);
  for (const auto& l : rep.layers) EXPECT_EQ(l.name.find("hourglass"), std::string::npos);
}

TEST(CountFlops, DenseRatioIsOneAndErrors) {
  const ModelConfig cfg{2, 3, 2, 16};
  auto rep = count_flops(cfg, NetworkMasks::dense(cfg, 10, 10), 10, 10);
  EXPECT_EQ(rep.total, rep.dense_total);
  EXPECT_DOUBLE_EQ(rep.ratio, 1.0);
  auto bad = NetworkMasks::dense(cfg, 10, 10);
  bad.modules.pop_back();
  EXPECT_THROW(count_flops(cfg, bad, 10, 10), std::invalid_argument);
  bad = NetworkMasks::dense(cfg, 10, 10);
  bad.modules[0].channel_masks.pop_back();
  EXPECT_THROW(count_flops(cfg, bad, 10, 10), std::invalid_argument);
}

TEST(CountFlops, RatioDecreasesWithSparsity) {
  const ModelConfig cfg{2, 5, 4, 64};
  const auto [h, w] = reference_720p_lr(2);
  EXPECT_EQ(h, 360);
  EXPECT_EQ(w, 640);
  double prev = 2.0;
  for (int d = 64; d >= 0; d -= 4) {
    const double x = d / 64.0;
    auto rep = count_flops(cfg, uniform_masks(cfg, h, w, x), h, w);
    EXPECT_LT(rep.ratio, prev) << d;
    prev = rep.ratio;
  }
  // sparsity (1 - x)^2 = 0.46
  const double x = 1.0 - std::sqrt(0.46);
  const double r = count_flops(cfg, uniform_masks(cfg, h, w, x), h, w).ratio;
  EXPECT_GE(r, 0.5);
  EXPECT_LE(r, 0.75);
}

TEST(CountFlops, RescaleKeepsDensity) {
  NetworkMasks nm = uniform_masks({2, 2, 2, 8}, 10, 10, 0.5);
  auto big = rescale_masks(nm, 10, 10, 20, 30);
  EXPECT_EQ(big.modules[0].important, 300u);
}

TEST(SparsityReport, Aggregates) {
  InferenceTrace t;
  t.modules.resize(2);
  t.modules[0].etas = {1.0, 0.5};
  t.modules[0].important = {7};
  t.modules[1].etas = {0.25, 0.25};
  auto r = SparsityReport::from_trace(t);
  EXPECT_DOUBLE_EQ(r.module_sparsity[0], 0.25);
  EXPECT_DOUBLE_EQ(r.module_sparsity[1], 0.75);
  EXPECT_DOUBLE_EQ(r.aggregate, 0.5);
  EXPECT_EQ(r.important_pixels[0], 7u);
  EXPECT_EQ(r.important_pixels[1], 0u);
}

TEST(TimeIt, MedianAndCounts) {
  int calls = 0;
  auto s = time_it([&] { ++calls; }, 2, 5);
  EXPECT_EQ(calls, 7);
  EXPECT_EQ(s.runs, 5);
  EXPECT_LE(s.min_ms, s.median_ms);
  EXPECT_LE(s.median_ms, s.max_ms);
  EXPECT_THROW(time_it([] {}, 0, 0), std::invalid_argument);
}

TEST(BenchLayer, SyntheticLayerMasks) {
  auto layer = SyntheticLayer::make(16, 12, 12, 0.25, 0.5, 3);
  int dense = 0;
  for (float v : layer.m_out.values.values()) dense += v == 1.0f;
  EXPECT_EQ(dense, 4);
  double imp = 0;
  for (float v : layer.m_spa.values.values()) imp += v;
  EXPECT_EQ(imp, 72.0);
  EXPECT_NEAR(layer.sparsity(), 0.75 * 0.5, 1e-12);
  auto r = bench_layer(layer, 2, 1);
  EXPECT_GT(r.speedup, 0.0);
  EXPECT_DOUBLE_EQ(r.sparsity, layer.sparsity());
}

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "smsr/smsr.hpp"

using namespace smsr;

namespace {

std::size_t expected_params(const ModelConfig& m) {
  const std::size_t c = m.channels, k = m.num_modules, l = m.num_layers, r2 = m.scale * m.scale;
  const std::size_t hid = std::max<std::size_t>(1, c / 4);
  const std::size_t head = 3 * c * 9 + c;
  const std::size_t hourglass = (hid * c * 9 + hid) + (hid * hid * 9 + hid) + (2 * hid * 9 + 2);
  const std::size_t smm = l * (c * c * 9 + c) + l * 2 * c + hourglass + (l * c * c + c);
  const std::size_t tail = (c * r2 * c * 9 + c * r2) + (3 * c * 9 + 3);
  return head + k * smm + tail;
}

Tensor<float> unit_image(int h, int w, std::uint64_t seed) {
  Tensor<float> img = synthetic_image(h, w, seed);
  for (auto& v : img.values()) v /= 255.0f;
  return img;
}

}  // namespace

TEST(Model, ParameterCount) {
  const ModelConfig full{2, 5, 4, 64};
  EXPECT_EQ(SmsrModel::zeros(full).parameter_count(), expected_params(full));
  EXPECT_EQ(expected_params(full), 1033805u);
  // within 5% of 985K
  EXPECT_LT(std::abs(static_cast<double>(expected_params(full)) - 985e3) / 985e3, 0.05);
  for (ModelConfig c : {ModelConfig{3, 3, 2, 16}, ModelConfig{4, 1, 1, 8}, ModelConfig{2, 2, 3, 5}})
    EXPECT_EQ(SmsrModel::zeros(c).parameter_count(), expected_params(c));
  // hourglass stays around 11-12K at C = 64
  const auto m = SmsrModel::zeros(full);
  std::size_t hg = 0;
  for (const auto& [name, p] : m.named_parameters())
    if (name.starts_with("smm0.hourglass")) hg += p->value.size();
  EXPECT_GT(hg, 11000u);
  EXPECT_LT(hg, 12500u);
}

TEST(Model, InitIsSeededAndNamed) {
  const ModelConfig cfg{2, 2, 2, 8};
  auto a = SmsrModel::init(cfg, 5);
  auto b = SmsrModel::init(cfg, 5);
  auto c = SmsrModel::init(cfg, 6);
  EXPECT_EQ(a.head.weight.value, b.head.weight.value);
  EXPECT_FALSE(a.head.weight.value == c.head.weight.value);
  std::set<std::string> names;
  for (const auto& [n, p] : a.named_parameters()) names.insert(n);
  EXPECT_EQ(names.size(), a.named_parameters().size());
  EXPECT_TRUE(names.count("smm1.mask1.logits"));
  EXPECT_TRUE(names.count("tail.out.bias"));
  EXPECT_THROW(SmsrModel::zeros({0, 1, 1, 1}), std::invalid_argument);
}

TEST(Model, ForwardShapesAndMaskCounts) {
  for (int scale : {2, 3, 4}) {
    const ModelConfig cfg{scale, 2, 3, 8};
    auto model = SmsrModel::init(cfg, 1);
    auto lr = unit_image(7, 9, 3);
    Tape<float> tape;
    GumbelSampler g(1);
    auto fwd = forward_train(model, tape, lr, options_at_epoch(0, &g));
    EXPECT_EQ(fwd.sr.shape(), (Shape{1, 3, 7 * scale, 9 * scale}));
    EXPECT_EQ(fwd.spatial_masks.size(), 2u);
    EXPECT_EQ(fwd.etas.size(), 6u);
    EXPECT_EQ(fwd.channel_masks[1].size(), 3u);
    EXPECT_EQ(fwd.spatial_masks[0].shape(), (Shape{1, 1, 7, 9}));
    auto out = forward_infer(model, lr);
    EXPECT_EQ(out.shape(), fwd.sr.shape());
    for (float v : out.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_THROW(options_at_epoch(-1, nullptr), std::invalid_argument);
}

TEST(Model, TrainingBinaryPathEqualsSparseInference) {
  const ModelConfig cfg{2, 3, 3, 8};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto model = SmsrModel::init(cfg, seed);
    auto lr = unit_image(12, 10, seed + 10);
    Tape<float> tape;
    auto fwd = forward_train(model, tape, lr, {0.4, MaskMode::Binary, nullptr, false});
    InferenceTrace trace;
    auto out = forward_infer(model, lr, &trace);
    Tensor<float> clamped = fwd.sr.value();
    for (auto& v : clamped.values()) v = std::clamp(v, 0.0f, 1.0f);
    EXPECT_LT(max_abs_diff(out, clamped), 1e-4f);
    ASSERT_EQ(trace.modules.size(), 3u);
    for (int k = 0; k < 3; ++k) {
      EXPECT_EQ(trace.modules[k].spatial_mask, fwd.spatial_masks[k].value());
      for (int l = 0; l < 3; ++l)
        EXPECT_NEAR(trace.modules[k].etas[l], fwd.etas[k * 3 + l].value()[0], 1e-6);
    }
  }
}

TEST(Model, ForceDenseMatchesDenseRun) {
  const ModelConfig cfg{2, 2, 2, 8};
  auto model = SmsrModel::init(cfg, 4);
  auto lr = unit_image(8, 8, 4);
  Tape<float> tape;
  auto fwd = forward_train(model, tape, lr, {1.0, MaskMode::Softened, nullptr, true});
  auto dense = SparseEngine(model).run_dense(lr);
  Tensor<float> clamped = fwd.sr.value();
  for (auto& v : clamped.values()) v = std::clamp(v, 0.0f, 1.0f);
  EXPECT_LT(max_abs_diff(dense, clamped), 1e-5f);
  for (const auto& e : fwd.etas) EXPECT_EQ(e.value()[0], 1.0f);
}

TEST(Model, HeuristicMasksAreFixedAcrossModules) {
  const ModelConfig cfg{2, 3, 2, 8};
  auto model = SmsrModel::init(cfg, 5);
  model.heuristic_alpha = 30.0;
  auto lr = unit_image(16, 16, 6);
  InferenceTrace trace;
  forward_infer(model, lr, &trace);
  Tensor<float> img = lr;
  for (auto& v : img.values()) v *= 255.0f;
  const Tensor<float> expect = heuristic_spatial_mask(img, 30.0).values;
  for (const auto& m : trace.modules) EXPECT_EQ(m.spatial_mask, trace.modules[0].spatial_mask);
  EXPECT_EQ(trace.modules[0].spatial_mask, expect);
}

TEST(Model, ZeroWeightsReduceToBicubic) {
  const ModelConfig cfg{3, 1, 1, 4};
  auto model = SmsrModel::zeros(cfg);
  auto lr = unit_image(6, 5, 7);
  auto out = forward_infer(model, lr);
  auto bic = bicubic_resize(lr, Ratio{3, 1});
  for (auto& v : bic.values()) v = std::clamp(v, 0.0f, 1.0f);
  EXPECT_EQ(out, bic);
}

TEST(Model, GradientsReachEveryParameter) {
  const ModelConfig cfg{2, 2, 2, 8};
  auto model = SmsrModel::init(cfg, 8);
  auto lr = unit_image(8, 8, 9);
  auto hr = unit_image(16, 16, 10);
  Tape<float> tape;
  GumbelSampler g(2);
  auto fwd = forward_train(model, tape, lr, {1.0, MaskMode::Softened, &g, false});
  auto loss = total_loss(fwd.sr, tape.constant(hr), fwd.etas, 0.1);
  tape.backward(loss.total);
  for (const auto& [name, p] : model.named_parameters()) {
    double s = 0;
    for (float v : p->grad.values()) s += std::abs(v);
    EXPECT_GT(s, 0.0) << name;
  }
}

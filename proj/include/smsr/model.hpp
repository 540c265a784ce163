#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "smsr/autodiff.hpp"
#include "smsr/conv.hpp"
#include "smsr/image_ops.hpp"
#include "smsr/masks.hpp"
#include "smsr/sparse_exec.hpp"
#include "smsr/tensor.hpp"

namespace smsr {

struct ModelConfig {
  int scale = 2;
  int num_modules = 5;  // K
  int num_layers = 4;   // L
  int channels = 64;    // C

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// A convolution's trainable weight and bias.
struct ConvParam {
  Parameter<float> weight;
  Parameter<float> bias;
  int stride = 1;
  int pad = 1;

  [[nodiscard]] ConvSpec<float> spec() const { return {weight.value, bias.value, stride, pad}; }
};

/// One sparse mask module: L sparse mask convolutions sharing a spatial mask, per-layer
/// channel-mask logits (2, C, 1, 1), and a 1x1 fusion over the concatenated layer outputs.
struct SmmWeights {
  std::vector<ConvParam> convs;
  std::vector<Parameter<float>> mask_logits;
  HourglassParams<float> hourglass;
  ConvParam fusion;
};

/// Full network: head conv, K SMMs with residuals, conv -> pixel shuffle -> conv tail, plus a
/// bicubic upsampling of the input as a global skip.
class SmsrModel {
 public:
  ModelConfig config;
  ConvParam head;
  std::vector<SmmWeights> smms;
  ConvParam tail_expand;
  ConvParam tail_out;
  /// When set, spatial masks come from thresholded image gradients instead of the hourglass.
  std::optional<double> heuristic_alpha;

  /// Allocates every tensor with the right shape, zero-filled.
  static SmsrModel zeros(const ModelConfig& cfg) {
    validate(cfg);
    SmsrModel m;
    m.config = cfg;
    const int c = cfg.channels;
    const int hid = hourglass_hidden(c);
    m.head = make_conv(c, 3, 3, 1, 1);
    m.smms.resize(cfg.num_modules);
    for (auto& smm : m.smms) {
      for (int l = 0; l < cfg.num_layers; ++l) {
        smm.convs.push_back(make_conv(c, c, 3, 1, 1));
        smm.mask_logits.emplace_back(Tensor<float>(2, c, 1, 1));
      }
      smm.hourglass.down_w = Parameter<float>(Tensor<float>(hid, c, 3, 3));
      smm.hourglass.down_b = Parameter<float>(Tensor<float>(1, hid, 1, 1));
      smm.hourglass.mid_w = Parameter<float>(Tensor<float>(hid, hid, 3, 3));
      smm.hourglass.mid_b = Parameter<float>(Tensor<float>(1, hid, 1, 1));
      smm.hourglass.out_w = Parameter<float>(Tensor<float>(2, hid, 3, 3));
      smm.hourglass.out_b = Parameter<float>(Tensor<float>(1, 2, 1, 1));
      smm.fusion = make_conv(c, c * cfg.num_layers, 1, 1, 0);
    }
    m.tail_expand = make_conv(c * cfg.scale * cfg.scale, c, 3, 1, 1);
    m.tail_out = make_conv(3, c, 3, 1, 1);
    return m;
  }

  /// He-uniform conv weights (tail output scaled by 0.01), zero biases except the head, N(0, 1) channel-mask logits.
  static SmsrModel init(const ModelConfig& cfg, std::uint64_t seed) {
    SmsrModel m = zeros(cfg);
    std::mt19937_64 rng(seed);
    auto he = [&rng](Parameter<float>& w) {
      const Tensor<float>& v = w.value;
      const double fan_in = static_cast<double>(v.c()) * v.h() * v.w();
      std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
      for (auto& x : w.value.values()) x = static_cast<float>(dist(rng));
    };
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& [name, p] : m.named_parameters()) {
      if (name.ends_with(".logits")) {
        for (auto& x : p->value.values()) x = static_cast<float>(normal(rng));
      } else if (name.ends_with(".weight")) {
        he(*p);
      }
    }
    // head sees centred input (I - 0.5); an all-positive image otherwise gives same-signed
    // features and can leave the hourglass relus dead everywhere
    const Tensor<float>& hw = m.head.weight.value;
    const int per_out = hw.c() * hw.h() * hw.w();
    for (int o = 0; o < hw.n(); ++o) {
      double s = 0.0;
      for (int i = 0; i < per_out; ++i) s += hw[static_cast<std::size_t>(o) * per_out + i];
      m.head.bias.value[o] = static_cast<float>(-0.5 * s);
    }
    // start close to the bicubic skip
    for (auto& x : m.tail_out.weight.value.values()) x *= 0.01f;
    return m;
  }

  /// Every trainable tensor with a stable name, in serialization order.
  std::vector<std::pair<std::string, Parameter<float>*>> named_parameters() {
    std::vector<std::pair<std::string, Parameter<float>*>> out;
    auto conv = [&out](const std::string& prefix, ConvParam& cp) {
      out.emplace_back(prefix + ".weight", &cp.weight);
      out.emplace_back(prefix + ".bias", &cp.bias);
    };
    conv("head", head);
    for (std::size_t k = 0; k < smms.size(); ++k) {
      const std::string p = "smm" + std::to_string(k);
      SmmWeights& s = smms[k];
      for (std::size_t l = 0; l < s.convs.size(); ++l) conv(p + ".conv" + std::to_string(l), s.convs[l]);
      for (std::size_t l = 0; l < s.mask_logits.size(); ++l)
        out.emplace_back(p + ".mask" + std::to_string(l) + ".logits", &s.mask_logits[l]);
      out.emplace_back(p + ".hourglass.down.weight", &s.hourglass.down_w);
      out.emplace_back(p + ".hourglass.down.bias", &s.hourglass.down_b);
      out.emplace_back(p + ".hourglass.mid.weight", &s.hourglass.mid_w);
      out.emplace_back(p + ".hourglass.mid.bias", &s.hourglass.mid_b);
      out.emplace_back(p + ".hourglass.out.weight", &s.hourglass.out_w);
      out.emplace_back(p + ".hourglass.out.bias", &s.hourglass.out_b);
      conv(p + ".fusion", s.fusion);
    }
    conv("tail.expand", tail_expand);
    conv("tail.out", tail_out);
    return out;
  }

  std::vector<std::pair<std::string, const Parameter<float>*>> named_parameters() const {
    auto mut = const_cast<SmsrModel*>(this)->named_parameters();
    std::vector<std::pair<std::string, const Parameter<float>*>> out;
    for (auto& [n, p] : mut) out.emplace_back(n, p);
    return out;
  }

  std::vector<Parameter<float>*> parameters() {
    std::vector<Parameter<float>*> out;
    for (auto& [n, p] : named_parameters()) out.push_back(p);
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [n, p] : named_parameters()) total += p->value.size();
    return total;
  }

  /// Binary channel mask of layer l in module k (argmax of its logits).
  [[nodiscard]] ChannelMask<float> binary_channel_mask(int k, int l) const {
    return {argmax_mask(smms.at(k).mask_logits.at(l).value, 0).reshaped(Shape{1, config.channels, 1, 1}),
            MaskMode::Binary};
  }

  static void validate(const ModelConfig& cfg) {
    if (cfg.scale < 1 || cfg.scale > 8 || cfg.num_modules < 1 || cfg.num_layers < 1 || cfg.channels < 1) {
      throw std::invalid_argument("invalid model configuration");
    }
  }

 private:
  static ConvParam make_conv(int cout, int cin, int k, int stride, int pad) {
    ConvParam cp;
    cp.weight = Parameter<float>(Tensor<float>(cout, cin, k, k));
    cp.bias = Parameter<float>(Tensor<float>(1, cout, 1, 1));
    cp.stride = stride;
    cp.pad = pad;
    return cp;
  }
};

namespace detail {

inline Tensor<float> global_skip(const Tensor<float>& lr, int scale) { return bicubic_resize(lr, Ratio{scale, 1}); }

/// Heuristic masks are computed on the 0-255 luminance of the [0, 1] input.
inline Tensor<float> heuristic_mask_for(const Tensor<float>& lr, double alpha) {
  Tensor<float> img(lr.shape());
  for (std::size_t i = 0; i < lr.size(); ++i) img[i] = lr[i] * 255.0f;
  return heuristic_spatial_mask(img, alpha).values;
}

}  // namespace detail

struct TrainForwardOptions {
  double tau = 1.0;
  MaskMode mode = MaskMode::Softened;
  GumbelSampler* noise = nullptr;  // null: no Gumbel noise
  /// Forces every mask to 1, turning the network into its plain dense counterpart.
  bool force_dense = false;
};

inline TrainForwardOptions options_at_epoch(double epoch, GumbelSampler* noise, double temp_period = 500.0) {
  if (epoch < 0) throw std::invalid_argument("forward_train: epoch must be non-negative");
  return {temperature_schedule(epoch, temp_period), MaskMode::Softened, noise, false};
}

struct TrainForwardResult {
  Var<float> sr;
  std::vector<Var<float>> spatial_masks;               // K entries, (n, 1, h, w)
  std::vector<std::vector<Var<float>>> channel_masks;  // K x L entries, (1, C, 1, 1)
  std::vector<Var<float>> etas;                        // K*L scalars, k-major
};

/// Training-phase forward pass on `tape` for a batch of [0, 1] RGB inputs.
inline TrainForwardResult forward_train(SmsrModel& model, Tape<float>& tape, const Tensor<float>& lr,
                                        const TrainForwardOptions& opt) {
  if (lr.c() != 3) throw ShapeError("forward_train: expected RGB input, got " + to_string(lr.shape()));
  const ModelConfig& cfg = model.config;
  TrainForwardResult res;
  auto input = tape.constant(lr);
  auto hw = tape.param(model.head.weight);
  auto hb = tape.param(model.head.bias);
  Var<float> x = ad::conv2d(input, hw, &hb, 1, 1);

  std::optional<Tensor<float>> heuristic;
  if (model.heuristic_alpha && !opt.force_dense) heuristic = detail::heuristic_mask_for(lr, *model.heuristic_alpha);

  for (int k = 0; k < cfg.num_modules; ++k) {
    SmmWeights& smm = model.smms[k];
    const Shape fs = x.shape();
    Var<float> m_spa;
    if (opt.force_dense) {
      m_spa = tape.constant(Tensor<float>(fs.n, 1, fs.h, fs.w, 1.0f));
    } else if (heuristic) {
      m_spa = tape.constant(*heuristic);
    } else {
      Tensor<float> noise;
      if (opt.noise && opt.mode == MaskMode::Softened) noise = opt.noise->sample<float>(Shape{fs.n, 2, fs.h, fs.w});
      m_spa = ad::spatial_mask(x, smm.hourglass, noise.empty() ? nullptr : &noise, opt.tau, opt.mode);
    }
    res.spatial_masks.push_back(m_spa);
    res.channel_masks.emplace_back();

    std::vector<Var<float>> outputs;
    Var<float> feature = x;
    Var<float> prev_mask;
    for (int l = 0; l < cfg.num_layers; ++l) {
      Var<float> m_ch;
      if (opt.force_dense) {
        m_ch = tape.constant(Tensor<float>(1, cfg.channels, 1, 1, 1.0f));
      } else {
        auto logits = tape.param(smm.mask_logits[l]);
        Tensor<float> noise;
        if (opt.noise && opt.mode == MaskMode::Softened) noise = opt.noise->sample<float>(Shape{2, cfg.channels, 1, 1});
        m_ch = ad::channel_mask(logits, noise.empty() ? nullptr : &noise, opt.tau, opt.mode);
      }
      res.channel_masks.back().push_back(m_ch);
      res.etas.push_back(ad::sparsity_term(m_ch, m_spa));
      auto w = tape.param(smm.convs[l].weight);
      auto b = tape.param(smm.convs[l].bias);
      // The module input is treated as fully dense.
      feature = ad::relu(ad::masked_conv_train(feature, w, &b, l == 0 ? nullptr : &prev_mask, m_ch, m_spa));
      outputs.push_back(feature);
      prev_mask = m_ch;
    }
    auto fw = tape.param(smm.fusion.weight);
    auto fb = tape.param(smm.fusion.bias);
    auto fused = ad::conv2d(ad::concat<float>(std::span<const Var<float>>(outputs)), fw, &fb, 1, 0);
    x = ad::add(fused, x);
  }

  auto ew = tape.param(model.tail_expand.weight);
  auto eb = tape.param(model.tail_expand.bias);
  auto up = ad::pixel_shuffle(ad::conv2d(x, ew, &eb, 1, 1), cfg.scale);
  auto ow = tape.param(model.tail_out.weight);
  auto ob = tape.param(model.tail_out.bias);
  auto out = ad::conv2d(up, ow, &ob, 1, 1);
  res.sr = ad::add(out, tape.constant(detail::global_skip(lr, cfg.scale)));
  return res;
}

/// Binary masks and per-layer statistics recorded during one inference.
struct ModuleTrace {
  Tensor<float> spatial_mask;                     // (n, 1, h, w) binary
  std::vector<std::size_t> important;             // N_imp per sample
  std::vector<ChannelMask<float>> channel_masks;  // L binary masks
  std::vector<double> etas;                       // per layer, batch mean
  std::vector<Tensor<float>> features;            // post-relu layer outputs, if captured
};

struct InferenceTrace {
  std::vector<ModuleTrace> modules;
  bool capture_features = false;
};

/// Inference-phase executor: channel masks are binarised and kernels split once; spatial masks
/// are predicted per image and compiled to index lists shared by the module's layers.
class SparseEngine {
 public:
  explicit SparseEngine(const SmsrModel& model) : model_(&model) {
    const ModelConfig& cfg = model.config;
    splits_.resize(cfg.num_modules);
    masks_.resize(cfg.num_modules);
    for (int k = 0; k < cfg.num_modules; ++k) {
      ChannelMask<float> prev = ChannelMask<float>::dense(cfg.channels);
      for (int l = 0; l < cfg.num_layers; ++l) {
        ChannelMask<float> cur = model.binary_channel_mask(k, l);
        splits_[k].push_back(split_kernel(model.smms[k].convs[l].spec(), prev, cur));
        masks_[k].push_back(cur);
        prev = cur;
      }
    }
  }

  [[nodiscard]] const KernelSplit<float>& split(int k, int l) const { return splits_.at(k).at(l); }
  [[nodiscard]] const ChannelMask<float>& channel_mask(int k, int l) const { return masks_.at(k).at(l); }

  /// Spatial mask logits (n, 2, h, w) from the hourglass, dense execution.
  Tensor<float> spatial_logits(int k, const Tensor<float>& feature, MacCounter* counter = nullptr) const {
    const HourglassParams<float>& hg = model_->smms[k].hourglass;
    Tensor<float> x = relu(conv2d_dense(feature, hg.down_w.value, &hg.down_b.value, 2, 1, counter));
    x = relu(conv2d_dense(x, hg.mid_w.value, &hg.mid_b.value, 1, 1, counter));
    Tape<float> tape;
    x = ad::upsample_nearest(tape.constant(x), 2, feature.h(), feature.w()).value();
    return conv2d_dense(x, hg.out_w.value, &hg.out_b.value, 1, 1, counter);
  }

  /// Sparse inference; output clamped to [0, 1].
  Tensor<float> run(const Tensor<float>& lr, InferenceTrace* trace = nullptr, MacCounter* counter = nullptr) const {
    return run_impl(lr, trace, counter, false);
  }

  /// Same weights with every convolution executed densely and no mask generation.
  Tensor<float> run_dense(const Tensor<float>& lr, MacCounter* counter = nullptr) const {
    return run_impl(lr, nullptr, counter, true);
  }

  /// Post-relu layer outputs of the dense pass, one ModuleTrace per module (features only).
  InferenceTrace dense_features(const Tensor<float>& lr) const {
    InferenceTrace trace;
    trace.capture_features = true;
    run_impl(lr, &trace, nullptr, true);
    return trace;
  }

 private:
  Tensor<float> run_impl(const Tensor<float>& lr, InferenceTrace* trace, MacCounter* counter, bool dense) const {
    if (lr.c() != 3) throw ShapeError("forward_infer: expected RGB input, got " + to_string(lr.shape()));
    const SmsrModel& m = *model_;
    const ModelConfig& cfg = m.config;
    Tensor<float> x = conv2d_dense(lr, m.head.spec(), counter);
    std::optional<Tensor<float>> heuristic;
    if (m.heuristic_alpha && !dense) heuristic = detail::heuristic_mask_for(lr, *m.heuristic_alpha);
    if (trace) trace->modules.clear();

    for (int k = 0; k < cfg.num_modules; ++k) {
      const SmmWeights& smm = m.smms[k];
      std::vector<Tensor<float>> outputs;
      Tensor<float> feature = x;
      if (dense) {
        for (int l = 0; l < cfg.num_layers; ++l) {
          feature = relu(conv2d_dense(feature, smm.convs[l].spec(), counter));
          outputs.push_back(feature);
        }
        if (trace && trace->capture_features) trace->modules.push_back(ModuleTrace{{}, {}, {}, {}, outputs});
      } else {
        Tensor<float> spa = heuristic ? *heuristic : argmax_mask(spatial_logits(k, x, counter), 1);
        std::vector<ImportantIndexList> idx;
        for (int n = 0; n < x.n(); ++n) idx.push_back(ImportantIndexList::compile(spa, n));
        ModuleTrace mt;
        for (int l = 0; l < cfg.num_layers; ++l) {
          feature = relu(sparse_mask_conv_infer<float>(feature, splits_[k][l], idx, counter));
          outputs.push_back(feature);
          if (trace) {
            mt.etas.push_back(sparsity_term(masks_[k][l], SpatialMask<float>{spa, MaskMode::Binary}));
            mt.channel_masks.push_back(masks_[k][l]);
            if (trace->capture_features) mt.features.push_back(feature);
          }
        }
        if (trace) {
          for (const auto& i : idx) mt.important.push_back(i.count());
          mt.spatial_mask = std::move(spa);
          trace->modules.push_back(std::move(mt));
        }
      }
      Tensor<float> fused = conv2d_dense(concat_channels<float>(outputs), smm.fusion.spec(), counter);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += fused[i];
    }
    Tensor<float> up = pixel_shuffle(conv2d_dense(x, m.tail_expand.spec(), counter), cfg.scale);
    Tensor<float> out = conv2d_dense(up, m.tail_out.spec(), counter);
    const Tensor<float> skip = detail::global_skip(lr, cfg.scale);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i] + skip[i], 0.0f, 1.0f);
    return out;
  }

  const SmsrModel* model_;
  std::vector<std::vector<KernelSplit<float>>> splits_;
  std::vector<std::vector<ChannelMask<float>>> masks_;
};

/// Inference-phase forward pass: argmax masks, split kernels, sparse execution.
inline Tensor<float> forward_infer(const SmsrModel& model, const Tensor<float>& lr, InferenceTrace* trace = nullptr,
                                   MacCounter* counter = nullptr) {
  return SparseEngine(model).run(lr, trace, counter);
}

}  // namespace smsr

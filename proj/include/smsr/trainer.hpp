#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "smsr/autodiff.hpp"
#include "smsr/image_io.hpp"
#include "smsr/image_ops.hpp"
#include "smsr/masks.hpp"
#include "smsr/metrics.hpp"
#include "smsr/model.hpp"
#include "smsr/profiler.hpp"
#include "smsr/serialize.hpp"

namespace smsr {

/// Training allocates and frees the same large buffers every step; stop glibc from handing
/// them back to the kernel each time (page faults otherwise dominate small runs).
inline void keep_freed_memory() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  ModelConfig model;
  double lambda0 = 0.1;
  // images are held in [0, 1]; the L1 term is measured in 8-bit levels, which sets its weight
  // against lambda * L_reg
  double pixel_range = 255.0;
  int batch_size = 16;
  int lr_patch = 96;
  double learning_rate = 2e-4;
  int halve_every = 200;  // epochs
  int epochs = 1000;
  double warmup_epochs = 50.0;
  double temp_period = 500.0;
  /// Batches per epoch. 63 batches of 16 is ~1000 samples.
  int iterations_per_epoch = 63;
  std::uint64_t seed = 1;
  bool augment = true;
  std::optional<double> heuristic_alpha;
  int checkpoint_every = 0;  // epochs; 0 disables
  std::string checkpoint_path;

  /// Full-size protocol.
  static TrainConfig full(int scale = 2) {
    TrainConfig c;
    c.model = {scale, 5, 4, 64};
    return c;
  }

  /// Small configuration that trains in minutes on one core. Schedules keep the same shape
  /// with every epoch constant scaled by epochs / 1000.
  static TrainConfig desk(int scale = 2) {
    TrainConfig c;
    c.model = {scale, 3, 2, 16};
    c.lr_patch = 32;
    c.epochs = 200;
    c.warmup_epochs = 10.0;
    c.temp_period = 100.0;
    c.halve_every = 40;
    // many small batches: at desk scale the step count, not the batch, limits learning
    c.batch_size = 4;
    c.iterations_per_epoch = 16;
    c.learning_rate = 2e-3;
    return c;
  }

  void validate() const {
    ModelConfig m = model;
    SmsrModel::validate(m);
    if (batch_size < 1 || lr_patch < 1 || epochs < 0 || halve_every < 1 || iterations_per_epoch < 1 ||
        !(warmup_epochs > 0) || !(temp_period > 0) || !(learning_rate > 0) || lambda0 < 0 || !(pixel_range > 0)) {
      throw std::invalid_argument("invalid training configuration");
    }
  }
};

/// HR/LR pairs held in memory; LR images are synthesised with bicubic downscaling.
struct Dataset {
  std::vector<std::string> names;
  std::vector<Tensor<float>> hr;  // (1, 3, H, W) in [0, 1], H and W multiples of scale
  std::vector<Tensor<float>> lr;  // (1, 3, H/scale, W/scale) in [0, 1]
  int scale = 2;

  [[nodiscard]] std::size_t size() const { return hr.size(); }

  /// Adds an HR image in [0, 255]. Images smaller than `min_lr` LR pixels (after cropping to a
  /// multiple of the scale) are skipped with a warning; returns whether it was kept.
  bool add(const std::string& name, const Tensor<float>& hr255, int min_lr = 1) {
    const int h = hr255.h() / scale * scale;
    const int w = hr255.w() / scale * scale;
    if (h / scale < min_lr || w / scale < min_lr) {
      std::cerr << "warning: skipping " << name << " (" << hr255.h() << "x" << hr255.w() << "), smaller than "
                << min_lr * scale << " pixels\n";
      return false;
    }
    Tensor<float> img(1, 3, h, w);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img(0, c, y, x) = hr255(0, c, y, x) / 255.0f;
    lr.push_back(bicubic_resize(img, Ratio{1, scale}));
    hr.push_back(std::move(img));
    names.push_back(name);
    return true;
  }
};

/// PNG files of a directory in sorted order.
inline std::vector<std::string> list_pngs(const std::string& dir) {
  std::vector<std::string> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline Dataset load_dataset(std::span<const std::string> files, int scale, int min_lr = 1) {
  Dataset d;
  d.scale = scale;
  for (const auto& f : files) d.add(std::filesystem::path(f).filename().string(), read_png(f, 3), min_lr);
  return d;
}

struct Batch {
  Tensor<float> lr;  // (B, 3, p, p)
  Tensor<float> hr;  // (B, 3, p*s, p*s)
};

/// Aligned crop at LR position (y, x) with dihedral transform `transform` applied to both.
inline std::pair<Tensor<float>, Tensor<float>> crop_pair(const Tensor<float>& lr, const Tensor<float>& hr, int y, int x,
                                                         int patch, int scale, int transform) {
  Tensor<float> lp(1, 3, patch, patch);
  Tensor<float> hp(1, 3, patch * scale, patch * scale);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < patch; ++i)
      for (int j = 0; j < patch; ++j) lp(0, c, i, j) = lr(0, c, y + i, x + j);
    for (int i = 0; i < patch * scale; ++i)
      for (int j = 0; j < patch * scale; ++j) hp(0, c, i, j) = hr(0, c, y * scale + i, x * scale + j);
  }
  return {dihedral(lp, transform), dihedral(hp, transform)};
}

/// Random aligned crops, each with one of the 8 dihedral transforms when augmenting.
inline Batch sample_batch(const Dataset& data, const TrainConfig& cfg, std::mt19937_64& rng) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.lr[i].h() >= cfg.lr_patch && data.lr[i].w() >= cfg.lr_patch) usable.push_back(i);
  if (usable.empty()) throw std::runtime_error("sample_batch: no image is large enough for the patch size");
  const int p = cfg.lr_patch;
  const int s = data.scale;
  Batch b{Tensor<float>(cfg.batch_size, 3, p, p), Tensor<float>(cfg.batch_size, 3, p * s, p * s)};
  for (int n = 0; n < cfg.batch_size; ++n) {
    const std::size_t img = usable[std::uniform_int_distribution<std::size_t>(0, usable.size() - 1)(rng)];
    const int y = std::uniform_int_distribution<int>(0, data.lr[img].h() - p)(rng);
    const int x = std::uniform_int_distribution<int>(0, data.lr[img].w() - p)(rng);
    const int t = cfg.augment ? std::uniform_int_distribution<int>(0, 7)(rng) : 0;
    auto [lp, hp] = crop_pair(data.lr[img], data.hr[img], y, x, p, s, t);
    std::copy(lp.values().begin(), lp.values().end(), b.lr.plane(n, 0));
    std::copy(hp.values().begin(), hp.values().end(), b.hr.plane(n, 0));
  }
  return b;
}

/// L1 reconstruction loss (times pixel_range) plus lambda times the mean sparsity term.
struct LossTerms {
  Var<float> total;
  Var<float> l1;
  Var<float> reg;
};

template <class T>
Var<T> l1_loss(const Var<T>& sr, const Var<T>& hr) {
  return ad::mean(ad::abs(ad::sub(sr, hr)));
}

inline LossTerms total_loss(const Var<float>& sr, const Var<float>& hr, std::span<const Var<float>> etas, double lambda,
                            double pixel_range = 1.0) {
  LossTerms t;
  t.l1 = l1_loss(sr, hr);
  if (pixel_range != 1.0) t.l1 = ad::affine(t.l1, static_cast<float>(pixel_range), 0.0f);
  t.reg = ad::reg_loss(etas);
  t.total = ad::add(t.l1, ad::affine(t.reg, static_cast<float>(lambda), 0.0f));
  return t;
}

struct EpochLog {
  int epoch = 0;
  double l_sr = 0.0;
  double l_reg = 0.0;
  double tau = 0.0;
  double lambda = 0.0;
  double mean_sparsity = 0.0;    // 1 - mean eta of the softened masks
  double mask_saturation = 0.0;  // mean |m - 0.5| of the softened masks
  double wall_seconds = 0.0;

  /// Every field except the wall clock, for reproducibility checks.
  [[nodiscard]] bool same_values(const EpochLog& o) const {
    return epoch == o.epoch && l_sr == o.l_sr && l_reg == o.l_reg && tau == o.tau && lambda == o.lambda &&
           mean_sparsity == o.mean_sparsity && mask_saturation == o.mask_saturation;
  }
};

inline std::string log_csv_header() { return "epoch,l_sr,l_reg,tau,lambda,mean_sparsity,mask_saturation,wall_seconds"; }

inline std::string log_csv_row(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f", e.epoch, e.l_sr, e.l_reg, e.tau, e.lambda,
                e.mean_sparsity, e.mask_saturation, e.wall_seconds);
  return buf;
}

/// Independent generator per epoch, so resuming from a checkpoint replays the same stream.
inline std::mt19937_64 epoch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  return std::mt19937_64(seq);
}

inline double learning_rate_at(const TrainConfig& cfg, int epoch) {
  return cfg.learning_rate * std::pow(0.5, epoch / cfg.halve_every);
}

struct TrainResult {
  SmsrModel model;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&, const SmsrModel&)>;

/// Seeded training loop. Pass a checkpoint to resume; its epoch counter decides where to start.
inline TrainResult train(const Dataset& data, const TrainConfig& cfg, std::optional<Checkpoint> resume = std::nullopt,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.scale != cfg.model.scale) throw std::invalid_argument("train: dataset scale differs from model scale");
  TrainResult res{resume ? std::move(resume->model) : SmsrModel::init(cfg.model, cfg.seed), {}};
  if (!resume) res.model.heuristic_alpha = cfg.heuristic_alpha;
  const int start = resume ? resume->next_epoch : 0;
  std::vector<Parameter<float>*> params = res.model.parameters();
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = start; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng = epoch_rng(cfg.seed, epoch);
    GumbelSampler noise(rng());
    EpochLog log;
    log.epoch = epoch;
    log.tau = temperature_schedule(epoch, cfg.temp_period);
    log.lambda = lambda_schedule(epoch, cfg.lambda0, cfg.warmup_epochs);
    const AdamConfig adam{learning_rate_at(cfg, epoch), 0.9, 0.999, 1e-8};
    double saturation_sum = 0.0;
    std::size_t saturation_count = 0;

    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      const Batch batch = sample_batch(data, cfg, rng);
      Tape<float> tape;
      TrainForwardOptions opt{log.tau, MaskMode::Softened, &noise, false};
      TrainForwardResult fwd = forward_train(res.model, tape, batch.lr, opt);
      LossTerms loss = total_loss(fwd.sr, tape.constant(batch.hr), fwd.etas, log.lambda, cfg.pixel_range);
      const double total = loss.total.value()[0];
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", iteration " + std::to_string(it));
      }
      tape.backward(loss.total);
      adam_step<float>(params, adam);
      log.l_sr += loss.l1.value()[0];
      log.l_reg += loss.reg.value()[0];
      auto saturation = [&](const Var<float>& m) {
        for (float v : m.value().values()) saturation_sum += std::abs(v - 0.5);
        saturation_count += m.value().size();
      };
      if (!res.model.heuristic_alpha)
        for (const auto& m : fwd.spatial_masks) saturation(m);
      for (const auto& layer : fwd.channel_masks)
        for (const auto& m : layer) saturation(m);
    }
    log.l_sr /= cfg.iterations_per_epoch;
    log.l_reg /= cfg.iterations_per_epoch;
    log.mean_sparsity = 1.0 - log.l_reg;
    log.mask_saturation = saturation_count ? saturation_sum / static_cast<double>(saturation_count) : 0.0;
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(log);
    if (on_epoch) on_epoch(log, res.model);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && (epoch + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(res.model, epoch + 1, cfg.checkpoint_path);
    }
  }
  return res;
}

/// Mean PSNR/SSIM of 8-bit SR outputs against HR, with the scale-pixel border crop.
struct EvalResult {
  std::vector<double> psnr;
  std::vector<double> ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

inline Tensor<float> to_u8_range(const Tensor<float>& unit) {
  Tensor<float> out(unit.shape());
  for (std::size_t i = 0; i < unit.size(); ++i) out[i] = std::clamp(std::round(unit[i] * 255.0f), 0.0f, 255.0f);
  return out;
}

/// `upscale` maps a [0, 1] LR image to a [0, 1] SR image.
template <class F>
EvalResult evaluate(const Dataset& data, F&& upscale) {
  EvalResult r;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor<float> sr = to_u8_range(upscale(data.lr[i]));
    const Tensor<float> hr = to_u8_range(data.hr[i]);
    r.psnr.push_back(psnr(sr, hr, data.scale));
    r.ssim.push_back(ssim(sr, hr, data.scale));
  }
  for (std::size_t i = 0; i < r.psnr.size(); ++i) {
    r.mean_psnr += r.psnr[i];
    r.mean_ssim += r.ssim[i];
  }
  if (!r.psnr.empty()) {
    r.mean_psnr /= static_cast<double>(r.psnr.size());
    r.mean_ssim /= static_cast<double>(r.ssim.size());
  }
  return r;
}

inline EvalResult evaluate_model(const Dataset& data, const SmsrModel& model) {
  const SparseEngine engine(model);
  return evaluate(data, [&](const Tensor<float>& lr) { return engine.run(lr); });
}

inline EvalResult evaluate_bicubic(const Dataset& data) {
  return evaluate(data, [&](const Tensor<float>& lr) {
    Tensor<float> up = bicubic_resize(lr, Ratio{data.scale, 1});
    for (auto& v : up.values()) v = std::clamp(v, 0.0f, 1.0f);
    return up;
  });
}

/// Mean inference-time aggregate sparsity over a dataset.
inline double mean_sparsity(const Dataset& data, const SmsrModel& model) {
  const SparseEngine engine(model);
  double s = 0.0;
  for (const auto& lr : data.lr) {
    InferenceTrace trace;
    (void)engine.run(lr, &trace);
    s += SparsityReport::from_trace(trace).aggregate;
  }
  return data.size() ? s / static_cast<double>(data.size()) : 0.0;
}

/// Softened-mask statistics at temperature `tau` over a dataset, with Gumbel noise from
/// `noise` (or none when null): mean |m - 0.5| and the fraction of entries whose rounding
/// agrees with the noise-free argmax used at inference.
struct MaskAgreement {
  double saturation = 0.0;
  double agreement = 0.0;  // over every mask entry
  double spatial_agreement = 1.0;
  double channel_agreement = 1.0;
};

inline MaskAgreement mask_agreement(const Dataset& data, SmsrModel& model, double tau, GumbelSampler* noise) {
  double sat = 0.0;
  double agree[2] = {0.0, 0.0};  // spatial, channel
  std::size_t count[2] = {0, 0};
  auto accumulate = [&](const Tensor<float>& soft, const Tensor<float>& hard, int kind) {
    for (std::size_t i = 0; i < soft.size(); ++i) {
      sat += std::abs(soft[i] - 0.5);
      agree[kind] += ((soft[i] >= 0.5f) == (hard[i] == 1.0f)) ? 1.0 : 0.0;
    }
    count[kind] += soft.size();
  };
  for (const auto& lr : data.lr) {
    Tape<float> soft_tape;
    Tape<float> hard_tape;
    auto soft = forward_train(model, soft_tape, lr, {tau, MaskMode::Softened, noise, false});
    auto hard = forward_train(model, hard_tape, lr, {tau, MaskMode::Binary, nullptr, false});
    if (!model.heuristic_alpha)
      for (std::size_t k = 0; k < soft.spatial_masks.size(); ++k)
        accumulate(soft.spatial_masks[k].value(), hard.spatial_masks[k].value(), 0);
    for (std::size_t k = 0; k < soft.channel_masks.size(); ++k)
      for (std::size_t l = 0; l < soft.channel_masks[k].size(); ++l)
        accumulate(soft.channel_masks[k][l].value(), hard.channel_masks[k][l].value(), 1);
  }
  MaskAgreement out;
  const std::size_t total = count[0] + count[1];
  if (total == 0) return out;
  out.saturation = sat / static_cast<double>(total);
  out.agreement = (agree[0] + agree[1]) / static_cast<double>(total);
  if (count[0]) out.spatial_agreement = agree[0] / static_cast<double>(count[0]);
  if (count[1]) out.channel_agreement = agree[1] / static_cast<double>(count[1]);
  return out;
}

}  // namespace smsr

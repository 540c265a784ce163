// smsr: train, run and inspect sparse-mask super-resolution models.
//
// exit codes: 0 ok, 1 usage, 2 data (missing/corrupt files, bad images), 3 numeric failure

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "smsr/smsr.hpp"

namespace fs = std::filesystem;
using namespace smsr;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// every output goes through a sibling temp file
void write_text(const std::string& path, const std::string& text) {
  detail::write_file(path, std::vector<char>(text.begin(), text.end()));
}

void write_png_atomic(const std::string& path, const Tensor<float>& img) {
  const std::string part = path + ".part";
  write_png(part, img);
  fs::rename(part, path);
}

Tensor<float> scaled(const Tensor<float>& img, float f) {
  Tensor<float> out = img;
  for (auto& v : out.values()) v *= f;
  return out;
}

SmsrModel open_model(const std::string& path) {
  if (!fs::is_regular_file(path)) throw DataError("no model file at " + path);
  return load_model(path);
}

Tensor<float> open_image(const std::string& path) {
  if (!fs::is_regular_file(path)) throw DataError("no image at " + path);
  return read_png(path, 3);
}

std::vector<std::string> pngs_in(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  auto files = list_pngs(dir);
  if (files.empty()) throw DataError("no PNG images in " + dir);
  return files;
}

// directory outputs are built under a temp name and moved into place at the end
struct StagedDir {
  fs::path target, stage;
  explicit StagedDir(const std::string& dir) : target(dir), stage(dir + ".part") {
    if (fs::exists(target) && !fs::is_directory(target)) throw UsageError(dir + " exists and is not a directory");
    fs::remove_all(stage);
    fs::create_directories(stage);
  }
  ~StagedDir() {
    std::error_code ec;
    fs::remove_all(stage, ec);
  }
  // merges into an existing target, overwriting same-named files
  void commit() {
    fs::create_directories(target);
    for (const auto& e : fs::recursive_directory_iterator(stage)) {
      const fs::path dest = target / fs::relative(e.path(), stage);
      if (e.is_directory())
        fs::create_directories(dest);
      else
        fs::rename(e.path(), dest);
    }
  }
};

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// -- train ----------------------------------------------------------------------------------

struct TrainArgs {
  std::string data, out, log, preset = "desk", resume, checkpoint, val;
  int scale = 2, epochs = -1, checkpoint_every = 0, progress = 10;
  double lambda0 = 0.1;
  std::optional<double> heuristic;
  std::uint64_t seed = 1;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.preset == "desk" ? TrainConfig::desk(a.scale) : TrainConfig::full(a.scale);
  cfg.lambda0 = a.lambda0;
  cfg.seed = a.seed;
  cfg.heuristic_alpha = a.heuristic;
  if (a.epochs >= 0) cfg.epochs = a.epochs;
  if (!a.checkpoint.empty()) {
    cfg.checkpoint_path = a.checkpoint;
    cfg.checkpoint_every = a.checkpoint_every > 0 ? a.checkpoint_every : 10;
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto files = pngs_in(a.data);
  const Dataset data = load_dataset(files, a.scale, cfg.lr_patch);
  if (data.size() == 0) throw DataError("no image in " + a.data + " is large enough for " +
                                        std::to_string(cfg.lr_patch) + "x" + std::to_string(cfg.lr_patch) +
                                        " LR patches");
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    if (!fs::is_regular_file(a.resume)) throw DataError("no checkpoint at " + a.resume);
    resume = load_checkpoint(a.resume);
    if (resume->model.config.scale != a.scale) throw UsageError("checkpoint scale differs from --scale");
  }
  std::cout << "training on " << data.size() << " images, " << cfg.epochs << " epochs, lambda0 " << cfg.lambda0
            << "\n";
  const auto res = train(data, cfg, std::move(resume), [&](const EpochLog& e, const SmsrModel&) {
    if (a.progress > 0 && (e.epoch % a.progress == 0 || e.epoch + 1 == cfg.epochs))
      std::cout << "epoch " << e.epoch << "  l1 " << num(e.l_sr) << "  sparsity " << num(e.mean_sparsity) << "  tau "
                << num(e.tau) << "  " << num(e.wall_seconds) << "s\n";
  });
  std::string csv = log_csv_header() + "\n";
  for (const auto& e : res.log) csv += log_csv_row(e) + "\n";
  save_model(res.model, a.out);
  write_text(a.log.empty() ? a.out + ".csv" : a.log, csv);
  if (!a.val.empty()) {
    const Dataset val = load_dataset(pngs_in(a.val), a.scale);
    const auto m = evaluate_model(val, res.model);
    const auto b = evaluate_bicubic(val);
    std::cout << "validation PSNR " << num(m.mean_psnr) << " dB (bicubic " << num(b.mean_psnr) << "), sparsity "
              << num(mean_sparsity(val, res.model)) << "\n";
  }
  return 0;
}

// -- sr -------------------------------------------------------------------------------------

int run_sr(const std::string& model_path, const std::string& in, const std::string& out, bool report) {
  const SmsrModel model = open_model(model_path);
  const Tensor<float> lr = scaled(open_image(in), 1.0f / 255.0f);
  InferenceTrace trace;
  const Tensor<float> sr = forward_infer(model, lr, &trace);
  write_png_atomic(out, to_u8_range(sr));
  if (report) {
    const auto r = SparsityReport::from_trace(trace);
    for (std::size_t k = 0; k < r.module_sparsity.size(); ++k)
      std::cout << "smm " << k << " sparsity " << num(r.module_sparsity[k]) << "\n";
    std::cout << "aggregate sparsity " << num(r.aggregate) << "\n";
  }
  return 0;
}

// -- eval -----------------------------------------------------------------------------------

int run_eval(const std::string& model_arg, const std::string& hr_dir, int scale, const std::string& csv_path) {
  std::optional<SmsrModel> model;
  if (model_arg != "bicubic" && model_arg != "identity") {
    model = open_model(model_arg);
    if (scale == 0) scale = model->config.scale;
    if (model->config.scale != scale)
      throw UsageError("--scale " + std::to_string(scale) + " but the model upscales by " +
                       std::to_string(model->config.scale));
  }
  if (scale < 2 || scale > 4) throw UsageError("--scale must be 2, 3 or 4");
  const Dataset data = load_dataset(pngs_in(hr_dir), scale);
  if (data.size() == 0) throw DataError("no usable images in " + hr_dir);
  EvalResult r;
  if (model)
    r = evaluate_model(data, *model);
  else if (model_arg == "bicubic")
    r = evaluate_bicubic(data);
  else {
    std::size_t i = 0;
    r = evaluate(data, [&](const Tensor<float>&) { return data.hr[i++]; });
  }
  std::string csv = "image,psnr,ssim\n";
  for (std::size_t i = 0; i < data.size(); ++i) csv += data.names[i] + "," + num(r.psnr[i]) + "," + num(r.ssim[i]) + "\n";
  csv += "mean," + num(r.mean_psnr) + "," + num(r.mean_ssim) + "\n";
  if (csv_path.empty())
    std::cout << csv;
  else {
    write_text(csv_path, csv);
    std::cout << "mean PSNR " << num(r.mean_psnr) << " dB, SSIM " << num(r.mean_ssim) << " over " << data.size()
              << " images\n";
  }
  return 0;
}

// -- make-dataset ---------------------------------------------------------------------------

int run_make_dataset(const std::string& hr_dir, int synthetic, int size, int scale, std::uint64_t seed,
                     const std::string& out) {
  if (scale < 2 || scale > 4) throw UsageError("--scale must be 2, 3 or 4");
  if (hr_dir.empty() == (synthetic <= 0)) throw UsageError("give exactly one of --hr or --synthetic");
  if (synthetic > 0 && size < scale) throw UsageError("--size must be at least the scale");
  std::vector<std::pair<std::string, Tensor<float>>> images;
  if (synthetic > 0) {
    for (int i = 0; i < synthetic; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "synth_%03d.png", i);
      images.emplace_back(name, synthetic_image(size, size, seed + static_cast<std::uint64_t>(i)));
    }
  } else {
    for (const auto& f : pngs_in(hr_dir)) images.emplace_back(fs::path(f).filename().string(), read_png(f, 3));
  }
  Dataset d;
  d.scale = scale;
  for (const auto& [name, img] : images) d.add(name, img);
  if (d.size() == 0) throw DataError("every input is smaller than the scale");
  StagedDir dir(out);
  const std::string lr_name = "lr_x" + std::to_string(scale);
  fs::create_directories(dir.stage / "hr");
  fs::create_directories(dir.stage / lr_name);
  for (std::size_t i = 0; i < d.size(); ++i) {
    write_png((dir.stage / "hr" / d.names[i]).string(), to_u8_range(d.hr[i]));
    write_png((dir.stage / lr_name / d.names[i]).string(), to_u8_range(d.lr[i]));
  }
  dir.commit();
  std::cout << "wrote " << d.size() << " HR/LR pairs to " << out << "\n";
  return 0;
}

// -- analyze --------------------------------------------------------------------------------

int run_analyze(const std::string& model_path, const std::string& in, const std::string& out, bool sparse) {
  const SmsrModel model = open_model(model_path);
  const Tensor<float> lr = scaled(open_image(in), 1.0f / 255.0f);
  InferenceTrace trace;
  if (sparse) {
    trace.capture_features = true;
    (void)SparseEngine(model).run(lr, &trace);
  } else {
    trace = SparseEngine(model).dense_features(lr);
  }
  std::string csv = "module,layer,channel,zero_ratio\n";
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < trace.modules.size(); ++k)
    for (std::size_t l = 0; l < trace.modules[k].features.size(); ++l) {
      const auto ratios = feature_sparsity_probe(trace.modules[k].features[l]);
      for (std::size_t c = 0; c < ratios.size(); ++c) {
        csv += std::to_string(k) + "," + std::to_string(l) + "," + std::to_string(c) + "," + num(ratios[c]) + "\n";
        total += ratios[c];
        ++count;
      }
    }
  write_text(out, csv);
  std::cout << "mean zero ratio " << num(count ? total / static_cast<double>(count) : 0.0) << " over " << count
            << " channels (" << (sparse ? "sparse" : "dense") << " execution)\n";
  return 0;
}

// -- bench ----------------------------------------------------------------------------------

struct BenchArgs {
  std::string model, in, out;
  int height = 128, width = 128, channels = 64, runs = 10, warmup = 3;
  double dense_fraction = 0.125, spatial_fraction = 0.15;
  std::uint64_t seed = 1;
};

int run_bench(const BenchArgs& a) {
  if (a.runs < 1 || a.warmup < 0 || a.height < 1 || a.width < 1 || a.channels < 1)
    throw UsageError("sizes and --runs must be positive");
  BenchResult r;
  std::string target;
  if (!a.model.empty()) {
    const SmsrModel model = open_model(a.model);
    Tensor<float> lr = a.in.empty() ? synthetic_image(a.height, a.width, a.seed) : open_image(a.in);
    lr = scaled(lr, 1.0f / 255.0f);
    r = bench_model(model, lr, a.runs, a.warmup);
    target = "model " + std::to_string(lr.h()) + "x" + std::to_string(lr.w());
  } else {
    if (a.dense_fraction < 0 || a.dense_fraction > 1 || a.spatial_fraction < 0 || a.spatial_fraction > 1)
      throw UsageError("fractions must lie in [0, 1]");
    const auto layer = SyntheticLayer::make(a.channels, a.height, a.width, a.dense_fraction, a.spatial_fraction, a.seed);
    r = bench_layer(layer, a.runs, a.warmup);
    target = "layer " + std::to_string(a.channels) + "x" + std::to_string(a.height) + "x" + std::to_string(a.width);
  }
  std::string csv = "target,sparsity,dense_median_ms,dense_min_ms,sparse_median_ms,sparse_min_ms,speedup,runs\n";
  csv += target + "," + num(r.sparsity) + "," + num(r.dense.median_ms) + "," + num(r.dense.min_ms) + "," +
         num(r.sparse.median_ms) + "," + num(r.sparse.min_ms) + "," + num(r.speedup) + "," + std::to_string(a.runs) +
         "\n";
  if (a.out.empty())
    std::cout << csv;
  else {
    write_text(a.out, csv);
    std::cout << target << ": sparsity " << num(r.sparsity) << ", speedup " << num(r.speedup) << "x\n";
  }
  return 0;
}

// -- export-masks ---------------------------------------------------------------------------

// important pixels keep their colour with a green tint, the rest are greyed and darkened
Tensor<float> overlay(const Tensor<float>& lr255, const Tensor<float>& mask) {
  Tensor<float> out(1, 3, lr255.h(), lr255.w());
  for (int y = 0; y < lr255.h(); ++y)
    for (int x = 0; x < lr255.w(); ++x) {
      const float g = (lr255(0, 0, y, x) + lr255(0, 1, y, x) + lr255(0, 2, y, x)) / 3.0f;
      const bool on = mask(0, 0, y, x) > 0.5f;
      for (int c = 0; c < 3; ++c)
        out(0, c, y, x) = on ? 0.5f * lr255(0, c, y, x) + (c == 1 ? 127.5f : 0.0f) : 0.35f * g;
    }
  return out;
}

// one row per layer, one 8x8 cell per channel: white dense, dark sparse
Tensor<float> channel_strip(const std::vector<ChannelMask<float>>& masks) {
  const int cell = 8;
  const int c = masks.empty() ? 0 : masks[0].channels();
  Tensor<float> out(1, 1, static_cast<int>(masks.size()) * cell, c * cell);
  for (std::size_t l = 0; l < masks.size(); ++l)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) {
          const bool edge = x == cell - 1 || y == cell - 1;
          out(0, 0, static_cast<int>(l) * cell + y, ch * cell + x) =
              edge ? 128.0f : (masks[l].values[ch] > 0.5f ? 255.0f : 30.0f);
        }
  return out;
}

int run_export_masks(const std::string& model_path, const std::string& in, const std::string& out) {
  const SmsrModel model = open_model(model_path);
  const Tensor<float> lr255 = open_image(in);
  InferenceTrace trace;
  (void)forward_infer(model, scaled(lr255, 1.0f / 255.0f), &trace);
  StagedDir dir(out);
  for (std::size_t k = 0; k < trace.modules.size(); ++k) {
    const auto& mt = trace.modules[k];
    write_png((dir.stage / ("smm" + std::to_string(k) + "_spatial.png")).string(), overlay(lr255, mt.spatial_mask));
    write_png((dir.stage / ("smm" + std::to_string(k) + "_channels.png")).string(), channel_strip(mt.channel_masks));
  }
  dir.commit();
  std::cout << "wrote masks of " << trace.modules.size() << " modules to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  keep_freed_memory();
  CLI::App app{"Sparse-mask super-resolution: training, inference and analysis"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model on a directory of HR PNGs");
  train_cmd->add_option("--data", ta.data, "directory of HR PNG images")->required();
  train_cmd->add_option("--scale", ta.scale, "upscaling factor")->check(CLI::IsMember({2, 3, 4}));
  train_cmd->add_option("--lambda0", ta.lambda0, "sparsity regularisation weight")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--epochs", ta.epochs, "epochs (default: preset)")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--out", ta.out, "model file to write")->required();
  train_cmd->add_option("--log", ta.log, "CSV training log (default: MODEL.csv)");
  train_cmd->add_option("--preset", ta.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  train_cmd->add_option("--heuristic-mask", ta.heuristic, "fixed spatial masks from gradients above ALPHA")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--seed", ta.seed, "random seed");
  train_cmd->add_option("--checkpoint", ta.checkpoint, "checkpoint file, rewritten during training");
  train_cmd->add_option("--checkpoint-every", ta.checkpoint_every, "epochs between checkpoints (default 10)")
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--resume", ta.resume, "continue from a checkpoint");
  train_cmd->add_option("--val", ta.val, "directory of HR PNGs to evaluate after training");
  train_cmd->add_option("--progress", ta.progress, "print every N epochs (0: quiet)")->check(CLI::NonNegativeNumber);

  std::string sr_model, sr_in, sr_out;
  bool sr_report = false;
  auto* sr_cmd = app.add_subcommand("sr", "upscale one PNG");
  sr_cmd->add_option("--model", sr_model, "model file")->required();
  sr_cmd->add_option("--in", sr_in, "LR PNG")->required();
  sr_cmd->add_option("--out", sr_out, "SR PNG to write")->required();
  sr_cmd->add_flag("--report-sparsity", sr_report, "print per-module sparsity");

  std::string ev_model, ev_hr, ev_csv;
  int ev_scale = 0;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM on a directory of HR PNGs");
  eval_cmd->add_option("--model", ev_model, "model file, or 'bicubic' / 'identity'")->required();
  eval_cmd->add_option("--hr", ev_hr, "directory of HR PNG images")->required();
  eval_cmd->add_option("--scale", ev_scale, "upscaling factor (default: the model's)");
  eval_cmd->add_option("--csv", ev_csv, "write the table here instead of stdout");

  std::string md_hr, md_out;
  int md_synthetic = 0, md_size = 128, md_scale = 2;
  std::uint64_t md_seed = 1;
  auto* md_cmd = app.add_subcommand("make-dataset", "write an HR/LR PNG tree");
  md_cmd->add_option("--hr", md_hr, "directory of HR PNG images");
  md_cmd->add_option("--synthetic", md_synthetic, "generate N procedural images instead")->check(CLI::PositiveNumber);
  md_cmd->add_option("--size", md_size, "side of generated images")->check(CLI::PositiveNumber);
  md_cmd->add_option("--scale", md_scale, "downscaling factor");
  md_cmd->add_option("--seed", md_seed, "first seed of generated images");
  md_cmd->add_option("--out", md_out, "output directory (hr/ and lr_xN/)")->required();

  std::string an_model, an_in, an_out;
  bool an_sparse = false;
  auto* an_cmd = app.add_subcommand("analyze", "per-channel ratio of zeros in SMM layer outputs");
  an_cmd->add_option("--model", an_model, "model file")->required();
  an_cmd->add_option("--in", an_in, "LR PNG")->required();
  an_cmd->add_option("--out", an_out, "CSV to write")->required();
  an_cmd->add_flag("--sparse", an_sparse, "probe sparse execution instead of dense");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "dense vs sparse timing, single-threaded");
  bench_cmd->add_option("--model", ba.model, "model file (default: one synthetic layer)");
  bench_cmd->add_option("--in", ba.in, "LR PNG for model timing (default: generated)");
  bench_cmd->add_option("--height", ba.height, "feature/input height");
  bench_cmd->add_option("--width", ba.width, "feature/input width");
  bench_cmd->add_option("--channels", ba.channels, "layer channels");
  bench_cmd->add_option("--dense-fraction", ba.dense_fraction, "layer: fraction of dense channels");
  bench_cmd->add_option("--spatial-fraction", ba.spatial_fraction, "layer: fraction of important pixels");
  bench_cmd->add_option("--runs", ba.runs, "timed runs");
  bench_cmd->add_option("--warmup", ba.warmup, "untimed runs");
  bench_cmd->add_option("--seed", ba.seed, "random seed");
  bench_cmd->add_option("--out", ba.out, "CSV to write (default: stdout)");

  std::string ex_model, ex_in, ex_out;
  auto* ex_cmd = app.add_subcommand("export-masks", "spatial mask overlays and channel mask strips");
  ex_cmd->add_option("--model", ex_model, "model file")->required();
  ex_cmd->add_option("--in", ex_in, "LR PNG")->required();
  ex_cmd->add_option("--out", ex_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  set_blas_threads(1);
  try {
    if (*train_cmd) return run_train(ta);
    if (*sr_cmd) return run_sr(sr_model, sr_in, sr_out, sr_report);
    if (*eval_cmd) return run_eval(ev_model, ev_hr, ev_scale, ev_csv);
    if (*md_cmd) return run_make_dataset(md_hr, md_synthetic, md_size, md_scale, md_seed, md_out);
    if (*an_cmd) return run_analyze(an_model, an_in, an_out, an_sparse);
    if (*bench_cmd) return run_bench(ba);
    if (*ex_cmd) return run_export_masks(ex_model, ex_in, ex_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    // corrupt model files, unreadable images, shape mismatches on input, I/O failures
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

// dacal: training, inference, evaluation and the 25-Gaussians benchmark for
// the divide-and-conquer adversarial photo/video enhancer.
//
// Exit codes: 0 success, 1 runtime/divergence failure, 2 usage/config error.

#include <CLI11.hpp>
#include <json.hpp>

#include "dacal/checkpoint.hpp"
#include "dacal/config.hpp"
#include "dacal/data_pipeline.hpp"
#include "dacal/toy_bench.hpp"
#include "dacal/trainer.hpp"

namespace {

using namespace dacal;

struct RunManifest {
  std::string command;
  std::vector<std::string> artifacts;
  std::string config_text;

  void write(const std::string& dir) const {
    nlohmann::json j{{"command", command}, {"artifacts", artifacts}};
    if (!config_text.empty()) j["config"] = config_text;
    std::ofstream f(dir + "/manifest.json", std::ios::trunc);
    f << j.dump(2) << "\n";
  }
};

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  Config cfg = path.empty() ? Config() : Config::from_file(path);
  for (const std::string& o : overrides) cfg.set_override(o);
  if (const char* env_seed = std::getenv("DACAL_SEED")) cfg.set("run.seed", env_seed);
  return cfg;
}

// Mirror-pad an image so H and W hit the next multiple of `divisor`; the
// enhanced result is cropped back to the original size.
Tensor pad_reflect_to_multiple(const Tensor& img, int64_t divisor) {
  int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  int64_t nh = (h + divisor - 1) / divisor * divisor;
  int64_t nw = (w + divisor - 1) / divisor * divisor;
  if (nh == h && nw == w) return img;
  Tensor out({nh, nw, c});
  auto mirror = [](int64_t i, int64_t n) {
    if (i < n) return i;
    int64_t over = i - n + 1;
    return std::max<int64_t>(0, n - 1 - over);
  };
  for (int64_t y = 0; y < nh; ++y)
    for (int64_t x = 0; x < nw; ++x)
      for (int64_t ch = 0; ch < c; ++ch)
        out.at3(y, x, ch) = img.at3(mirror(y, h), mirror(x, w), ch);
  return out;
}

Tensor crop(const Tensor& img, int64_t h, int64_t w) {
  if (img.dim(0) == h && img.dim(1) == w) return img;
  Tensor out({h, w, img.dim(2)});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < img.dim(2); ++c) out.at3(y, x, c) = img.at3(y, x, c);
  return out;
}

Tensor enhance_padded(const Enhancer& net, const Tensor& img) {
  int64_t div = net.spec().divisor();
  Tensor padded = pad_reflect_to_multiple(img, div);
  return crop(net.enhance(padded), img.dim(0), img.dim(1));
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

// deterministic tail split: the last ceil(fraction*n) sorted items validate
template <typename T>
void split_val(std::vector<T>& train, std::vector<T>& val, double fraction) {
  int64_t n = static_cast<int64_t>(train.size());
  int64_t nval = std::max<int64_t>(1, static_cast<int64_t>(fraction * n));
  if (nval >= n) nval = n > 1 ? n / 2 : 0;
  val.assign(train.end() - nval, train.end());
  train.resize(n - nval);
}

int cmd_train(const Config& cfg) {
  TrainConfig tc = TrainConfig::from_config(cfg);
  std::string run_dir = cfg.get_string("run.dir");
  fs::create_directories(run_dir);
  std::string mode = cfg.get_string("data.mode");
  int64_t low_h = cfg.get_int("data.low_height"), low_w = cfg.get_int("data.low_width");
  std::string dir_x = cfg.get_string("data.low_dir"), dir_y = cfg.get_string("data.high_dir");
  if (dir_x.empty() || dir_y.empty())
    throw ConfigError("train: data.low_dir and data.high_dir must be set");
  if (tc.mode == "video" && mode != "video")
    throw ConfigError("train: trainer.mode=video requires data.mode=video");

  Trainer trainer(tc, run_dir);
  EnhancerCheckpoint ckpt;

  if (tc.mode == "video") {
    DatasetManifest m = scan_manifest(DataMode::kVideo, dir_x, dir_y, low_h, low_w);
    LoadedDataset d = load_dataset(m, dir_x, dir_y);
    VideoTensors vt{d.clips_x, d.clips_y};
    ckpt = trainer.train_recurrent_bidirectional(vt, true);
  } else {
    DataMode dm = tc.mode == "supervised" ? DataMode::kPaired : DataMode::kUnpaired;
    if (mode == "paired" && dm == DataMode::kUnpaired) dm = DataMode::kPaired;
    // staged image training loads at the doubled (stage 2/3) resolution
    DatasetManifest m = scan_manifest(dm, dir_x, dir_y, 2 * low_h, 2 * low_w);
    LoadedDataset d = load_dataset(m, dir_x, dir_y);
    PairedTensors data{d.x, d.y};
    PairedTensors val;
    if (dm == DataMode::kPaired) {
      PairedTensors train = data;
      std::vector<std::pair<Tensor, Tensor>> zipped;
      for (size_t i = 0; i < train.x.size(); ++i) zipped.push_back({train.x[i], train.y[i]});
      std::vector<std::pair<Tensor, Tensor>> vz;
      split_val(zipped, vz, cfg.get_double("data.val_fraction"));
      train.x.clear();
      train.y.clear();
      for (auto& [a, b] : zipped) {
        train.x.push_back(a);
        train.y.push_back(b);
      }
      for (auto& [a, b] : vz) {
        val.x.push_back(a);
        val.y.push_back(b);
      }
      data = train;
    }
    std::optional<EnhancerCheckpoint> prior;
    std::string ckpt_in = cfg.get_string("trainer.checkpoint_in");
    if (!ckpt_in.empty()) prior = load_checkpoint(ckpt_in);
    if (tc.stage >= 2 && !prior)
      throw StagingError("train: stage " + std::to_string(tc.stage) +
                         " requires trainer.checkpoint_in");
    ckpt = trainer.run_stage(tc.stage, data, val, prior);
  }

  std::string ckpt_path = run_dir + "/" + cfg.get_string("trainer.checkpoint_out");
  save_checkpoint(ckpt, ckpt_path);
  std::string csv_path = run_dir + "/metrics.csv";
  trainer.metrics().write(csv_path);
  RunManifest rm{"train", {ckpt_path, csv_path}, cfg.serialize()};
  rm.write(run_dir);
  std::cout << "trained " << tc.mode << " stage " << tc.stage << ": " << trainer.iteration()
            << " iterations\ncheckpoint: " << ckpt_path << "\nmetrics: " << csv_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// enhance
// ---------------------------------------------------------------------------

int cmd_enhance(const std::string& ckpt_path, const std::string& input,
                const std::string& output, bool video) {
  EnhancerCheckpoint ckpt = load_checkpoint(ckpt_path);
  std::mt19937_64 rng(1);
  Enhancer net(ckpt.enhancer_spec, rng);
  restore_params(ckpt, "E", net.params());

  if (!video) {
    if (net.spec().temporal)
      throw CheckpointError("enhance: temporal checkpoint requires --video");
    Tensor img = read_image(input);
    write_image(enhance_padded(net, img), output);
    std::cout << "enhanced " << input << " -> " << output << "\n";
    return 0;
  }

  if (!net.spec().temporal)
    throw CheckpointError("enhance: --video requires a recurrent (video-mode) checkpoint");
  if (!fs::is_directory(input)) throw IoError("enhance: --video expects a frame directory");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(input))
    if (e.is_regular_file()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("enhance: no frames in " + input);
  std::vector<Tensor> frames;
  for (const std::string& n : names) frames.push_back(read_image(input + "/" + n));
  int64_t div = net.spec().divisor();
  int64_t h = frames[0].dim(0), w = frames[0].dim(1);
  std::vector<Var> batch;
  for (const Tensor& f : frames) {
    Tensor p = pad_reflect_to_multiple(f, div);
    batch.push_back(constant(p.reshaped({1, p.dim(0), p.dim(1), 3})));
  }
  std::vector<Var> out = net.forward_recurrent(batch, false);
  fs::create_directories(output);
  for (size_t i = 0; i < out.size(); ++i) {
    const Shape& s = out[i]->value.shape();
    Tensor img = crop(out[i]->value.reshaped({s[1], s[2], s[3]}), h, w);
    write_image(img, output + "/" + names[i]);
  }
  std::cout << "enhanced " << out.size() << " frames -> " << output << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& low_dir,
             const std::string& high_dir, const std::string& out_dir) {
  EnhancerCheckpoint ckpt = load_checkpoint(ckpt_path);
  std::mt19937_64 rng(1);
  Enhancer net(ckpt.enhancer_spec, rng);
  restore_params(ckpt, "E", net.params());

  std::vector<std::string> names = detail::list_images(low_dir);
  {
    DatasetManifest check = scan_manifest(DataMode::kPaired, low_dir, high_dir, 8, 8);
    (void)check;  // validates pairing, reports orphans
  }
  // MS-SSIM needs at least one 11-pixel scale; tiny images report blank.
  auto safe_msssim = [](const Tensor& a, const Tensor& b) {
    int s = std::min(3, msssim_max_scales(a.dim(0), a.dim(1)));
    return s >= 1 ? ms_ssim(a, b, s) : std::numeric_limits<double>::quiet_NaN();
  };
  std::ostringstream csv;
  csv << "file,psnr_d,msssim_d,psnr_f,msssim_f\n";
  double sum_pd = 0, sum_md = 0, sum_pf = 0, sum_mf = 0;
  int64_t n_md = 0, n_mf = 0;
  for (const std::string& name : names) {
    Tensor x = read_image(low_dir + "/" + name);
    Tensor y = read_image(high_dir + "/" + name);
    if (!x.same_shape(y)) throw ManifestError("eval: pair shape mismatch for " + name);
    // full-resolution pass
    Tensor ef = enhance_padded(net, x);
    double pf = psnr(ef, y);
    double mf = safe_msssim(ef, y);
    // downscaled pass
    int64_t dh = std::max<int64_t>(1, x.dim(0) / 2), dw = std::max<int64_t>(1, x.dim(1) / 2);
    Tensor xd = resize(x, dh, dw, ResizeMode::kBilinear);
    Tensor yd = resize(y, dh, dw, ResizeMode::kBilinear);
    Tensor ed = enhance_padded(net, xd);
    double pd = psnr(ed, yd);
    double md = safe_msssim(ed, yd);
    csv << name << "," << MetricsCsv::format(pd) << "," << MetricsCsv::format(md) << ","
        << MetricsCsv::format(pf) << "," << MetricsCsv::format(mf) << "\n";
    sum_pd += pd;
    sum_pf += pf;
    if (!std::isnan(md)) {
      sum_md += md;
      ++n_md;
    }
    if (!std::isnan(mf)) {
      sum_mf += mf;
      ++n_mf;
    }
  }
  double n = static_cast<double>(names.size());
  double mean_md = n_md ? sum_md / n_md : std::numeric_limits<double>::quiet_NaN();
  double mean_mf = n_mf ? sum_mf / n_mf : std::numeric_limits<double>::quiet_NaN();
  csv << "mean," << MetricsCsv::format(sum_pd / n) << "," << MetricsCsv::format(mean_md) << ","
      << MetricsCsv::format(sum_pf / n) << "," << MetricsCsv::format(mean_mf) << "\n";
  fs::create_directories(out_dir);
  std::string csv_path = out_dir + "/eval.csv";
  std::ofstream(csv_path, std::ios::trunc) << csv.str();
  std::cout << "PSNR_d " << sum_pd / n << " dB, MS-SSIM_d " << mean_md << "\n"
            << "PSNR_f " << sum_pf / n << " dB, MS-SSIM_f " << mean_mf << "\n"
            << "per-file results: " << csv_path << "\n";
  RunManifest rm{"eval", {csv_path}, ""};
  rm.write(out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// toy
// ---------------------------------------------------------------------------

void write_samples_csv(const Tensor& pts, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  f << "x,y\n";
  for (int64_t i = 0; i < pts.dim(0); ++i)
    f << MetricsCsv::format(pts.at2(i, 0)) << "," << MetricsCsv::format(pts.at2(i, 1)) << "\n";
}

void write_surface_csv(const Tensor& surface, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  for (int64_t i = 0; i < surface.dim(0); ++i) {
    for (int64_t j = 0; j < surface.dim(1); ++j)
      f << (j ? "," : "") << MetricsCsv::format(surface.at2(i, j));
    f << "\n";
  }
}

// Scatter figure: critic surface as the background, target points orange,
// generated points green.
void render_toy_figure(const ToyResult& res, const Tensor& target, const Tensor& generated,
                       const std::string& path) {
  const int64_t size = 384;
  const double lo = res.surface_min, hi = res.surface_max;
  Tensor img({size, size, 3});
  double smin = res.value_surface.min(), smax = res.value_surface.max();
  double range = smax - smin > 1e-12 ? smax - smin : 1.0;
  int64_t s = res.value_surface.dim(0);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      int64_t sy = y * s / size, sx = x * s / size;
      double v = (res.value_surface.at2(sy, sx) - smin) / range;
      img.at3(size - 1 - y, x, 0) = 0.25 + 0.5 * v;
      img.at3(size - 1 - y, x, 1) = 0.25 + 0.5 * v;
      img.at3(size - 1 - y, x, 2) = 0.35 + 0.5 * v;
    }
  auto plot = [&](const Tensor& pts, double r, double g, double b) {
    for (int64_t i = 0; i < pts.dim(0); ++i) {
      int64_t px = std::llround((pts.at2(i, 0) - lo) / (hi - lo) * (size - 1));
      int64_t py = std::llround((pts.at2(i, 1) - lo) / (hi - lo) * (size - 1));
      for (int64_t dy = -1; dy <= 1; ++dy)
        for (int64_t dx = -1; dx <= 1; ++dx) {
          int64_t yy = size - 1 - (py + dy), xx = px + dx;
          if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
          img.at3(yy, xx, 0) = r;
          img.at3(yy, xx, 1) = g;
          img.at3(yy, xx, 2) = b;
        }
    }
  };
  plot(target, 1.0, 0.55, 0.0);    // orange: target distribution
  plot(generated, 0.1, 0.8, 0.1);  // green: generated samples
  write_png(img, path);
}

ToyConfig toy_config_from(const Config& cfg, ToyVariant variant) {
  ToyConfig t;
  t.sigma = cfg.get_double("toy.sigma");
  t.grid_extent = cfg.get_double("toy.grid_extent");
  t.iterations = cfg.get_int("toy.iterations");
  t.batch_size = cfg.get_int("toy.batch_size");
  t.lr = cfg.get_double("toy.lr");
  t.hidden = cfg.get_int("toy.hidden");
  t.slices = cfg.get_int("toy.slices");
  t.critic_iters = cfg.get_int("toy.critic_iters");
  t.seed = static_cast<uint64_t>(cfg.get_int("run.seed"));
  t.variant = variant;
  t.penalty.lambda = cfg.get_double("penalty.lambda");
  t.penalty.eta = cfg.get_double("penalty.eta");
  t.penalty.tau = cfg.get_double("penalty.tau");
  t.penalty.lambda_min = cfg.get_double("penalty.lambda_min");
  t.penalty.lambda_max = cfg.get_double("penalty.lambda_max");
  t.checkpoints.clear();
  for (int64_t c : {1000, 2500, 5000})
    if (c <= t.iterations) t.checkpoints.push_back(c);
  if (t.checkpoints.empty() || t.checkpoints.back() != t.iterations)
    t.checkpoints.push_back(t.iterations);
  return t;
}

int cmd_toy(const Config& cfg) {
  std::string run_dir = cfg.get_string("run.dir");
  fs::create_directories(run_dir);
  RunManifest rm{"toy", {}, cfg.serialize()};

  std::ostringstream summary;
  summary << "variant,iteration,modes_covered,high_quality_fraction,critic_loss,generator_loss,"
             "lambda,grad_avg\n";
  std::map<ToyVariant, ToyResult> results;
  for (ToyVariant variant : {ToyVariant::kWganGp, ToyVariant::kAdaswgan}) {
    ToyConfig tc = toy_config_from(cfg, variant);
    ToyResult res = run_toy_experiment(tc);
    std::mt19937_64 trng(tc.seed + 99);
    Tensor target = sample_grid_gaussians(tc, tc.eval_samples, trng);
    for (const ToyMetricRow& row : res.history) {
      summary << to_string(variant) << "," << row.iteration << "," << row.modes_covered << ","
              << MetricsCsv::format(row.high_quality_fraction) << ","
              << MetricsCsv::format(row.critic_loss) << ","
              << MetricsCsv::format(row.generator_loss) << "," << MetricsCsv::format(row.lambda)
              << "," << MetricsCsv::format(row.grad_avg) << "\n";
      std::string sp = run_dir + "/samples_" + to_string(variant) + "_" +
                       std::to_string(row.iteration) + ".csv";
      write_samples_csv(res.samples_at.at(row.iteration), sp);
      rm.artifacts.push_back(sp);
    }
    std::string surf = run_dir + "/surface_" + to_string(variant) + ".csv";
    write_surface_csv(res.value_surface, surf);
    rm.artifacts.push_back(surf);
    std::string fig = run_dir + "/figure_" + to_string(variant) + ".png";
    render_toy_figure(res, target, res.samples_at.rbegin()->second, fig);
    rm.artifacts.push_back(fig);
    results.emplace(variant, std::move(res));
  }
  std::string sum_path = run_dir + "/toy_summary.csv";
  std::ofstream(sum_path, std::ios::trunc) << summary.str();
  rm.artifacts.push_back(sum_path);
  rm.write(run_dir);
  std::cout << summary.str() << "artifacts in " << run_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"divide-and-conquer adversarial photo/video enhancement toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;

  CLI::App* train = app.add_subcommand("train", "run the configured training mode/stage");
  train->add_option("--config", config_path, "config file");
  train->add_option("--set", overrides, "dotted-path override key=value")->take_all();

  CLI::App* enhance = app.add_subcommand("enhance", "enhance an image or a frame directory");
  std::string ckpt_path, input, output;
  bool video = false;
  enhance->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  enhance->add_option("--input", input, "input image or frame directory")->required();
  enhance->add_option("--output", output, "output image or directory")->required();
  enhance->add_flag("--video", video, "recurrent enhancement over a frame directory");

  CLI::App* eval = app.add_subcommand("eval", "PSNR / MS-SSIM over a paired test set");
  std::string low_dir, high_dir, out_dir = "eval_out";
  eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("--low", low_dir, "directory of inputs")->required();
  eval->add_option("--high", high_dir, "directory of references")->required();
  eval->add_option("--out", out_dir, "output directory");

  CLI::App* toy = app.add_subcommand("toy", "25-Gaussians comparison of both variants");
  toy->add_option("--config", config_path, "config file");
  toy->add_option("--set", overrides, "dotted-path override key=value")->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(load_config(config_path, overrides));
    if (enhance->parsed()) return cmd_enhance(ckpt_path, input, output, video);
    if (eval->parsed()) return cmd_eval(ckpt_path, low_dir, high_dir, out_dir);
    if (toy->parsed()) return cmd_toy(load_config(config_path, overrides));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const StagingError& e) {
    std::cerr << "staging error: " << e.what() << "\n";
    return 2;
  } catch (const ManifestError& e) {
    std::cerr << "manifest error: " << e.what() << "\n";
    return 2;
  } catch (const TrainingDivergedError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "dacal/checkpoint.hpp"
#include "dacal/image_io.hpp"
#include "dacal/trainer.hpp"

using namespace dacal;

namespace {

const char* cli() { return DACAL_CLI_PATH; }

struct Scratch {
  fs::path root;
  Scratch() {
    static int counter = 0;
    root = fs::path(::testing::TempDir()) /
           ("cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(root);
  }
  ~Scratch() { fs::remove_all(root); }
  std::string p(const std::string& rel) const { return (root / rel).string(); }
};

int run(const std::string& args, const Scratch& s, const std::string& log = "log.txt") {
  std::string cmd = "cd " + s.root.string() + " && " + std::string(cli()) + " " + args + " > " +
                    s.p(log) + " 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

Tensor synth(uint64_t seed, int64_t h, int64_t w) {
  std::mt19937_64 rng(seed);
  return gaussian_blur(rand_uniform({h, w, 3}, rng, 0.05, 0.95), {1.0, 2});
}

void make_paired_dirs(const Scratch& s, int n, int64_t h, int64_t w, double gamma) {
  fs::create_directories(s.p("low"));
  fs::create_directories(s.p("high"));
  for (int i = 0; i < n; ++i) {
    Tensor x = synth(40 + i, h, w);
    Tensor y = x;
    for (int64_t j = 0; j < y.numel(); ++j) y[j] = std::pow(y[j], gamma);
    write_png(x, s.p("low/img" + std::to_string(i) + ".png"));
    write_png(y, s.p("high/img" + std::to_string(i) + ".png"));
  }
}

void write_train_config(const Scratch& s, const std::string& extra = "") {
  std::ofstream f(s.p("cfg.toml"));
  f << "[run]\ndir = \"run\"\nseed = 42\n\n"
    << "[trainer]\nmode = \"supervised\"\nstage = 1\nepochs_per_stage = 1\nbatch_size = 2\n"
    << "max_steps = 3\neval_interval = 2\nalt_epochs = 0\n\n"
    << "[enhancer]\ndepth = 2\nbase_channels = 4\n\n"
    << "[data]\nmode = \"paired\"\nlow_dir = \"low\"\nhigh_dir = \"high\"\n"
    << "low_height = 8\nlow_width = 16\n"
    << extra;
}

/// A checkpoint whose enhancer is the exact identity map: beta = 0 and all
/// perception/fusion heads zeroed, so clamp01(x + 0 + 0) = x bit-for-bit.
std::string write_identity_checkpoint(const Scratch& s, int64_t depth = 2) {
  TrainConfig cfg;
  cfg.enhancer = {.depth = depth, .base_channels = 4, .beta = 0.0};
  Trainer tr(cfg);
  CyclicGanSystem sys = tr.build_system(false);
  for (const auto& [name, var] : sys.E.params().items())
    if (name.rfind("netG3.", 0) == 0)
      for (int64_t i = 0; i < var->value.numel(); ++i) var->value[i] = 0.0;
  std::string path = s.p("identity.dckpt");
  save_checkpoint(tr.to_checkpoint(sys, 1, 0), path);
  return path;
}

// ---------------------------------------------------------------------------

TEST(CliTrain, MissingConfigFileExitsTwo) {
  Scratch s;
  EXPECT_EQ(run("train --config does_not_exist.toml", s), 2);
  EXPECT_NE(slurp(s.p("log.txt")).find("config error"), std::string::npos);
}

TEST(CliTrain, UnknownOverrideKeyExitsTwo) {
  Scratch s;
  make_paired_dirs(s, 4, 16, 32, 0.7);
  write_train_config(s);
  EXPECT_EQ(run("train --config cfg.toml --set trainer.nonsense=1", s), 2);
  EXPECT_NE(slurp(s.p("log.txt")).find("trainer.nonsense"), std::string::npos);
}

TEST(CliTrain, StageTwoWithoutCheckpointIsAStagingError) {
  Scratch s;
  make_paired_dirs(s, 4, 16, 32, 0.7);
  write_train_config(s);
  EXPECT_EQ(run("train --config cfg.toml --set trainer.stage=2", s), 2);
  EXPECT_NE(slurp(s.p("log.txt")).find("staging error"), std::string::npos);
}

TEST(CliTrain, SmokeRunWritesCheckpointCsvAndManifest) {
  Scratch s;
  make_paired_dirs(s, 5, 16, 32, 0.7);
  write_train_config(s);
  ASSERT_EQ(run("train --config cfg.toml", s), 0);
  EXPECT_TRUE(fs::exists(s.p("run/checkpoint.dckpt")));
  EXPECT_TRUE(fs::exists(s.p("run/metrics.csv")));
  EXPECT_TRUE(fs::exists(s.p("run/manifest.json")));
  std::string csv = slurp(s.p("run/metrics.csv"));
  EXPECT_NE(csv.find("iter,stage,loss_gan_fwd"), std::string::npos);
}

TEST(CliTrain, MetricsCsvIsDeterministicAcrossRuns) {
  Scratch s;
  make_paired_dirs(s, 5, 16, 32, 0.7);
  write_train_config(s);
  ASSERT_EQ(run("train --config cfg.toml --set run.dir=runA", s), 0);
  ASSERT_EQ(run("train --config cfg.toml --set run.dir=runB", s), 0);
  std::string a = slurp(s.p("runA/metrics.csv"));
  std::string b = slurp(s.p("runB/metrics.csv"));
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, b);
}

TEST(CliTrain, EnvSeedOverridesConfig) {
  Scratch s;
  make_paired_dirs(s, 4, 16, 32, 0.7);
  write_train_config(s);
  setenv("DACAL_SEED", "777", 1);
  int rc = run("train --config cfg.toml", s);
  unsetenv("DACAL_SEED");
  ASSERT_EQ(rc, 0);
  EXPECT_NE(slurp(s.p("run/manifest.json")).find("seed = 777"), std::string::npos);
}

TEST(CliEnhance, IdentityCheckpointReproducesOddSizedInput) {
  Scratch s;
  std::string ckpt = write_identity_checkpoint(s);
  Tensor img = synth(9, 67, 45);
  write_png(img, s.p("odd.png"));
  ASSERT_EQ(run("enhance --checkpoint identity.dckpt --input odd.png --output out.png", s), 0);
  Tensor out = read_png(s.p("out.png"));
  ASSERT_EQ(out.shape(), (Shape{67, 45, 3}));
  // identity map + 8-bit quantization round trip
  EXPECT_GT(psnr(out, read_png(s.p("odd.png"))), 45.0);
}

TEST(CliEnhance, UnreadableInputAndBadCheckpointAreDistinctErrors) {
  Scratch s;
  std::string ckpt = write_identity_checkpoint(s);
  EXPECT_EQ(run("enhance --checkpoint identity.dckpt --input missing.png --output o.png", s), 1);
  std::ofstream(s.p("junk.dckpt")) << "junk";
  Tensor img = synth(9, 16, 16);
  write_png(img, s.p("in.png"));
  EXPECT_EQ(run("enhance --checkpoint junk.dckpt --input in.png --output o.png", s), 1);
  EXPECT_NE(slurp(s.p("log.txt")).find("magic"), std::string::npos);
}

TEST(CliEnhance, VideoDirectoryKeepsFrameCount) {
  Scratch s;
  // temporal checkpoint, no training needed
  TrainConfig cfg;
  cfg.mode = "video";
  cfg.enhancer = {.depth = 2, .base_channels = 4, .temporal = true};
  cfg.critic.depth = 1;
  cfg.critic.base_channels = 2;
  cfg.critic.feature_dim = 4;
  cfg.critic.slices = 2;
  Trainer tr(cfg);
  CyclicGanSystem sys = tr.build_system(true);
  save_checkpoint(tr.to_checkpoint(sys, 1, 0), s.p("video.dckpt"));
  fs::create_directories(s.p("frames"));
  for (int i = 0; i < 4; ++i)
    write_png(synth(100 + i, 16, 16), s.p("frames/f" + std::to_string(i) + ".png"));
  ASSERT_EQ(run("enhance --checkpoint video.dckpt --input frames --output outframes --video", s),
            0);
  int count = 0;
  for (const auto& e : fs::directory_iterator(s.p("outframes"))) {
    ++count;
    (void)e;
  }
  EXPECT_EQ(count, 4);
}

TEST(CliEnhance, VideoFlagNeedsTemporalCheckpoint) {
  Scratch s;
  write_identity_checkpoint(s);
  fs::create_directories(s.p("frames"));
  write_png(synth(1, 16, 16), s.p("frames/f0.png"));
  EXPECT_EQ(run("enhance --checkpoint identity.dckpt --input frames --output o --video", s), 1);
  EXPECT_NE(slurp(s.p("log.txt")).find("recurrent"), std::string::npos);
}

TEST(CliEval, GroundTruthAgainstItselfGivesSentinels) {
  Scratch s;
  write_identity_checkpoint(s);
  fs::create_directories(s.p("gt"));
  for (int i = 0; i < 2; ++i) write_png(synth(60 + i, 48, 48), s.p("gt/i" + std::to_string(i) + ".png"));
  ASSERT_EQ(run("eval --checkpoint identity.dckpt --low gt --high gt --out ev", s), 0);
  std::string csv = slurp(s.p("ev/eval.csv"));
  // identity enhancement of x scored against x itself: PSNR inf, MS-SSIM 1
  EXPECT_NE(csv.find("inf"), std::string::npos);
  EXPECT_NE(csv.find(",1\n"), std::string::npos);
}

TEST(CliEval, DeterministicAcrossRuns) {
  Scratch s;
  write_identity_checkpoint(s);
  make_paired_dirs(s, 3, 48, 48, 0.8);
  ASSERT_EQ(run("eval --checkpoint identity.dckpt --low low --high high --out e1", s), 0);
  ASSERT_EQ(run("eval --checkpoint identity.dckpt --low low --high high --out e2", s), 0);
  EXPECT_EQ(slurp(s.p("e1/eval.csv")), slurp(s.p("e2/eval.csv")));
}

TEST(CliEval, UnpairedDataIsAManifestError) {
  Scratch s;
  write_identity_checkpoint(s);
  fs::create_directories(s.p("low"));
  fs::create_directories(s.p("high"));
  write_png(synth(1, 16, 16), s.p("low/a.png"));
  write_png(synth(2, 16, 16), s.p("low/b.png"));
  write_png(synth(3, 16, 16), s.p("high/a.png"));
  EXPECT_EQ(run("eval --checkpoint identity.dckpt --low low --high high --out ev", s), 2);
  EXPECT_NE(slurp(s.p("log.txt")).find("b.png"), std::string::npos);
}

TEST(CliToy, SummaryListsBothVariantsAtEveryCheckpoint) {
  Scratch s;
  ASSERT_EQ(run("toy --set toy.iterations=30 --set toy.batch_size=8 --set toy.hidden=16 "
                "--set toy.slices=4 --set run.dir=toyrun",
                s),
            0);
  std::string summary = slurp(s.p("toyrun/toy_summary.csv"));
  EXPECT_NE(summary.find("wgan_gp,30"), std::string::npos);
  EXPECT_NE(summary.find("adaswgan,30"), std::string::npos);
  EXPECT_TRUE(fs::exists(s.p("toyrun/samples_adaswgan_30.csv")));
  EXPECT_TRUE(fs::exists(s.p("toyrun/surface_wgan_gp.csv")));
  EXPECT_TRUE(fs::exists(s.p("toyrun/figure_adaswgan.png")));
  EXPECT_TRUE(fs::exists(s.p("toyrun/manifest.json")));
}

TEST(CliUsage, NoSubcommandExitsTwo) {
  Scratch s;
  EXPECT_EQ(run("", s), 2);
  EXPECT_EQ(run("bogus_subcommand", s), 2);
}

}  // namespace

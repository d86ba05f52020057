#include <gtest/gtest.h>

#include "dacal/toy_bench.hpp"
#include "dacal/trainer.hpp"

using namespace dacal;

namespace {

// Smooth synthetic images: random pixels softened by a small blur.
Tensor synth_image(uint64_t seed, int64_t h, int64_t w) {
  std::mt19937_64 rng(seed);
  Tensor img = rand_uniform({h, w, 3}, rng, 0.05, 0.95);
  return gaussian_blur(img, {1.0, 2});
}

Tensor gamma_map(const Tensor& img, double g) {
  Tensor out = img;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], g);
  return out;
}

TrainConfig tiny_cfg() {
  TrainConfig cfg;
  cfg.enhancer = {.depth = 2, .base_channels = 4};
  cfg.critic.depth = 2;
  cfg.critic.base_channels = 4;
  cfg.critic.feature_dim = 8;
  cfg.critic.slices = 4;
  cfg.critic.blur = {1.0, 2};
  cfg.batch_size = 4;
  cfg.seed = 7;
  cfg.eval_interval = 0;
  return cfg;
}

PairedTensors make_paired(int n, int64_t h, int64_t w, double gamma = 1.0,
                          uint64_t seed0 = 100) {
  PairedTensors d;
  for (int i = 0; i < n; ++i) {
    Tensor x = synth_image(seed0 + i, h, w);
    d.x.push_back(x);
    d.y.push_back(gamma == 1.0 ? x : gamma_map(x, gamma));
  }
  return d;
}

// ---------------------------------------------------------------------------
// branch alternation
// ---------------------------------------------------------------------------

TEST(BranchAlternation, ZeroAltEpochsIsAlwaysJoint) {
  TrainConfig cfg = tiny_cfg();
  cfg.alt_epochs = 0;
  cfg.steps_per_epoch = 10;
  for (int64_t it : {0, 1, 5, 99})
    EXPECT_EQ(branch_alternation_schedule(it, cfg), BranchPhase::kJoint);
}

TEST(BranchAlternation, ParityRuleDuringEarlyTraining) {
  TrainConfig cfg = tiny_cfg();
  cfg.alt_epochs = 2;
  cfg.steps_per_epoch = 4;
  EXPECT_EQ(branch_alternation_schedule(0, cfg), BranchPhase::kAdditive);
  EXPECT_EQ(branch_alternation_schedule(1, cfg), BranchPhase::kMultiplicative);
  EXPECT_EQ(branch_alternation_schedule(6, cfg), BranchPhase::kAdditive);
  EXPECT_EQ(branch_alternation_schedule(8, cfg), BranchPhase::kJoint);  // epoch 2
}

TEST(BranchAlternation, FrozenHeadDeltasAreExactlyZero) {
  TrainConfig cfg = tiny_cfg();
  cfg.alt_epochs = 100;  // stay in the alternating phase
  cfg.steps_per_epoch = 8;
  cfg.epochs_per_stage = 1;
  cfg.max_steps = 1;  // a single additive step
  cfg.lr_generator = 1e-2;
  Trainer tr(cfg);
  PairedTensors data = make_paired(4, 8, 8);
  // snapshot scale-head and fusion parameters by building the same system
  Trainer probe(cfg);
  CyclicGanSystem before = probe.build_system(false);
  EnhancerCheckpoint ckpt = tr.train_supervised(data, {});
  for (const auto& [name, var] : before.E.params().items()) {
    if (name.rfind("netG3.scale", 0) == 0 || name.rfind("netG3.fuse", 0) == 0) {
      const Tensor& trained = ckpt.blocks.at("E." + name);
      for (int64_t i = 0; i < trained.numel(); ++i)
        ASSERT_EQ(trained[i], var->value[i]) << name << " changed during an additive step";
    }
  }
  // the residual head must have moved
  double moved = 0;
  for (const auto& [name, var] : before.E.params().items())
    if (name.rfind("netG3.res", 0) == 0) {
      const Tensor& trained = ckpt.blocks.at("E." + name);
      for (int64_t i = 0; i < trained.numel(); ++i)
        moved += std::abs(trained[i] - var->value[i]);
    }
  EXPECT_GT(moved, 0.0);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TrainConfig cfg = tiny_cfg();
  cfg.mode = "weakly_supervised";
  Trainer tr(cfg);
  CyclicGanSystem sys = tr.build_system(true);
  EnhancerCheckpoint ckpt = tr.to_checkpoint(sys, 1, 42);
  std::string p1 = ::testing::TempDir() + "ck1.dckpt";
  std::string p2 = ::testing::TempDir() + "ck2.dckpt";
  save_checkpoint(ckpt, p1);
  EnhancerCheckpoint loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  ASSERT_FALSE(b1.empty());
  EXPECT_EQ(b1, b2);
  // round-trip preserves every block bit-exactly
  for (const auto& [name, t] : ckpt.blocks) {
    const Tensor& lt = loaded.blocks.at(name);
    for (int64_t i = 0; i < t.numel(); ++i) ASSERT_EQ(t[i], lt[i]) << name;
  }
  EXPECT_EQ(loaded.iteration, 42);
}

TEST(Checkpoint, TruncatedFileIsACorruptError) {
  TrainConfig cfg = tiny_cfg();
  Trainer tr(cfg);
  CyclicGanSystem sys = tr.build_system(false);
  std::string p = ::testing::TempDir() + "trunc.dckpt";
  save_checkpoint(tr.to_checkpoint(sys, 1, 0), p);
  auto size = std::filesystem::file_size(p);
  std::filesystem::resize_file(p, size / 2);
  EXPECT_THROW(load_checkpoint(p), CheckpointCorruptError);
}

TEST(Checkpoint, VersionMismatchIsDetected) {
  TrainConfig cfg = tiny_cfg();
  Trainer tr(cfg);
  CyclicGanSystem sys = tr.build_system(false);
  std::string p = ::testing::TempDir() + "ver.dckpt";
  save_checkpoint(tr.to_checkpoint(sys, 1, 0), p);
  {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    uint32_t bad = 999;
    f.write(reinterpret_cast<const char*>(&bad), sizeof bad);
  }
  EXPECT_THROW(load_checkpoint(p), CheckpointVersionError);
}

TEST(Checkpoint, ShapeMismatchIsDetected) {
  TrainConfig cfg = tiny_cfg();
  Trainer tr(cfg);
  CyclicGanSystem sys = tr.build_system(false);
  EnhancerCheckpoint ckpt = tr.to_checkpoint(sys, 1, 0);
  ckpt.blocks.at("E.netG1.enc1.w") = Tensor({3, 3}, 0.0);  // wrong shape
  std::mt19937_64 rng(1);
  Enhancer fresh(cfg.enhancer, rng);
  EXPECT_THROW(restore_params(ckpt, "E", fresh.params()), CheckpointShapeError);
}

TEST(Checkpoint, MissingFileAndBadMagic) {
  EXPECT_THROW(load_checkpoint("/nonexistent/x.dckpt"), CheckpointError);
  std::string p = ::testing::TempDir() + "junk.dckpt";
  std::ofstream(p) << "this is not a checkpoint";
  EXPECT_THROW(load_checkpoint(p), CheckpointCorruptError);
}

// ---------------------------------------------------------------------------
// supervised smoke + determinism
// ---------------------------------------------------------------------------

TEST(SupervisedTraining, LearnsIdentityOnTinyImages) {
  TrainConfig cfg = tiny_cfg();
  cfg.lr_generator = 2e-3;
  cfg.epochs_per_stage = 1;
  cfg.steps_per_epoch = 150;
  cfg.max_steps = 150;
  cfg.alt_epochs = 0;
  PairedTensors train = make_paired(8, 8, 8);
  PairedTensors val = make_paired(2, 8, 8, 1.0, 900);
  Trainer tr(cfg);
  EnhancerCheckpoint ckpt = tr.train_supervised(train, val);
  Trainer loader(cfg);
  CyclicGanSystem sys = loader.from_checkpoint(ckpt);
  double p = loader.eval_psnr(sys.E, val);
  EXPECT_GT(p, 20.0);  // desk-scale sanity; the acceptance suite pins 35 dB
  double first = tr.metrics().rows.front().loss_recon;
  double last = tr.metrics().rows.back().loss_recon;
  EXPECT_LT(last, first);
}

TEST(SupervisedTraining, MetricsCsvIsDeterministicAcrossRuns) {
  TrainConfig cfg = tiny_cfg();
  cfg.epochs_per_stage = 1;
  cfg.steps_per_epoch = 25;
  cfg.max_steps = 25;
  cfg.eval_interval = 10;
  PairedTensors train = make_paired(6, 8, 8, 0.7);
  PairedTensors val = make_paired(2, 8, 8, 0.7, 700);
  Trainer a(cfg), b(cfg);
  a.train_supervised(train, val);
  b.train_supervised(train, val);
  EXPECT_EQ(a.metrics().serialize(), b.metrics().serialize());
  EXPECT_EQ(a.metrics().rows.size(), 25u);
}

TEST(SupervisedTraining, LossColumnMatchesReportedMse) {
  TrainConfig cfg = tiny_cfg();
  cfg.max_steps = 3;
  cfg.epochs_per_stage = 1;
  cfg.steps_per_epoch = 3;
  PairedTensors train = make_paired(4, 8, 8, 0.5);
  Trainer tr(cfg);
  tr.train_supervised(train, {});
  for (const StepMetrics& m : tr.metrics().rows) {
    EXPECT_GE(m.loss_recon, 0.0);
    EXPECT_EQ(m.loss_cycle, 0.0);
    EXPECT_EQ(m.loss_gan_fwd, 0.0);
  }
}

TEST(SupervisedTraining, NanInputTriggersDivergenceErrorWithDump) {
  TrainConfig cfg = tiny_cfg();
  cfg.max_steps = 2;
  cfg.epochs_per_stage = 1;
  cfg.steps_per_epoch = 2;
  PairedTensors train = make_paired(4, 8, 8);
  train.x[0][3] = std::numeric_limits<double>::quiet_NaN();
  std::string run_dir = ::testing::TempDir() + "divergence_run";
  std::filesystem::create_directories(run_dir);
  Trainer tr(cfg, run_dir);
  EXPECT_THROW(tr.train_supervised(train, {}), TrainingDivergedError);
  EXPECT_TRUE(std::filesystem::exists(run_dir + "/diverged.dckpt"));
}

// ---------------------------------------------------------------------------
// weakly supervised
// ---------------------------------------------------------------------------

TEST(WeaklySupervisedTraining, ThetaStaysOrthonormalAndLambdaReplays) {
  TrainConfig cfg = tiny_cfg();
  cfg.mode = "weakly_supervised";
  cfg.epochs_per_stage = 1;
  cfg.steps_per_epoch = 6;
  cfg.max_steps = 6;
  cfg.critic_iters_per_gen = 2;
  cfg.alt_epochs = 0;
  cfg.weights = {.gamma1 = 10, .gamma2 = 1};
  UnpairedTensors train;
  for (int i = 0; i < 6; ++i) {
    train.x.push_back(synth_image(200 + i, 8, 8));
    train.y.push_back(gamma_map(synth_image(300 + i, 8, 8), 0.6));
  }
  Trainer tr(cfg);
  CyclicGanSystem sys = tr.build_system(true);
  tr.run_weakly_loop(sys, train, {}, 1, false);
  EXPECT_LT(sys.C->theta().orthonormality_defect(), 1e-5);
  EXPECT_LT(sys.Chat->theta().orthonormality_defect(), 1e-5);
  // replay the controller rule over the recorded trace
  for (const auto* trace : {&tr.penalty_trace_fwd(), &tr.penalty_trace_bwd()}) {
    ASSERT_EQ(trace->size(), 12u);  // 6 steps x 2 critic iters
    PenaltyState st = cfg.penalty;
    for (const auto& pt : *trace) {
      PenaltyState expect = update_penalty_weight(st, pt.batch_grad_norm);
      ASSERT_DOUBLE_EQ(pt.lambda, expect.lambda);
      ASSERT_DOUBLE_EQ(pt.avg, expect.avg);
      st = expect;
    }
  }
}

TEST(WeaklySupervisedTraining, GeneratorObjectiveDecreasesOnIdentityTask) {
  // With gamma1 large and x ~ y, the cycle/identity terms dominate and must
  // shrink as the generators learn to preserve their input.
  TrainConfig cfg = tiny_cfg();
  cfg.mode = "weakly_supervised";
  cfg.epochs_per_stage = 1;
  cfg.steps_per_epoch = 40;
  cfg.max_steps = 40;
  cfg.critic_iters_per_gen = 1;
  cfg.lr_generator = 1e-3;
  cfg.alt_epochs = 0;
  cfg.weights = {.gamma1 = 100, .gamma2 = 10};
  UnpairedTensors train;
  for (int i = 0; i < 8; ++i) {
    train.x.push_back(synth_image(400 + i, 8, 8));
    train.y.push_back(synth_image(500 + i, 8, 8));
  }
  Trainer tr(cfg);
  CyclicGanSystem sys = tr.build_system(true);
  tr.run_weakly_loop(sys, train, {}, 1, false);
  const auto& rows = tr.metrics().rows;
  double early = 0, late = 0;
  for (int i = 0; i < 5; ++i) {
    early += rows[i].loss_cycle + rows[i].loss_identity;
    late += rows[rows.size() - 1 - i].loss_cycle + rows[rows.size() - 1 - i].loss_identity;
  }
  EXPECT_LT(late, early);
}

// ---------------------------------------------------------------------------
// staging
// ---------------------------------------------------------------------------

TEST(RunStage, RequiresPriorCheckpoints) {
  TrainConfig cfg = tiny_cfg();
  Trainer tr(cfg);
  PairedTensors train = make_paired(4, 16, 16);
  EXPECT_THROW(tr.run_stage(2, train, {}), StagingError);
  EXPECT_THROW(tr.run_stage(0, train, {}), StagingError);
}

TEST(RunStage, ThreeStagePipelineFreezesInheritedBlocksAtStageTwo) {
  TrainConfig cfg = tiny_cfg();
  cfg.epochs_per_stage = 1;
  cfg.steps_per_epoch = 4;
  cfg.alt_epochs = 0;
  PairedTensors train = make_paired(4, 16, 16, 0.7);
  PairedTensors val = make_paired(2, 16, 16, 0.7, 800);

  Trainer t1(cfg);
  t1.config().max_steps = 4;
  EnhancerCheckpoint s1 = t1.run_stage(1, train, val);
  EXPECT_EQ(s1.stage, 1);
  EXPECT_EQ(s1.enhancer_spec.scale_level, ScaleLevel::kLow);

  Trainer t2(cfg);
  t2.config().max_steps = 4;
  EnhancerCheckpoint s2 = t2.run_stage(2, train, val, s1);
  EXPECT_EQ(s2.stage, 2);
  EXPECT_EQ(s2.enhancer_spec.scale_level, ScaleLevel::kHigh);
  // inherited blocks bit-identical to the stage-1 checkpoint
  for (const auto& [name, t] : s1.blocks) {
    if (name.rfind("E.netG", 0) != 0) continue;
    const Tensor& now = s2.blocks.at(name);
    for (int64_t i = 0; i < t.numel(); ++i) ASSERT_EQ(t[i], now[i]) << name;
  }
  // fresh blocks must exist and differ from init after training
  EXPECT_TRUE(s2.blocks.count("E.netG0.stem.w"));
  EXPECT_TRUE(s2.blocks.count("E.netG4.out.w"));

  Trainer t3(cfg);
  t3.config().max_steps = 4;
  EnhancerCheckpoint s3 = t3.run_stage(3, train, val, s2);
  EXPECT_EQ(s3.stage, 3);
  // stage 3 trains the whole net: inherited blocks may now move
}

TEST(RunStage, StageTwoRejectsStageTwoCheckpoint) {
  TrainConfig cfg = tiny_cfg();
  cfg.epochs_per_stage = 1;
  cfg.steps_per_epoch = 2;
  cfg.max_steps = 2;
  cfg.alt_epochs = 0;
  PairedTensors train = make_paired(4, 16, 16);
  Trainer t1(cfg);
  EnhancerCheckpoint s1 = t1.run_stage(1, train, {});
  Trainer t2(cfg);
  t2.config().max_steps = 2;
  EnhancerCheckpoint s2 = t2.run_stage(2, train, {}, s1);
  Trainer t2b(cfg);
  EXPECT_THROW(t2b.run_stage(2, train, {}, s2), StagingError);
}

// ---------------------------------------------------------------------------
// recurrent video training
// ---------------------------------------------------------------------------

VideoTensors palindromic_clips(int n_clips, int64_t h, int64_t w) {
  VideoTensors v;
  for (int c = 0; c < n_clips; ++c) {
    Tensor a = synth_image(600 + c, h, w);
    Tensor b = synth_image(700 + c, h, w);
    v.clips_x.push_back({a, b, a});
    Tensor ya = gamma_map(synth_image(800 + c, h, w), 0.6);
    Tensor yb = gamma_map(synth_image(900 + c, h, w), 0.6);
    v.clips_y.push_back({ya, yb, ya});
  }
  return v;
}

TrainConfig video_cfg() {
  TrainConfig cfg = tiny_cfg();
  cfg.mode = "video";
  cfg.epochs_per_stage = 2;
  cfg.steps_per_epoch = 2;
  cfg.critic_iters_per_gen = 1;
  cfg.weights = {.gamma1 = 10, .gamma2 = 1};
  return cfg;
}

TEST(RecurrentTraining, EpochParityControlsDirection) {
  EXPECT_TRUE(recurrent_epoch_is_forward(0));
  EXPECT_FALSE(recurrent_epoch_is_forward(1));
  EXPECT_TRUE(recurrent_epoch_is_forward(2));
}

TEST(RecurrentTraining, PalindromicClipsMakeDirectionIrrelevant) {
  VideoTensors data = palindromic_clips(2, 8, 8);
  Trainer bidi(video_cfg());
  bidi.train_recurrent_bidirectional(data, true);
  Trainer fwd(video_cfg());
  fwd.train_recurrent_bidirectional(data, false);
  EXPECT_EQ(bidi.metrics().serialize(), fwd.metrics().serialize());
}

TEST(RecurrentTraining, StaticClipsKeepFramewiseEqualityAfterTraining) {
  VideoTensors data;
  for (int c = 0; c < 2; ++c) {
    Tensor f = synth_image(1000 + c, 8, 8);
    data.clips_x.push_back({f, f, f});
    Tensor y = gamma_map(synth_image(1100 + c, 8, 8), 0.6);
    data.clips_y.push_back({y, y, y});
  }
  Trainer tr(video_cfg());
  EnhancerCheckpoint ckpt = tr.train_recurrent_bidirectional(data, true);
  EXPECT_TRUE(ckpt.enhancer_spec.temporal);
  Trainer loader(video_cfg());
  CyclicGanSystem sys = loader.from_checkpoint(ckpt);
  Var frame = constant(data.clips_x[0][0].reshaped({1, 8, 8, 3}));
  std::vector<Var> out = sys.E.forward_recurrent({frame, frame, frame, frame, frame}, false);
  for (size_t t = 1; t < out.size(); ++t)
    for (int64_t i = 0; i < out[0]->value.numel(); ++i)
      ASSERT_EQ(out[t]->value[i], out[0]->value[i]);
}

TEST(RecurrentTraining, ClipShorterThanWindowIsADataError) {
  VideoTensors data;
  data.clips_x.push_back({synth_image(1, 8, 8), synth_image(2, 8, 8)});  // 2 < window 3
  data.clips_y.push_back({synth_image(3, 8, 8), synth_image(4, 8, 8)});
  Trainer tr(video_cfg());
  EXPECT_THROW(tr.train_recurrent_bidirectional(data, true), DataError);
}

}  // namespace

#pragma once

#include <iomanip>
#include <optional>

#include "dacal/checkpoint.hpp"
#include "dacal/config.hpp"
#include "dacal/data_pipeline.hpp"

// Training orchestration: branch alternation, the three multiscale stages,
// alternating generator/critic updates with the adaptive penalty controller
// and Stiefel updates, recurrent bidirectional video training, metrics CSV
// logging and checkpointing.

namespace dacal {

struct TrainingDivergedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StagingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class BranchPhase { kAdditive, kMultiplicative, kJoint };

struct TrainConfig {
  std::string mode = "supervised";  // supervised | weakly_supervised | video
  int stage = 1;
  int64_t epochs_per_stage = 20;
  int64_t batch_size = 8;
  double lr_generator = 1e-4;
  double lr_critic = 2e-4;
  double lr_theta = 2e-4;
  int64_t critic_iters_per_gen = 5;
  int64_t alt_epochs = -1;      // -1: one third of epochs_per_stage
  int64_t steps_per_epoch = 0;  // set from the data unless pinned
  int64_t max_steps = 0;        // 0: uncapped
  int64_t eval_interval = 50;
  ObjectiveWeights weights;
  PenaltyState penalty;  // template for both cyclic directions
  uint64_t seed = 1234;
  EnhancerSpec enhancer;
  CriticSpec critic;

  int64_t resolved_alt_epochs() const {
    return alt_epochs < 0 ? epochs_per_stage / 3 : alt_epochs;
  }

  static TrainConfig from_config(const Config& c) {
    TrainConfig t;
    t.mode = c.get_string("trainer.mode");
    t.stage = static_cast<int>(c.get_int("trainer.stage"));
    t.epochs_per_stage = c.get_int("trainer.epochs_per_stage");
    t.batch_size = c.get_int("trainer.batch_size");
    t.lr_generator = c.get_double("trainer.lr_generator");
    t.lr_critic = c.get_double("trainer.lr_critic");
    t.lr_theta = c.get_double("trainer.lr_theta");
    t.critic_iters_per_gen = c.get_int("trainer.critic_iters_per_gen");
    t.alt_epochs = c.get_int("trainer.alt_epochs");
    t.max_steps = c.get_int("trainer.max_steps");
    t.eval_interval = c.get_int("trainer.eval_interval");
    t.weights.gamma1 = c.get_double("objective.gamma1");
    t.weights.gamma2 = c.get_double("objective.gamma2");
    t.penalty.lambda = c.get_double("penalty.lambda");
    t.penalty.eta = c.get_double("penalty.eta");
    t.penalty.tau = c.get_double("penalty.tau");
    t.penalty.lambda_min = c.get_double("penalty.lambda_min");
    t.penalty.lambda_max = c.get_double("penalty.lambda_max");
    t.seed = static_cast<uint64_t>(c.get_int("run.seed"));
    t.enhancer.depth = c.get_int("enhancer.depth");
    t.enhancer.base_channels = c.get_int("enhancer.base_channels");
    t.enhancer.beta = c.get_double("enhancer.beta");
    t.critic.depth = c.get_int("critic.depth");
    t.critic.base_channels = c.get_int("critic.base_channels");
    t.critic.feature_dim = c.get_int("critic.feature_dim");
    t.critic.slices = c.get_int("critic.slices");
    t.critic.window = c.get_int("critic.window");
    t.critic.blur.sigma = c.get_double("blur.sigma");
    t.critic.blur.radius = c.get_int("blur.radius");
    return t;
  }
};

/// Early training alternates the two perception branches per iteration;
/// afterwards everything (heads plus fusion convolutions) trains jointly.
inline BranchPhase branch_alternation_schedule(int64_t iteration, const TrainConfig& cfg) {
  if (iteration < 0) throw std::invalid_argument("branch_alternation_schedule: iteration < 0");
  int64_t spe = std::max<int64_t>(1, cfg.steps_per_epoch);
  if (iteration / spe >= cfg.resolved_alt_epochs()) return BranchPhase::kJoint;
  return iteration % 2 == 0 ? BranchPhase::kAdditive : BranchPhase::kMultiplicative;
}

/// Video epochs alternate sequence direction: even forward, odd backward.
inline bool recurrent_epoch_is_forward(int64_t epoch) { return epoch % 2 == 0; }

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

struct StepMetrics {
  int64_t iter = 0;
  int stage = 1;
  double loss_gan_fwd = 0, loss_gan_bwd = 0, loss_cycle = 0, loss_identity = 0;
  double lambda_fwd = 0, lambda_bwd = 0, grad_avg_fwd = 0, grad_avg_bwd = 0;
  double psnr_val = std::numeric_limits<double>::quiet_NaN();
  double msssim_val = std::numeric_limits<double>::quiet_NaN();
  double loss_recon = 0;
};

class MetricsCsv {
 public:
  static std::string header() {
    return "iter,stage,loss_gan_fwd,loss_gan_bwd,loss_cycle,loss_identity,lambda_fwd,"
           "lambda_bwd,grad_avg_fwd,grad_avg_bwd,psnr_val,msssim_val,loss_recon";
  }

  static std::string format(double v) {
    if (std::isnan(v)) return "";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  }

  static std::string row(const StepMetrics& m) {
    std::ostringstream os;
    os << m.iter << "," << m.stage << "," << format(m.loss_gan_fwd) << ","
       << format(m.loss_gan_bwd) << "," << format(m.loss_cycle) << "," << format(m.loss_identity)
       << "," << format(m.lambda_fwd) << "," << format(m.lambda_bwd) << ","
       << format(m.grad_avg_fwd) << "," << format(m.grad_avg_bwd) << "," << format(m.psnr_val)
       << "," << format(m.msssim_val) << "," << format(m.loss_recon);
    return os.str();
  }

  void append(const StepMetrics& m) { rows.push_back(m); }

  std::string serialize() const {
    std::string out = header() + "\n";
    for (const StepMetrics& m : rows) out += row(m) + "\n";
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write metrics csv " + path);
    f << serialize();
  }

  std::vector<StepMetrics> rows;
};

// ---------------------------------------------------------------------------
// Datasets as tensors
// ---------------------------------------------------------------------------

struct PairedTensors {
  std::vector<Tensor> x, y;  // index-aligned
};
struct UnpairedTensors {
  std::vector<Tensor> x, y;  // independent domains
};
struct VideoTensors {
  std::vector<std::vector<Tensor>> clips_x, clips_y;
};

inline std::vector<Tensor> resize_all(const std::vector<Tensor>& in, int64_t h, int64_t w) {
  std::vector<Tensor> out;
  out.reserve(in.size());
  for (const Tensor& t : in) out.push_back(resize(t, h, w, ResizeMode::kBilinear));
  return out;
}

// ---------------------------------------------------------------------------
// The trainer
// ---------------------------------------------------------------------------

struct CyclicGanSystem {
  Enhancer E, Ehat;
  std::optional<Critic> C, Chat;
  PenaltyState pen_fwd, pen_bwd;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg, std::string run_dir = "")
      : cfg_(std::move(cfg)), run_dir_(std::move(run_dir)), rng_(cfg_.seed) {}

  const MetricsCsv& metrics() const { return csv_; }
  TrainConfig& config() { return cfg_; }

  // -- systems ------------------------------------------------------------

  CyclicGanSystem build_system(bool with_critics) {
    CyclicGanSystem sys;
    sys.E = Enhancer(cfg_.enhancer, rng_);
    if (cfg_.mode != "supervised") sys.Ehat = Enhancer(cfg_.enhancer, rng_);
    if (with_critics) {
      sys.C = Critic(cfg_.critic, rng_);
      sys.Chat = Critic(cfg_.critic, rng_);
    }
    sys.pen_fwd = cfg_.penalty;
    sys.pen_bwd = cfg_.penalty;
    return sys;
  }

  EnhancerCheckpoint to_checkpoint(const CyclicGanSystem& sys, int stage, int64_t iteration) const {
    EnhancerCheckpoint ckpt;
    ckpt.iteration = iteration;
    ckpt.stage = stage;
    ckpt.mode = cfg_.mode;
    ckpt.enhancer_spec = sys.E.spec();
    ckpt.critic_spec = sys.C ? sys.C->spec() : cfg_.critic;
    ckpt.weights = cfg_.weights;
    ckpt.penalty_fwd = sys.pen_fwd;
    ckpt.penalty_bwd = sys.pen_bwd;
    store_params(ckpt, "E", sys.E.params());
    if (cfg_.mode != "supervised") store_params(ckpt, "Ehat", sys.Ehat.params());
    if (sys.C) store_params(ckpt, "C", sys.C->params());
    if (sys.Chat) store_params(ckpt, "Chat", sys.Chat->params());
    return ckpt;
  }

  CyclicGanSystem from_checkpoint(const EnhancerCheckpoint& ckpt) {
    CyclicGanSystem sys;
    sys.E = Enhancer(ckpt.enhancer_spec, rng_);
    restore_params(ckpt, "E", sys.E.params());
    if (ckpt.has_prefix("Ehat.")) {
      sys.Ehat = Enhancer(ckpt.enhancer_spec, rng_);
      restore_params(ckpt, "Ehat", sys.Ehat.params());
    }
    if (ckpt.has_prefix("C.")) {
      sys.C = Critic(ckpt.critic_spec, rng_);
      restore_params(ckpt, "C", sys.C->params());
    }
    if (ckpt.has_prefix("Chat.")) {
      sys.Chat = Critic(ckpt.critic_spec, rng_);
      restore_params(ckpt, "Chat", sys.Chat->params());
    }
    sys.pen_fwd = ckpt.penalty_fwd;
    sys.pen_bwd = ckpt.penalty_bwd;
    return sys;
  }

  // -- parameter selection --------------------------------------------------

  static std::vector<Var> select_generator_params(const Enhancer& net, BranchPhase phase,
                                                  bool stage2_frozen_core) {
    if (stage2_frozen_core) return net.params_new_scale_blocks();
    auto in = [](const std::vector<Var>& vs, const Var& v) {
      return std::find(vs.begin(), vs.end(), v) != vs.end();
    };
    std::vector<Var> all = net.params_all();
    if (phase == BranchPhase::kJoint) return all;
    std::vector<Var> frozen = phase == BranchPhase::kAdditive ? net.params_scale_head()
                                                              : net.params_residual_head();
    std::vector<Var> fusion = net.params_fusion();
    std::vector<Var> out;
    for (const Var& v : all)
      if (!in(frozen, v) && !in(fusion, v)) out.push_back(v);
    return out;
  }

  // -- supervised ------------------------------------------------------------

  EnhancerCheckpoint train_supervised(const PairedTensors& train, const PairedTensors& val) {
    CyclicGanSystem sys = build_system(false);
    run_supervised_loop(sys, train, val, /*stage=*/1, /*frozen_core=*/false);
    return to_checkpoint(sys, 1, iter_);
  }

  // -- weakly supervised -----------------------------------------------------

  struct CriticUpdateResult {
    double batch_grad_norm = 0;
  };

  /// One controller-trace entry per critic iteration: the post-update lambda
  /// and running average plus the batch gradient norm that drove them.
  struct PenaltyTracePoint {
    double lambda, avg, batch_grad_norm;
  };
  const std::vector<PenaltyTracePoint>& penalty_trace_fwd() const { return penalty_trace_fwd_; }
  const std::vector<PenaltyTracePoint>& penalty_trace_bwd() const { return penalty_trace_bwd_; }

  /// One critic update for a single cyclic direction. Follows the order:
  /// scores -> interpolates -> hinge penalty -> parameter step -> Stiefel
  /// step -> penalty controller update.
  CriticUpdateResult critic_update(Critic& critic, Adam& opt, const Tensor& real_batch,
                                   const Tensor& fake_batch, PenaltyState& state,
                                   std::vector<PenaltyTracePoint>& trace) {
    Var real_scores = critic.score_image_batch(constant(real_batch));
    Var fake_scores = critic.score_image_batch(constant(fake_batch));
    Tensor interp_t = sample_interpolates(real_batch, fake_batch, rng_);
    Var interp = leaf(std::move(interp_t));
    Var score_sum = critic.penalty_score_sum(interp);
    Var gin = grad(score_sum, {interp})[0];
    int64_t n = real_batch.dim(0);
    Var flat = reshape(gin, Shape{n, gin->value.numel() / n});
    Var norms = sqrt_v(add_scalar(row_sum(mul(flat, flat)), 1e-16));
    Var penalty = hinge_gradient_penalty_v(norms, state.lambda);
    Var loss = adaswgan_critic_loss_v(real_scores, fake_scores, penalty);
    if (!std::isfinite(loss->value[0]))
      throw TrainingDivergedError("critic loss is not finite");
    std::vector<Var> params = critic.params_all();
    std::vector<Var> with_theta = params;
    with_theta.push_back(critic.theta_var());
    zero_grad(with_theta);
    backward(loss, with_theta);
    opt.step(params);
    critic.stiefel_update(cfg_.lr_theta);
    CriticUpdateResult res;
    res.batch_grad_norm = norms->value.mean();
    state = update_penalty_weight(state, res.batch_grad_norm);
    trace.push_back({state.lambda, state.avg, res.batch_grad_norm});
    return res;
  }

  /// critic_iters_per_gen critic updates for both directions, then one
  /// generator update under the full objective. Returns the loss breakdown.
  StepMetrics train_step_weakly_supervised(const Tensor& batch_x, const Tensor& batch_y,
                                           CyclicGanSystem& sys, BranchPhase phase,
                                           bool stage2_frozen_core) {
    if (!sys.C || !sys.Chat)
      throw std::invalid_argument("train_step_weakly_supervised: critics missing");
    ensure_optimizers();
    StepMetrics m;
    for (int64_t i = 0; i < cfg_.critic_iters_per_gen; ++i) {
      Tensor fake_y = sys.E.forward(constant(batch_x), false)->value;
      Tensor fake_x = sys.Ehat.forward(constant(batch_y), false)->value;
      critic_update(*sys.C, *critic_opt_, batch_y, fake_y, sys.pen_fwd, penalty_trace_fwd_);
      critic_update(*sys.Chat, *critic_hat_opt_, batch_x, fake_x, sys.pen_bwd,
                    penalty_trace_bwd_);
    }
    CyclicGanParts parts{&sys.E, &sys.Ehat, &*sys.C, &*sys.Chat};
    GeneratorObjective obj =
        total_weakly_supervised_objective(parts, constant(batch_x), constant(batch_y),
                                          cfg_.weights, true, !stage2_frozen_core);
    if (!std::isfinite(obj.total->value[0]))
      throw TrainingDivergedError("generator objective is not finite");
    std::vector<Var> gen_params = select_generator_params(sys.E, phase, stage2_frozen_core);
    for (const Var& v : select_generator_params(sys.Ehat, phase, stage2_frozen_core))
      gen_params.push_back(v);
    zero_grad(gen_params);
    backward(obj.total, gen_params);
    gen_opt_->step(gen_params);
    m.loss_gan_fwd = obj.breakdown.gan_fwd;
    m.loss_gan_bwd = obj.breakdown.gan_bwd;
    m.loss_cycle = obj.breakdown.cycle;
    m.loss_identity = obj.breakdown.identity;
    m.lambda_fwd = sys.pen_fwd.lambda;
    m.lambda_bwd = sys.pen_bwd.lambda;
    m.grad_avg_fwd = sys.pen_fwd.avg;
    m.grad_avg_bwd = sys.pen_bwd.avg;
    return m;
  }

  EnhancerCheckpoint train_weakly_supervised(const UnpairedTensors& train,
                                             const PairedTensors& val) {
    CyclicGanSystem sys = build_system(true);
    run_weakly_loop(sys, train, val, 1, false);
    return to_checkpoint(sys, 1, iter_);
  }

  // -- staging ---------------------------------------------------------------

  /// Multiscale staging. Stage 1 trains the low-scale system at the given
  /// resolution; stage 2 extends to the doubled resolution and tunes only the
  /// fresh netG0/netG4 blocks; stage 3 trains the whole high-scale system.
  /// Data comes in at the high resolution; stage 1 downscales by two.
  EnhancerCheckpoint run_stage(int stage, const PairedTensors& train_high,
                               const PairedTensors& val_high,
                               std::optional<EnhancerCheckpoint> prior = std::nullopt) {
    if (stage < 1 || stage > 3) throw StagingError("run_stage: stage must be 1, 2 or 3");
    const int64_t high_h = train_high.x.at(0).dim(0), high_w = train_high.x.at(0).dim(1);
    bool weakly = cfg_.mode == "weakly_supervised";
    if (stage == 1) {
      PairedTensors train{resize_all(train_high.x, high_h / 2, high_w / 2),
                          resize_all(train_high.y, high_h / 2, high_w / 2)};
      PairedTensors val{resize_all(val_high.x, high_h / 2, high_w / 2),
                        resize_all(val_high.y, high_h / 2, high_w / 2)};
      CyclicGanSystem sys = build_system(weakly);
      if (weakly)
        run_weakly_loop(sys, UnpairedTensors{train.x, train.y}, val, 1, false);
      else
        run_supervised_loop(sys, train, val, 1, false);
      return to_checkpoint(sys, 1, iter_);
    }
    if (!prior)
      throw StagingError("run_stage: stage " + std::to_string(stage) +
                         " requires a prior checkpoint");
    if (stage == 2 && prior->stage != 1) throw StagingError("run_stage: stage 2 needs a stage-1 checkpoint");
    if (stage == 3 && prior->stage != 2) throw StagingError("run_stage: stage 3 needs a stage-2 checkpoint");
    CyclicGanSystem sys = from_checkpoint(*prior);
    if (sys.E.spec().scale_level == ScaleLevel::kLow) {
      // a low-scale checkpoint triggers the extension automatically
      sys.E = sys.E.extend_to_higher_scale(rng_);
      if (cfg_.mode != "supervised") sys.Ehat = sys.Ehat.extend_to_higher_scale(rng_);
      if (sys.C) sys.C = sys.C->extend_to_higher_scale(rng_);
      if (sys.Chat) sys.Chat = sys.Chat->extend_to_higher_scale(rng_);
    }
    bool frozen_core = stage == 2;
    if (weakly)
      run_weakly_loop(sys, UnpairedTensors{train_high.x, train_high.y}, val_high, stage,
                      frozen_core);
    else
      run_supervised_loop(sys, train_high, val_high, stage, frozen_core);
    return to_checkpoint(sys, stage, iter_);
  }

  // -- recurrent video ---------------------------------------------------------

  EnhancerCheckpoint train_recurrent_bidirectional(const VideoTensors& data,
                                                   bool bidirectional = true) {
    for (const auto& clip : data.clips_x)
      if (static_cast<int64_t>(clip.size()) < cfg_.critic.window)
        throw DataError("train_recurrent_bidirectional: clip shorter than the critic window");
    for (const auto& clip : data.clips_y)
      if (static_cast<int64_t>(clip.size()) < cfg_.critic.window)
        throw DataError("train_recurrent_bidirectional: clip shorter than the critic window");
    TrainConfig saved = cfg_;
    cfg_.enhancer.temporal = true;
    CyclicGanSystem sys = build_system(true);
    cfg_ = saved;
    ensure_optimizers();
    int64_t n_clips = static_cast<int64_t>(std::min(data.clips_x.size(), data.clips_y.size()));
    int64_t spe = cfg_.steps_per_epoch > 0 ? cfg_.steps_per_epoch : n_clips;
    for (int64_t epoch = 0; epoch < cfg_.epochs_per_stage; ++epoch) {
      bool forward = !bidirectional || recurrent_epoch_is_forward(epoch);
      std::vector<std::vector<int64_t>> order = make_batches(n_clips, 1, cfg_.seed, epoch);
      for (int64_t s = 0; s < spe; ++s) {
        int64_t ci = order[s % order.size()][0];
        StepMetrics m = recurrent_step(sys, data.clips_x[ci], data.clips_y[ci], forward);
        m.iter = iter_++;
        m.stage = 1;
        csv_.append(m);
        if (cfg_.max_steps > 0 && iter_ >= cfg_.max_steps) break;
      }
      if (cfg_.max_steps > 0 && iter_ >= cfg_.max_steps) break;
    }
    EnhancerCheckpoint ckpt = to_checkpoint(sys, 1, iter_);
    return ckpt;
  }

  /// One bidirectional video step on a clip pair. The critic loss averages
  /// the single-frame path and the sequential path; the hinge penalty runs on
  /// the single-frame path.
  StepMetrics recurrent_step(CyclicGanSystem& sys, const std::vector<Tensor>& clip_x,
                             const std::vector<Tensor>& clip_y, bool forward) {
    std::vector<Tensor> cx = clip_x, cy = clip_y;
    if (!forward) {
      std::reverse(cx.begin(), cx.end());
      std::reverse(cy.begin(), cy.end());
    }
    auto frames_of = [](const std::vector<Tensor>& clip) {
      std::vector<Var> out;
      for (const Tensor& f : clip)
        out.push_back(constant(f.reshaped({1, f.dim(0), f.dim(1), f.dim(2)})));
      return out;
    };
    std::vector<Var> fx = frames_of(cx), fy = frames_of(cy);

    StepMetrics m;
    for (int64_t i = 0; i < cfg_.critic_iters_per_gen; ++i) {
      std::vector<Var> fake_y_frames = sys.E.forward_recurrent(fx, false);
      std::vector<Var> fake_x_frames = sys.Ehat.forward_recurrent(fy, false);
      critic_update_video(*sys.C, *critic_opt_, cy, detach_all(fake_y_frames), sys.pen_fwd,
                          penalty_trace_fwd_);
      critic_update_video(*sys.Chat, *critic_hat_opt_, cx, detach_all(fake_x_frames),
                          sys.pen_bwd, penalty_trace_bwd_);
    }
    // generator update over the whole clip
    std::vector<Var> fake_y = sys.E.forward_recurrent(fx, true);
    std::vector<Var> fake_x = sys.Ehat.forward_recurrent(fy, true);
    Var gan_fwd = video_generator_gan(*sys.C, fake_y);
    Var gan_bwd = video_generator_gan(*sys.Chat, fake_x);
    std::vector<Var> cycle_x = sys.Ehat.forward_recurrent(fake_y, true);
    std::vector<Var> cycle_y = sys.E.forward_recurrent(fake_x, true);
    std::vector<Var> id_y = sys.E.forward_recurrent(fy, true);
    std::vector<Var> id_x = sys.Ehat.forward_recurrent(fx, true);
    Var cyc = add(frame_mse(cycle_x, fx), frame_mse(cycle_y, fy));
    Var ident = add(frame_mse(id_y, fy), frame_mse(id_x, fx));
    Var total = add(add(gan_fwd, gan_bwd),
                    add(scale(cyc, cfg_.weights.gamma1), scale(ident, cfg_.weights.gamma2)));
    if (!std::isfinite(total->value[0]))
      throw TrainingDivergedError("video generator objective is not finite");
    std::vector<Var> gen_params = sys.E.params_all();
    for (const Var& v : sys.Ehat.params_all()) gen_params.push_back(v);
    zero_grad(gen_params);
    backward(total, gen_params);
    gen_opt_->step(gen_params);
    m.loss_gan_fwd = gan_fwd->value[0];
    m.loss_gan_bwd = gan_bwd->value[0];
    m.loss_cycle = cyc->value[0];
    m.loss_identity = ident->value[0];
    m.lambda_fwd = sys.pen_fwd.lambda;
    m.lambda_bwd = sys.pen_bwd.lambda;
    m.grad_avg_fwd = sys.pen_fwd.avg;
    m.grad_avg_bwd = sys.pen_bwd.avg;
    return m;
  }

  // -- shared loops ------------------------------------------------------------

  void run_supervised_loop(CyclicGanSystem& sys, const PairedTensors& train,
                           const PairedTensors& val, int stage, bool frozen_core) {
    ensure_optimizers();
    std::map<std::string, Tensor> frozen_before;
    if (frozen_core) frozen_before = sys.E.inherited_block_values();
    int64_t n = static_cast<int64_t>(train.x.size());
    int64_t spe_data = (n + cfg_.batch_size - 1) / cfg_.batch_size;
    if (cfg_.steps_per_epoch == 0) cfg_.steps_per_epoch = spe_data;
    bool done = false;
    for (int64_t epoch = 0; epoch < cfg_.epochs_per_stage && !done; ++epoch) {
      auto batches = make_batches(n, cfg_.batch_size, cfg_.seed, epoch);
      for (int64_t s = 0; s < cfg_.steps_per_epoch && !done; ++s) {
        const auto& idx = batches[s % batches.size()];
        Tensor bx = stack_images(train.x, idx);
        Tensor by = stack_images(train.y, idx);
        BranchPhase phase = (stage >= 2 || frozen_core)
                                ? BranchPhase::kJoint
                                : branch_alternation_schedule(iter_, cfg_);
        Var loss = supervised_reconstruction_loss(
            [&](const Var& v) { return sys.E.forward(v, true, !frozen_core); }, constant(bx),
            constant(by));
        if (!std::isfinite(loss->value[0])) {
          dump_diagnostic(sys, stage);
          throw TrainingDivergedError("supervised loss is not finite at iter " +
                                      std::to_string(iter_));
        }
        std::vector<Var> params = select_generator_params(sys.E, phase, frozen_core);
        zero_grad(params);
        backward(loss, params);
        gen_opt_->step(params);
        StepMetrics m;
        m.iter = iter_;
        m.stage = stage;
        m.loss_recon = loss->value[0];
        maybe_eval(sys, val, m);
        csv_.append(m);
        ++iter_;
        if (cfg_.max_steps > 0 && iter_ >= cfg_.max_steps) done = true;
      }
    }
    if (frozen_core) verify_frozen(sys, frozen_before);
  }

  void run_weakly_loop(CyclicGanSystem& sys, const UnpairedTensors& train,
                       const PairedTensors& val, int stage, bool frozen_core) {
    ensure_optimizers();
    std::map<std::string, Tensor> frozen_before;
    if (frozen_core) frozen_before = sys.E.inherited_block_values();
    int64_t nx = static_cast<int64_t>(train.x.size());
    int64_t ny = static_cast<int64_t>(train.y.size());
    int64_t spe_data = (std::min(nx, ny) + cfg_.batch_size - 1) / cfg_.batch_size;
    if (cfg_.steps_per_epoch == 0) cfg_.steps_per_epoch = spe_data;
    bool done = false;
    for (int64_t epoch = 0; epoch < cfg_.epochs_per_stage && !done; ++epoch) {
      auto bx = make_batches(nx, cfg_.batch_size, cfg_.seed, epoch);
      auto by = make_batches(ny, cfg_.batch_size, cfg_.seed ^ 0x5bd1e995, epoch);
      for (int64_t s = 0; s < cfg_.steps_per_epoch && !done; ++s) {
        Tensor batch_x = stack_images(train.x, bx[s % bx.size()]);
        Tensor batch_y = stack_images(train.y, by[s % by.size()]);
        if (batch_x.dim(0) != batch_y.dim(0)) {
          int64_t nmin = std::min(batch_x.dim(0), batch_y.dim(0));
          batch_x = first_n(batch_x, nmin);
          batch_y = first_n(batch_y, nmin);
        }
        BranchPhase phase = (stage >= 2 || frozen_core)
                                ? BranchPhase::kJoint
                                : branch_alternation_schedule(iter_, cfg_);
        StepMetrics m;
        try {
          m = train_step_weakly_supervised(batch_x, batch_y, sys, phase, frozen_core);
        } catch (const TrainingDivergedError&) {
          dump_diagnostic(sys, stage);
          throw;
        }
        m.iter = iter_;
        m.stage = stage;
        maybe_eval(sys, val, m);
        csv_.append(m);
        ++iter_;
        if (cfg_.max_steps > 0 && iter_ >= cfg_.max_steps) done = true;
      }
    }
    if (frozen_core) verify_frozen(sys, frozen_before);
  }

  double eval_psnr(const Enhancer& E, const PairedTensors& val) const {
    double acc = 0;
    for (size_t i = 0; i < val.x.size(); ++i) acc += psnr(E.enhance(val.x[i]), val.y[i]);
    return acc / static_cast<double>(val.x.size());
  }

  double eval_msssim(const Enhancer& E, const PairedTensors& val) const {
    double acc = 0;
    for (size_t i = 0; i < val.x.size(); ++i) {
      Tensor out = E.enhance(val.x[i]);
      int scales = std::min(3, msssim_max_scales(out.dim(0), out.dim(1)));
      acc += scales >= 1 ? ms_ssim(out, val.y[i], scales) : 0.0;
    }
    return acc / static_cast<double>(val.x.size());
  }

  int64_t iteration() const { return iter_; }

 private:
  static Tensor first_n(const Tensor& batch, int64_t n) {
    Shape s = batch.shape();
    int64_t stride = batch.numel() / s[0];
    Shape out_shape = s;
    out_shape[0] = n;
    Tensor out(out_shape);
    std::copy(batch.data(), batch.data() + n * stride, out.data());
    return out;
  }

  static std::vector<Var> detach_all(const std::vector<Var>& vs) {
    std::vector<Var> out;
    for (const Var& v : vs) out.push_back(constant(v->value));
    return out;
  }

  Var frame_mse(const std::vector<Var>& a, const std::vector<Var>& b) const {
    Var acc = mse(a[0], b[0]);
    for (size_t i = 1; i < a.size(); ++i) acc = add(acc, mse(a[i], b[i]));
    return scale(acc, 1.0 / static_cast<double>(a.size()));
  }

  Var video_generator_gan(const Critic& critic, const std::vector<Var>& frames) const {
    Var singles = adaswgan_generator_loss_v(critic.score_image_batch(concat_batch(frames)));
    auto windows = clip_windows(static_cast<int64_t>(frames.size()), critic.spec().window);
    std::vector<Var> window_scores;
    for (const auto& w : windows) {
      std::vector<Var> sel;
      for (int64_t t : w) sel.push_back(frames[t]);
      window_scores.push_back(critic.sequential_score(sel));
    }
    Var seq = adaswgan_generator_loss_v(concat_batch(window_scores));
    return scale(add(singles, seq), 0.5);
  }

  void critic_update_video(Critic& critic, Adam& opt, const std::vector<Tensor>& real_clip,
                           const std::vector<Var>& fake_frames, PenaltyState& state,
                           std::vector<PenaltyTracePoint>& trace) {
    std::vector<Var> real_frames;
    for (const Tensor& f : real_clip)
      real_frames.push_back(constant(f.reshaped({1, f.dim(0), f.dim(1), f.dim(2)})));
    Var real_single = critic.score_image_batch(concat_batch(real_frames));
    Var fake_single = critic.score_image_batch(concat_batch(fake_frames));
    auto score_windows = [&](const std::vector<Var>& frames) {
      auto windows = clip_windows(static_cast<int64_t>(frames.size()), critic.spec().window);
      std::vector<Var> scores;
      for (const auto& w : windows) {
        std::vector<Var> sel;
        for (int64_t t : w) sel.push_back(frames[t]);
        scores.push_back(critic.sequential_score(sel));
      }
      return concat_batch(scores);
    };
    Var real_seq = score_windows(real_frames);
    Var fake_seq = score_windows(fake_frames);
    // hinge penalty on the single-frame path
    Tensor real_stack = concat_batch(real_frames)->value;
    Tensor fake_stack = concat_batch(fake_frames)->value;
    Tensor interp_t = sample_interpolates(real_stack, fake_stack, rng_);
    Var interp = leaf(std::move(interp_t));
    Var gin = grad(critic.penalty_score_sum(interp), {interp})[0];
    int64_t n = real_stack.dim(0);
    Var flat = reshape(gin, Shape{n, gin->value.numel() / n});
    Var norms = sqrt_v(add_scalar(row_sum(mul(flat, flat)), 1e-16));
    Var penalty = hinge_gradient_penalty_v(norms, state.lambda);
    Var loss_single = adaswgan_critic_loss_v(real_single, fake_single, penalty);
    Var loss_seq = adaswgan_critic_loss_v(real_seq, fake_seq, constant(Tensor::scalar(0.0)));
    Var loss = scale(add(loss_single, loss_seq), 0.5);
    if (!std::isfinite(loss->value[0]))
      throw TrainingDivergedError("video critic loss is not finite");
    std::vector<Var> params = critic.params_all();
    std::vector<Var> with_theta = params;
    with_theta.push_back(critic.theta_var());
    zero_grad(with_theta);
    backward(loss, with_theta);
    opt.step(params);
    critic.stiefel_update(cfg_.lr_theta);
    state = update_penalty_weight(state, norms->value.mean());
    trace.push_back({state.lambda, state.avg, norms->value.mean()});
  }

  /// Concatenate same-shape [N,...] vars along the batch axis.
  static Var concat_batch(const std::vector<Var>& frames) {
    if (frames.size() == 1) return frames[0];
    std::vector<Var> rows;
    rows.reserve(frames.size());
    for (const Var& f : frames) rows.push_back(reshape(f, Shape{1, f->value.numel()}));
    Var cat = concat_last(rows);
    Shape out = frames[0]->value.shape();
    out[0] *= static_cast<int64_t>(frames.size());
    return reshape(cat, out);
  }

  void maybe_eval(const CyclicGanSystem& sys, const PairedTensors& val, StepMetrics& m) {
    if (val.x.empty()) return;
    if (cfg_.eval_interval <= 0) return;
    if (iter_ % cfg_.eval_interval != 0 && !(cfg_.max_steps > 0 && iter_ + 1 == cfg_.max_steps))
      return;
    m.psnr_val = eval_psnr(sys.E, val);
    m.msssim_val = eval_msssim(sys.E, val);
  }

  void verify_frozen(const CyclicGanSystem& sys, const std::map<std::string, Tensor>& before) {
    std::map<std::string, Tensor> after = sys.E.inherited_block_values();
    for (const auto& [name, t] : before) {
      const Tensor& now = after.at(name);
      for (int64_t i = 0; i < t.numel(); ++i)
        if (t[i] != now[i])
          throw std::logic_error("stage-2 freeze violated for block " + name);
    }
  }

  void dump_diagnostic(const CyclicGanSystem& sys, int stage) {
    if (run_dir_.empty()) return;
    try {
      save_checkpoint(to_checkpoint(sys, stage, iter_), run_dir_ + "/diverged.dckpt");
    } catch (...) {
    }
  }

  void ensure_optimizers() {
    if (!gen_opt_) gen_opt_.emplace(cfg_.lr_generator);
    if (!critic_opt_) critic_opt_.emplace(cfg_.lr_critic);
    if (!critic_hat_opt_) critic_hat_opt_.emplace(cfg_.lr_critic);
  }

  TrainConfig cfg_;
  std::string run_dir_;
  std::mt19937_64 rng_;
  MetricsCsv csv_;
  int64_t iter_ = 0;
  std::optional<Adam> gen_opt_, critic_opt_, critic_hat_opt_;
  std::vector<PenaltyTracePoint> penalty_trace_fwd_, penalty_trace_bwd_;
};

}  // namespace dacal

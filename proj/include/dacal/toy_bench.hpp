#pragma once

#include "dacal/adaswgan.hpp"

// Desk-scale reproduction of the 25-Gaussians comparison: AdaSWGAN (sliced
// critic, Stiefel-updated directions, adaptive penalty weight) against plain
// WGAN-GP (single slice, fixed penalty weight), with identical generator and
// critic backbones, plus quantitative mode-coverage metrics and a critic
// value surface.

namespace dacal {

enum class ToyVariant { kWganGp, kAdaswgan };

inline std::string to_string(ToyVariant v) {
  return v == ToyVariant::kWganGp ? "wgan_gp" : "adaswgan";
}

struct ToyConfig {
  int64_t grid_size = 5;      // 5x5 = 25 modes
  double grid_extent = 2.0;   // centres on the lattice over [-extent, extent]^2
  double sigma = 0.05;        // per-mode standard deviation
  int64_t iterations = 5000;
  ToyVariant variant = ToyVariant::kAdaswgan;
  int64_t batch_size = 128;
  double lr = 3e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.9;
  int64_t hidden = 128;   // width of the 3 hidden layers (also the feature dim)
  int64_t slices = 16;    // k for the adaswgan variant; the wgan_gp variant uses 1
  int64_t critic_iters = 5;
  uint64_t seed = 1234;
  PenaltyState penalty;   // adaptive for adaswgan; lambda held fixed for wgan_gp
  std::vector<int64_t> checkpoints{1000, 2500, 5000};
  int64_t eval_samples = 2048;
  int64_t surface_resolution = 128;

  void validate() const {
    if (grid_size != 5) throw std::invalid_argument("ToyConfig: grid_size must be 5 (25 modes)");
    if (sigma <= 0 || iterations < 1 || batch_size < 1 || hidden < 1 || slices < 1)
      throw std::invalid_argument("ToyConfig: invalid fields");
  }
  int64_t k() const { return variant == ToyVariant::kWganGp ? 1 : slices; }
};

/// Points drawn by picking one of the 25 lattice centres uniformly and adding
/// isotropic Gaussian noise.
inline Tensor sample_grid_gaussians(const ToyConfig& cfg, int64_t n, std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("sample_grid_gaussians: n must be >= 1");
  Tensor out({n, 2});
  std::uniform_int_distribution<int64_t> pick(0, cfg.grid_size * cfg.grid_size - 1);
  std::normal_distribution<double> noise(0.0, cfg.sigma);
  double step = 2.0 * cfg.grid_extent / (cfg.grid_size - 1);
  for (int64_t i = 0; i < n; ++i) {
    int64_t c = pick(rng);
    double cx = -cfg.grid_extent + step * (c % cfg.grid_size);
    double cy = -cfg.grid_extent + step * (c / cfg.grid_size);
    out.at2(i, 0) = cx + noise(rng);
    out.at2(i, 1) = cy + noise(rng);
  }
  return out;
}

struct ModeCoverage {
  int modes_covered = 0;
  double high_quality_fraction = 0.0;
};

/// A mode counts as covered when at least one sample lies within 3 sigma of
/// its centre; the high-quality fraction is the share of samples within
/// 3 sigma of any centre.
inline ModeCoverage mode_coverage_metrics(const Tensor& samples, const ToyConfig& cfg) {
  if (samples.rank() != 2 || samples.dim(1) != 2 || samples.dim(0) < 1)
    throw std::invalid_argument("mode_coverage_metrics: need [n,2] samples");
  double step = 2.0 * cfg.grid_extent / (cfg.grid_size - 1);
  double r2 = 9.0 * cfg.sigma * cfg.sigma;
  std::vector<bool> covered(static_cast<size_t>(cfg.grid_size * cfg.grid_size), false);
  int64_t hq = 0;
  for (int64_t i = 0; i < samples.dim(0); ++i) {
    double x = samples.at2(i, 0), y = samples.at2(i, 1);
    bool near_any = false;
    for (int64_t c = 0; c < cfg.grid_size * cfg.grid_size; ++c) {
      double cx = -cfg.grid_extent + step * (c % cfg.grid_size);
      double cy = -cfg.grid_extent + step * (c / cfg.grid_size);
      double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy <= r2) {
        covered[c] = true;
        near_any = true;
      }
    }
    if (near_any) ++hq;
  }
  ModeCoverage out;
  for (bool b : covered)
    if (b) ++out.modes_covered;
  out.high_quality_fraction = static_cast<double>(hq) / samples.dim(0);
  return out;
}

// ---------------------------------------------------------------------------
// Toy networks (identical backbones across variants)
// ---------------------------------------------------------------------------

struct ToyMlp {
  ParamStore ps;
  Linear l1, l2, l3, l4;  // generator: 2 -> h -> h -> h -> 2
  ToyMlp() = default;
  ToyMlp(int64_t hidden, std::mt19937_64& rng) {
    l1 = Linear(ps, "g.l1", 2, hidden, rng);
    l2 = Linear(ps, "g.l2", hidden, hidden, rng);
    l3 = Linear(ps, "g.l3", hidden, hidden, rng);
    l4 = Linear(ps, "g.l4", hidden, 2, rng);
  }
  Var forward(const Var& z) const {
    return l4.forward(relu(l3.forward(relu(l2.forward(relu(l1.forward(z)))))));
  }
  int64_t param_count() const {
    int64_t n = 0;
    for (const Var& v : ps.trainable()) n += v->value.numel();
    return n;
  }
};

struct ToyCritic {
  ParamStore ps;
  Linear l1, l2, l3;  // backbone: 2 -> h -> h -> h (features)
  Var theta_var;
  int64_t hidden = 0;
  ToyCritic() = default;
  ToyCritic(int64_t hidden_, int64_t k, std::mt19937_64& rng) : hidden(hidden_) {
    l1 = Linear(ps, "d.l1", 2, hidden, rng);
    l2 = Linear(ps, "d.l2", hidden, hidden, rng);
    l3 = Linear(ps, "d.l3", hidden, hidden, rng);
    theta_var = ps.add("netS1", init_projections(hidden, k, rng).matrix);
  }
  Var features(const Var& p) const {
    return relu(l3.forward(relu(l2.forward(relu(l1.forward(p))))));
  }
  Var scores(const Var& p) const { return matmul(features(p), theta_var); }
  /// Mean slice value summed over the batch (gradient-penalty scalar).
  Var penalty_score_sum(const Var& p) const {
    return scale(sum_all(scores(p)), 1.0 / static_cast<double>(theta_var->value.dim(1)));
  }
  Var value_at(const Var& p) const {  // mean slice value per point
    return scale(row_sum(scores(p)), 1.0 / static_cast<double>(theta_var->value.dim(1)));
  }
  std::vector<Var> backbone_params() const {
    std::vector<Var> out;
    for (const auto& [kk, v] : ps.items())
      if (v->requires_grad && kk != "netS1") out.push_back(v);
    return out;
  }
  int64_t backbone_param_count() const {
    int64_t n = 0;
    for (const Var& v : backbone_params()) n += v->value.numel();
    return n;
  }
  StiefelProjection theta() const { return StiefelProjection(theta_var->value); }
  void stiefel_update(double lr) {
    if (!theta_var->grad) return;
    theta_var->value = stiefel_step(theta(), theta_var->grad->value, lr).matrix;
  }
};

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

struct ToyMetricRow {
  int64_t iteration = 0;
  double critic_loss = 0, generator_loss = 0, lambda = 0, grad_avg = 0;
  int modes_covered = 0;
  double high_quality_fraction = 0;
};

struct ToyResult {
  ToyVariant variant;
  std::map<int64_t, Tensor> samples_at;  // checkpoint iteration -> [n,2]
  Tensor value_surface;                  // [S,S] mean slice value
  double surface_min = -3.0, surface_max = 3.0;
  std::vector<ToyMetricRow> history;     // one row per checkpoint
  int64_t generator_param_count = 0;
  int64_t critic_backbone_param_count = 0;
  bool diverged = false;
};

namespace detail {
struct ToyDiverged {};
}  // namespace detail

/// Trains the chosen variant and emits samples at the configured checkpoint
/// iterations, the critic value surface, and the metric history. Divergence
/// is recorded in the history and the run continues from the last state.
inline ToyResult run_toy_experiment(const ToyConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  ToyMlp gen(cfg.hidden, rng);
  ToyCritic critic(cfg.hidden, cfg.k(), rng);
  Adam gen_opt(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
  Adam critic_opt(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
  PenaltyState pen = cfg.penalty;
  const bool adaptive = cfg.variant == ToyVariant::kAdaswgan;

  ToyResult out;
  out.variant = cfg.variant;
  out.generator_param_count = gen.param_count();
  out.critic_backbone_param_count = critic.backbone_param_count();

  std::normal_distribution<double> zdist(0.0, 1.0);
  auto noise = [&](int64_t n) {
    Tensor z({n, 2});
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = zdist(rng);
    return z;
  };
  double last_critic = 0, last_gen = 0;

  for (int64_t it = 1; it <= cfg.iterations; ++it) {
    try {
      for (int64_t ci = 0; ci < cfg.critic_iters; ++ci) {
        Tensor real = sample_grid_gaussians(cfg, cfg.batch_size, rng);
        Tensor fake = gen.forward(constant(noise(cfg.batch_size)))->value;
        Var real_scores = critic.scores(constant(real));
        Var fake_scores = critic.scores(constant(fake));
        Var interp = leaf(sample_interpolates(real, fake, rng));
        Var gin = grad(critic.penalty_score_sum(interp), {interp})[0];
        Var norms = sqrt_v(add_scalar(row_sum(mul(gin, gin)), 1e-16));
        Var penalty = hinge_gradient_penalty_v(norms, pen.lambda);
        Var loss = adaswgan_critic_loss_v(real_scores, fake_scores, penalty);
        if (!std::isfinite(loss->value[0])) throw detail::ToyDiverged{};
        std::vector<Var> params = critic.backbone_params();
        std::vector<Var> with_theta = params;
        with_theta.push_back(critic.theta_var);
        zero_grad(with_theta);
        backward(loss, with_theta);
        critic_opt.step(params);
        critic.stiefel_update(cfg.lr);
        if (adaptive) pen = update_penalty_weight(pen, norms->value.mean());
        last_critic = loss->value[0];
      }
      Var fake_scores = critic.scores(gen.forward(constant(noise(cfg.batch_size))));
      Var gen_loss = adaswgan_generator_loss_v(fake_scores);
      if (!std::isfinite(gen_loss->value[0])) throw detail::ToyDiverged{};
      std::vector<Var> gparams = gen.ps.trainable();
      zero_grad(gparams);
      backward(gen_loss, gparams);
      gen_opt.step(gparams);
      last_gen = gen_loss->value[0];
    } catch (const detail::ToyDiverged&) {
      out.diverged = true;  // keep the last valid state, keep going
    }

    if (std::find(cfg.checkpoints.begin(), cfg.checkpoints.end(), it) != cfg.checkpoints.end()) {
      Tensor samples = gen.forward(constant(noise(cfg.eval_samples)))->value;
      ModeCoverage mc = mode_coverage_metrics(samples, cfg);
      out.samples_at[it] = samples;
      ToyMetricRow row;
      row.iteration = it;
      row.critic_loss = last_critic;
      row.generator_loss = last_gen;
      row.lambda = pen.lambda;
      row.grad_avg = pen.avg;
      row.modes_covered = mc.modes_covered;
      row.high_quality_fraction = mc.high_quality_fraction;
      out.history.push_back(row);
    }
  }

  // critic value surface on a regular grid
  const int64_t s = cfg.surface_resolution;
  Tensor grid({s * s, 2});
  for (int64_t i = 0; i < s; ++i)
    for (int64_t j = 0; j < s; ++j) {
      grid.at2(i * s + j, 0) = out.surface_min + (out.surface_max - out.surface_min) * j / (s - 1);
      grid.at2(i * s + j, 1) = out.surface_min + (out.surface_max - out.surface_min) * i / (s - 1);
    }
  out.value_surface = critic.value_at(constant(grid))->value.reshaped({s, s});
  return out;
}


}  // namespace dacal

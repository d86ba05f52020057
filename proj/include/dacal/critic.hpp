#pragma once

#include "dacal/adaswgan.hpp"
#include "dacal/image_ops.hpp"

// Frequency-divided critic: one shared convolutional backbone scores a
// Gaussian-blurred RGB view (low frequencies) and a grayscale view (high
// frequencies) through per-frequency 1x1 input adapters; the resulting
// n-vector features project onto the learned slicing directions. A window
// adapter reuses the same backbone for stacked consecutive frames.

namespace dacal {

struct CriticSpec {
  int64_t depth = 3;
  int64_t base_channels = 32;
  int64_t feature_dim = 64;         // n
  int64_t slices = 32;              // k
  int64_t window = 3;               // consecutive frames for the video path
  ScaleLevel scale_level = ScaleLevel::kLow;
  BlurKernel blur{3.0, 9};

  void validate() const {
    if (depth < 1 || base_channels < 1 || feature_dim < 1 || slices < 1 ||
        slices > feature_dim || window < 1)
      throw std::invalid_argument("CriticSpec: invalid fields (need 1 <= k <= n)");
  }
  int64_t channels_at(int64_t stage) const { return base_channels << (stage - 1); }
};

struct FrequencyPair {
  Var low;   // blurred RGB, 3 channels
  Var high;  // grayscale, 1 channel
};

class Critic {
 public:
  Critic() = default;

  Critic(CriticSpec spec, std::mt19937_64& rng) : spec_(spec) {
    spec_.validate();
    adapter_rgb_ = Conv2d(ps_, "netD1.adapter_rgb", 3, 3, 1, 1, rng);
    adapter_gray_ = Conv2d(ps_, "netD1.adapter_gray", 1, 3, 1, 1, rng);
    adapter_seq_ = Conv2d(ps_, "netD1.adapter_seq", 3 * spec_.window, 3, 1, 1, rng);
    conv_.resize(spec_.depth);
    for (int64_t i = 1; i <= spec_.depth; ++i) {
      int64_t in = i == 1 ? 3 : spec_.channels_at(i - 1);
      conv_[i - 1] = Conv2d(ps_, "netD1.conv" + std::to_string(i), in, spec_.channels_at(i), 3, 2, rng);
    }
    feat_conv_ = Conv2d(ps_, "netD1.feat", spec_.channels_at(spec_.depth), spec_.feature_dim, 1, 1, rng);
    if (spec_.scale_level == ScaleLevel::kHigh)
      stem_ = Conv2d(ps_, "netD0.stem", 3, 3, 3, 2, rng);
    theta_var_ = ps_.add("netS1", init_projections(spec_.feature_dim, spec_.slices, rng).matrix);
  }

  const CriticSpec& spec() const { return spec_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  StiefelProjection theta() const { return StiefelProjection(theta_var_->value); }
  Var theta_var() const { return theta_var_; }

  /// Riemannian update of the slicing directions from the accumulated
  /// gradient; a no-op when no gradient reached theta.
  void stiefel_update(double lr) {
    if (!theta_var_->grad) return;
    theta_var_->value = stiefel_step(theta(), theta_var_->grad->value, lr).matrix;
  }

  /// Low/high frequency views of an RGB batch, on the tape so critic losses
  /// backprop into the generator through both paths.
  FrequencyPair frequency_inputs(const Var& img) const {
    const Shape& s = img->value.shape();
    if (s.size() != 4 || s[3] != 3)
      throw ChannelMismatchError("frequency_inputs: expected an RGB batch");
    FrequencyPair out;
    out.low = blur_on_tape(img);
    out.high = grayscale_on_tape(img);
    return out;
  }

  /// Backbone features: one n-vector per image, any valid spatial size.
  /// 1- and 3-channel inputs route through their frequency adapter.
  Var critic_features(const Var& img) const {
    const Shape& s = img->value.shape();
    if (s.size() != 4) throw ShapeError("critic_features: need NHWC");
    Var h;
    if (s[3] == 3)
      h = adapter_rgb_.forward(img);
    else if (s[3] == 1)
      h = adapter_gray_.forward(img);
    else if (s[3] == 3 * spec_.window)
      h = adapter_seq_.forward(img);
    else
      throw ChannelMismatchError("critic_features: unsupported channel count " +
                                 std::to_string(s[3]));
    return backbone(h);
  }

  /// theta^T f on the tape; each coordinate is one 1-D critic value.
  Var project(const Var& feat) const { return matmul(feat, theta_var_); }

  /// Mean of the sliced scores of the two frequency views. [N, k] output.
  Var frequency_averaged_score(const FrequencyPair& pair) const {
    Var low = project(critic_features(pair.low));
    Var high = project(critic_features(pair.high));
    return scale(add(low, high), 0.5);
  }

  Var score_image_batch(const Var& img) const {
    return frequency_averaged_score(frequency_inputs(img));
  }

  /// Scores a window of consecutive frames stacked channel-wise. [N, k].
  /// A window of 1 degenerates to the single-frame scoring path.
  Var sequential_score(const std::vector<Var>& window) const {
    if (static_cast<int64_t>(window.size()) != spec_.window)
      throw ShapeError("sequential_score: expected window of " + std::to_string(spec_.window));
    for (const Var& f : window)
      if (!f->value.same_shape(window[0]->value))
        throw ShapeError("sequential_score: inconsistent frame shapes");
    if (spec_.window == 1) return score_image_batch(window[0]);
    return project(critic_features(concat_last(window)));
  }

  /// Differentiable scalar used for the gradient penalty: mean over slices of
  /// the frequency-averaged score, summed over the batch.
  Var penalty_score_sum(const Var& img) const {
    return scale(sum_all(score_image_batch(img)), 1.0 / static_cast<double>(spec_.slices));
  }

  /// High-scale critic: inherits netD1 and netS1 bit-exactly, adds a fresh
  /// netD0 stem for the doubled resolution.
  Critic extend_to_higher_scale(std::mt19937_64& rng) const {
    if (spec_.scale_level != ScaleLevel::kLow)
      throw CheckpointError("critic extend_to_higher_scale: source must be low-scale");
    CriticSpec high = spec_;
    high.scale_level = ScaleLevel::kHigh;
    Critic out(high, rng);
    for (const auto& [name, var] : ps_.items()) out.ps_.at(name)->value = var->value;
    return out;
  }

  /// Trainable backbone/adapter parameters; theta is updated on the Stiefel
  /// manifold, never by the optimizer.
  std::vector<Var> params_all() const {
    std::vector<Var> out;
    for (const auto& [k, v] : ps_.items())
      if (v->requires_grad && k != "netS1") out.push_back(v);
    return out;
  }
  std::vector<Var> params_new_scale_blocks() const {
    return ps_.trainable_with_prefix("netD0.");
  }

 private:
  Var backbone(Var h) const {
    if (spec_.scale_level == ScaleLevel::kHigh) h = selu(stem_.forward(h));
    for (const Conv2d& c : conv_) h = selu(c.forward(h));
    Var pooled = global_avg_pool(h);  // [N,1,1,C]
    Var feat = feat_conv_.forward(pooled);
    const Shape& s = feat->value.shape();
    return reshape(feat, Shape{s[0], spec_.feature_dim});
  }

  // Separable Gaussian as two gather + weighted sequential-sum passes. The
  // accumulation order matches image_ops::gaussian_blur exactly, so the low
  // frequency view is bit-identical to the plain function (delegation
  // contract) while remaining differentiable.
  Var blur_on_tape(const Var& img) const {
    const Shape& s = img->value.shape();
    std::vector<double> w1 = spec_.blur.weights();
    const int64_t t = 2 * spec_.blur.radius + 1;
    const int64_t rows = s[0] * s[1] * s[2] * 3;
    if (!(blur_shape_ == s) || !blur_htable_) {
      blur_htable_ = build_tap_table(s, t, /*horizontal=*/true);
      blur_vtable_ = build_tap_table(s, t, /*horizontal=*/false);
      Tensor wts({rows, t});
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < t; ++i) wts.at2(r, i) = w1[i];
      blur_weights_ = constant(std::move(wts));
      blur_shape_ = s;
    }
    Var taps = gather(img, blur_htable_, Shape{rows, t});
    Var h = reshape(row_sum_seq(mul(taps, blur_weights_)), s);
    taps = gather(h, blur_vtable_, Shape{rows, t});
    return reshape(row_sum_seq(mul(taps, blur_weights_)), s);
  }

  // (pixel, channel)-major taps along one axis with replicate clamping.
  IndexTable build_tap_table(const Shape& s, int64_t t, bool horizontal) const {
    const int64_t r = spec_.blur.radius;
    auto table = std::make_shared<std::vector<int64_t>>(
        static_cast<size_t>(s[0] * s[1] * s[2] * 3 * t));
    size_t p = 0;
    for (int64_t n = 0; n < s[0]; ++n)
      for (int64_t y = 0; y < s[1]; ++y)
        for (int64_t x = 0; x < s[2]; ++x)
          for (int64_t c = 0; c < 3; ++c)
            for (int64_t i = -r; i <= r; ++i) {
              int64_t sy = horizontal ? y : std::clamp<int64_t>(y + i, 0, s[1] - 1);
              int64_t sx = horizontal ? std::clamp<int64_t>(x + i, 0, s[2] - 1) : x;
              (*table)[p++] = ((n * s[1] + sy) * s[2] + sx) * 3 + c;
            }
    return table;
  }

  Var grayscale_on_tape(const Var& img) const {
    const Shape& s = img->value.shape();
    const int64_t rows = s[0] * s[1] * s[2];
    Tensor wts({rows, 3});
    for (int64_t r = 0; r < rows; ++r) {
      wts.at2(r, 0) = 0.299;
      wts.at2(r, 1) = 0.587;
      wts.at2(r, 2) = 0.114;
    }
    Var flat = reshape(img, Shape{rows, 3});
    return reshape(row_sum_seq(mul(flat, constant(std::move(wts)))), Shape{s[0], s[1], s[2], 1});
  }

  CriticSpec spec_;
  ParamStore ps_;
  Conv2d adapter_rgb_, adapter_gray_, adapter_seq_;
  std::vector<Conv2d> conv_;
  Conv2d feat_conv_, stem_;
  Var theta_var_;
  mutable Shape blur_shape_;
  mutable IndexTable blur_htable_, blur_vtable_;
  mutable Var blur_weights_;
};

}  // namespace dacal

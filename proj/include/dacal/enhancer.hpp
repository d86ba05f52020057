#pragma once

#include "dacal/image_ops.hpp"
#include "dacal/nn.hpp"

// The perception-divided two-stream U-Net enhancer: shared encoder/decoder
// with skip connections and a size-agnostic global feature, additive and
// multiplicative heads fused as x + r + beta*(x/s), plus the multiscale stem
// and head (netG0/netG4) and the recurrent variant for frame sequences.

namespace dacal {

struct EnhancerSpec {
  int64_t depth = 4;
  int64_t base_channels = 16;
  double beta = 1.0;
  ScaleLevel scale_level = ScaleLevel::kLow;
  bool temporal = false;  // recurrent variant: triple-frame input and skips

  void validate() const {
    if (depth < 1 || base_channels < 1 || beta < 0)
      throw std::invalid_argument("EnhancerSpec: invalid fields");
  }
  int64_t channels_at(int64_t stage) const {  // stage in [1, depth]
    return base_channels << (stage - 1);
  }
  /// Total downsampling factor the input must be divisible by.
  int64_t divisor() const {
    return int64_t{1} << (depth + (scale_level == ScaleLevel::kHigh ? 1 : 0));
  }
};

struct PerceptionPair {
  Var residual;  // r_x, unbounded
  Var scale;     // s_x, strictly positive by construction
};

struct EncoderOutput {
  std::vector<Var> skip_maps;  // strides 2^1 .. 2^depth
  Var global_vector;           // [N,1,1,G] regardless of input size
};

/// Raw Eq-style fusion x + r + beta*(x / s), before the closing convolutions
/// and the clamp. Exposed separately so unit tests can pin the arithmetic.
inline Var fuse_raw(const Var& x, const PerceptionPair& p, double beta) {
  if (p.scale->value.min() <= 0.0)
    throw DomainError("fuse_raw: scale component must be strictly positive");
  check_same_shape(x, p.residual, "fuse_raw");
  check_same_shape(x, p.scale, "fuse_raw");
  return add(add(x, p.residual), scale(divide(x, p.scale), beta));
}

class Enhancer {
 public:
  Enhancer() = default;

  Enhancer(EnhancerSpec spec, std::mt19937_64& rng) : spec_(spec) {
    spec_.validate();
    const int64_t d = spec_.depth, b = spec_.base_channels;
    const int64_t img_ch = spec_.temporal ? 9 : 3;
    const int64_t t = spec_.temporal ? 3 : 1;
    enc_.resize(d);
    enc_bn_.resize(d);
    for (int64_t i = 1; i <= d; ++i) {
      int64_t in = i == 1 ? img_ch : spec_.channels_at(i - 1);
      enc_[i - 1] = Conv2d(ps_, "netG1.enc" + std::to_string(i), in, spec_.channels_at(i), 3, 2, rng);
      enc_bn_[i - 1] = BatchNorm2d(ps_, "netG1.enc" + std::to_string(i) + ".bn", spec_.channels_at(i));
    }
    int64_t cd = spec_.channels_at(d);
    global_conv_ = Conv2d(ps_, "netG1.global", cd, cd, 1, 1, rng);
    dec_.resize(d);
    for (int64_t j = d; j >= 1; --j) {
      int64_t in = j == d ? (t + 1) * cd : (t + 1) * spec_.channels_at(j);
      int64_t out = j == 1 ? b : spec_.channels_at(j - 1);
      dec_[j - 1] = Conv2d(ps_, "netG2.dec" + std::to_string(j), in, out, 3, 1, rng);
    }
    res1_ = Conv2d(ps_, "netG3.res1", b, b, 3, 1, rng);
    res2_ = Conv2d(ps_, "netG3.res2", b, 3, 3, 1, rng, PadMode::kZero, 0.01);
    scale1_ = Conv2d(ps_, "netG3.scale1", b, b, 3, 1, rng);
    scale2_ = Conv2d(ps_, "netG3.scale2", b, 3, 3, 1, rng, PadMode::kZero, 0.01);
    fuse1_ = Conv2d(ps_, "netG3.fuse1", 3, b, 3, 1, rng);
    fuse2_ = Conv2d(ps_, "netG3.fuse2", b, 3, 3, 1, rng, PadMode::kZero, 0.01);
    // Start near the identity map: tiny head outputs and s ~ e^3, so the
    // fused value stays unsaturated and the clamp passes gradients.
    for (int64_t c = 0; c < 3; ++c) ps_.at("netG3.scale2.b")->value[c] = 3.0;
    if (spec_.scale_level == ScaleLevel::kHigh) init_scale_blocks(rng);
  }

  const EnhancerSpec& spec() const { return spec_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }

  EncoderOutput encode_with_global(const Var& x, bool training) const {
    check_input(x);
    EncoderOutput out;
    Var h = add_scalar(scale(x, 2.0), -1.0);  // centre to [-1, 1]
    for (size_t i = 0; i < enc_.size(); ++i) {
      h = enc_bn_[i].forward(selu(enc_[i].forward(h)), training);
      out.skip_maps.push_back(h);
    }
    out.global_vector = selu(global_conv_.forward(global_avg_pool(h)));
    return out;
  }

  Var decode_shared(const EncoderOutput& enc, bool training, bool ablate_global = false) const {
    (void)training;
    const int64_t d = spec_.depth;
    if (static_cast<int64_t>(enc.skip_maps.size()) != d)
      throw ShapeError("decode_shared: encoder output does not match spec depth");
    const Shape& ds = enc.skip_maps.back()->value.shape();
    Var g = enc.global_vector;
    if (ablate_global) g = constant(Tensor(g->value.shape(), 0.0));
    Var h = concat_last({enc.skip_maps.back(), broadcast_hw(g, ds[1], ds[2])});
    for (int64_t j = d; j >= 1; --j) {
      h = selu(dec_[j - 1].forward(upsample2_nearest(h)));
      if (j > 1) h = concat_last({h, enc.skip_maps[j - 2]});
    }
    return h;
  }

  /// Same decoder, but each skip connection stacks the feature maps of the
  /// previous/current/next frame (recurrent variant).
  Var decode_temporal(const EncoderOutput& prev, const EncoderOutput& cur,
                      const EncoderOutput& next) const {
    const int64_t d = spec_.depth;
    const Shape& ds = cur.skip_maps.back()->value.shape();
    Var h = concat_last({prev.skip_maps.back(), cur.skip_maps.back(), next.skip_maps.back(),
                         broadcast_hw(cur.global_vector, ds[1], ds[2])});
    for (int64_t j = d; j >= 1; --j) {
      h = selu(dec_[j - 1].forward(upsample2_nearest(h)));
      if (j > 1)
        h = concat_last({h, prev.skip_maps[j - 2], cur.skip_maps[j - 2], next.skip_maps[j - 2]});
    }
    return h;
  }

  PerceptionPair perception_branches(const Var& decoded) const {
    PerceptionPair p;
    p.residual = res2_.forward(selu(res1_.forward(decoded)));
    p.scale = exp_v(scale2_.forward(selu(scale1_.forward(decoded))));
    return p;
  }

  /// Eq-style fusion followed by the closing convolution group; clamped to
  /// [0,1] unless running as the inner core of the high-scale enhancer.
  Var fuse_perceptions(const Var& x, const PerceptionPair& p, bool clamp = true) const {
    Var f = fuse_raw(x, p, spec_.beta);
    Var o = add(f, fuse2_.forward(selu(fuse1_.forward(f))));
    return clamp ? clamp01(o) : o;
  }

  /// Full enhancement pass on a [N,H,W,3] batch in [0,1]. `core_training`
  /// controls the inherited netG1..netG3 batch norms separately so stage 2
  /// can train fresh blocks while the frozen core stays in inference mode.
  Var forward(const Var& x, bool training) const { return forward(x, training, training); }

  Var forward(const Var& x, bool training, bool core_training) const {
    if (spec_.scale_level == ScaleLevel::kHigh) return forward_high(x, training, core_training);
    return clamp01(core_forward(x, core_training));
  }

  Tensor enhance(const Tensor& image_hwc, bool training = false) const {
    check_image(image_hwc, "enhance");
    Shape s = image_hwc.shape();
    Var batch = constant(image_hwc.reshaped({1, s[0], s[1], s[2]}));
    Tensor out = forward(batch, training)->value;
    return out.reshaped({s[0], s[1], s[2]});
  }

  /// Recurrent pass: per output frame the input is the channel concatenation
  /// of [t-1, t, t+1] with replicated boundaries, and every skip connection
  /// stacks the stage features of the three frames.
  std::vector<Var> forward_recurrent(const std::vector<Var>& frames, bool training) const {
    if (!spec_.temporal)
      throw std::invalid_argument("forward_recurrent: enhancer not built as temporal");
    if (frames.empty()) throw ShapeError("forward_recurrent: empty sequence");
    for (const Var& f : frames)
      if (!f->value.same_shape(frames[0]->value))
        throw ShapeError("forward_recurrent: inconsistent frame shapes");
    const int64_t n = static_cast<int64_t>(frames.size());
    auto at = [&](int64_t t) { return frames[std::clamp<int64_t>(t, 0, n - 1)]; };
    std::vector<EncoderOutput> encoded(n);
    for (int64_t t = 0; t < n; ++t)
      encoded[t] = encode_with_global(concat_last({at(t - 1), at(t), at(t + 1)}), training);
    auto enc_at = [&](int64_t t) -> const EncoderOutput& {
      return encoded[std::clamp<int64_t>(t, 0, n - 1)];
    };
    std::vector<Var> out;
    for (int64_t t = 0; t < n; ++t) {
      Var decoded = decode_temporal(enc_at(t - 1), enc_at(t), enc_at(t + 1));
      out.push_back(fuse_perceptions(frames[t], perception_branches(decoded)));
    }
    return out;
  }

  // Parameter groups for branch alternation and stage freezing.
  std::vector<Var> params_all() const { return ps_.trainable(); }
  std::vector<Var> params_residual_head() const {
    return ps_.trainable_with_prefix("netG3.res");
  }
  std::vector<Var> params_scale_head() const {
    return ps_.trainable_with_prefix("netG3.scale");
  }
  std::vector<Var> params_fusion() const { return ps_.trainable_with_prefix("netG3.fuse"); }
  std::vector<Var> params_new_scale_blocks() const {
    std::vector<Var> out = ps_.trainable_with_prefix("netG0.");
    for (Var& v : ps_.trainable_with_prefix("netG4.")) out.push_back(v);
    return out;
  }
  std::vector<Var> params_inherited() const {
    std::vector<Var> out;
    for (const auto& [k, v] : ps_.items())
      if (v->requires_grad && (k.rfind("netG1.", 0) == 0 || k.rfind("netG2.", 0) == 0 ||
                               k.rfind("netG3.", 0) == 0))
        out.push_back(v);
    return out;
  }
  /// Inherited blocks including batch-norm running stats; stage 2 must leave
  /// every one of these bit-identical.
  std::map<std::string, Tensor> inherited_block_values() const {
    std::map<std::string, Tensor> out;
    for (const auto& [k, v] : ps_.items())
      if (k.rfind("netG1.", 0) == 0 || k.rfind("netG2.", 0) == 0 || k.rfind("netG3.", 0) == 0)
        out[k] = v->value;
    return out;
  }

  /// Builds the high-scale enhancer: netG1..netG3 inherit this enhancer's
  /// learned values bit-exactly, fresh netG0/netG4 wrap them.
  Enhancer extend_to_higher_scale(std::mt19937_64& rng) const {
    if (spec_.scale_level != ScaleLevel::kLow)
      throw CheckpointError("extend_to_higher_scale: source must be a low-scale enhancer");
    if (spec_.temporal)
      throw CheckpointError("extend_to_higher_scale: temporal enhancer not extendable");
    EnhancerSpec high = spec_;
    high.scale_level = ScaleLevel::kHigh;
    Enhancer out(high, rng);
    for (const auto& [name, var] : ps_.items()) {
      if (!out.ps_.has(name))
        throw CheckpointError("extend_to_higher_scale: missing block " + name);
      out.ps_.at(name)->value = var->value;
    }
    return out;
  }

 private:
  void init_scale_blocks(std::mt19937_64& rng) {
    stem_ = Conv2d(ps_, "netG0.stem", 3, 3, 3, 2, rng);
    stem_bn_ = BatchNorm2d(ps_, "netG0.stem.bn", 3);
    out_conv_ = Conv2d(ps_, "netG4.out", 6, 3, 3, 1, rng);
    // Fresh blocks start orthogonal with zero bias so early stage-2 outputs
    // stay close to the inherited behaviour.
    ps_.at("netG0.stem.w")->value = orthogonal_init(27, 3, rng);
    ps_.at("netG4.out.w")->value = orthogonal_init(54, 3, rng);
  }

  void check_input(const Var& x) const {
    const Shape& s = x->value.shape();
    int64_t ch = spec_.temporal ? 9 : 3;
    if (s.size() != 4 || s[3] != ch)
      throw ShapeError("enhancer: expected [N,H,W," + std::to_string(ch) + "], got " +
                       shape_str(s));
    int64_t core_div = int64_t{1} << spec_.depth;
    if (s[1] % core_div != 0 || s[2] % core_div != 0)
      throw ShapeError("enhancer: H and W must be divisible by " + std::to_string(core_div));
  }

  Var core_forward(const Var& x, bool training, bool clamp = false) const {
    EncoderOutput enc = encode_with_global(x, training);
    Var decoded = decode_shared(enc, training);
    return fuse_perceptions(x, perception_branches(decoded), clamp);
  }

  Var forward_high(const Var& x, bool training, bool core_training) const {
    const Shape& s = x->value.shape();
    if (s.size() != 4 || s[1] % divisor_high() != 0 || s[2] % divisor_high() != 0)
      throw ShapeError("enhancer(high): H and W must be divisible by " +
                       std::to_string(divisor_high()));
    Var f0 = stem_bn_.forward(selu(stem_.forward(x)), training);
    Var core_raw = core_forward(f0, core_training, false);
    Var up = upsample2_nearest(concat_last({core_raw, f0}));
    return clamp01(out_conv_.forward(up));
  }

  int64_t divisor_high() const { return int64_t{1} << (spec_.depth + 1); }

  EnhancerSpec spec_;
  ParamStore ps_;
  std::vector<Conv2d> enc_;
  std::vector<BatchNorm2d> enc_bn_;
  Conv2d global_conv_;
  std::vector<Conv2d> dec_;
  Conv2d res1_, res2_, scale1_, scale2_, fuse1_, fuse2_;
  Conv2d stem_, out_conv_;
  BatchNorm2d stem_bn_;
};

}  // namespace dacal

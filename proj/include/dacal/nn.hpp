#pragma once

#include <map>
#include <string>

#include "dacal/autograd.hpp"

// Minimal NHWC layer zoo: convolution via im2col + GEMM, batch norm,
// nearest-neighbour upsampling, global average pooling, Adam.

namespace dacal {

enum class PadMode { kZero, kReplicate };
enum class ScaleLevel { kLow, kHigh };

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Index-table builders (cached by the layers that own them)
// ---------------------------------------------------------------------------

struct ConvGeom {
  int64_t n, h, w, c;  // input
  int64_t kh, kw, stride, pad_y, pad_x;
  PadMode mode;
  int64_t oh() const { return (h + 2 * pad_y - kh) / stride + 1; }
  int64_t ow() const { return (w + 2 * pad_x - kw) / stride + 1; }
  bool operator==(const ConvGeom& o) const {
    return n == o.n && h == o.h && w == o.w && c == o.c && kh == o.kh && kw == o.kw &&
           stride == o.stride && pad_y == o.pad_y && pad_x == o.pad_x && mode == o.mode;
  }
};

inline IndexTable build_im2col_table(const ConvGeom& g) {
  int64_t oh = g.oh(), ow = g.ow();
  auto table = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(g.n * oh * ow * g.kh * g.kw * g.c));
  size_t p = 0;
  for (int64_t n = 0; n < g.n; ++n)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x)
        for (int64_t ky = 0; ky < g.kh; ++ky)
          for (int64_t kx = 0; kx < g.kw; ++kx) {
            int64_t sy = y * g.stride - g.pad_y + ky;
            int64_t sx = x * g.stride - g.pad_x + kx;
            bool inside = sy >= 0 && sy < g.h && sx >= 0 && sx < g.w;
            if (!inside && g.mode == PadMode::kReplicate) {
              sy = std::clamp<int64_t>(sy, 0, g.h - 1);
              sx = std::clamp<int64_t>(sx, 0, g.w - 1);
              inside = true;
            }
            for (int64_t c = 0; c < g.c; ++c)
              (*table)[p++] = inside ? ((n * g.h + sy) * g.w + sx) * g.c + c : -1;
          }
  return table;
}

inline IndexTable build_upsample2_table(int64_t n, int64_t h, int64_t w, int64_t c) {
  auto table = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * 4 * h * w * c));
  size_t p = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t x = 0; x < 2 * w; ++x)
        for (int64_t ch = 0; ch < c; ++ch)
          (*table)[p++] = ((b * h + y / 2) * w + x / 2) * c + ch;
  return table;
}

/// Broadcast a [N,1,1,C] tensor over HxW.
inline IndexTable build_broadcast_hw_table(int64_t n, int64_t h, int64_t w, int64_t c) {
  auto table = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * h * w * c));
  size_t p = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t ch = 0; ch < c; ++ch) (*table)[p++] = b * c + ch;
  return table;
}

/// NHWC -> [N*C, H*W] permutation, used by the pooling reduction.
inline IndexTable build_nchw_table(int64_t n, int64_t h, int64_t w, int64_t c) {
  auto table = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * h * w * c));
  size_t p = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) (*table)[p++] = ((b * h + y) * w + x) * c + ch;
  return table;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter/state store. Keys are hierarchical ("netG1.enc1.w");
/// checkpoint blocks group by the first path component.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor t, bool trainable = true) {
    if (items_.count(name)) throw std::logic_error("duplicate parameter " + name);
    Var v = trainable ? leaf(std::move(t)) : constant(std::move(t));
    items_[name] = v;
    return v;
  }
  Var at(const std::string& name) const {
    auto it = items_.find(name);
    if (it == items_.end()) throw std::out_of_range("no parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return items_.count(name) > 0; }
  const std::map<std::string, Var>& items() const { return items_; }
  std::vector<Var> trainable() const {
    std::vector<Var> out;
    for (const auto& [k, v] : items_)
      if (v->requires_grad) out.push_back(v);
    return out;
  }
  std::vector<Var> trainable_with_prefix(const std::string& prefix) const {
    std::vector<Var> out;
    for (const auto& [k, v] : items_)
      if (v->requires_grad && k.rfind(prefix, 0) == 0) out.push_back(v);
    return out;
  }
  int64_t count_with_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [k, v] : items_)
      if (v->requires_grad && k.rfind(prefix, 0) == 0) n += v->value.numel();
    return n;
  }

 private:
  std::map<std::string, Var> items_;
};

// Initializers ---------------------------------------------------------------

/// Q factor of the QR decomposition of an n x k standard normal matrix, sign
/// corrected so diag(R) > 0. For Gaussian input this samples the Haar measure
/// on the Stiefel manifold.
inline Tensor qr_orthonormal(int64_t n, int64_t k, std::mt19937_64& rng) {
  if (k < 1 || k > n) throw std::invalid_argument("qr_orthonormal: need 1 <= k <= n");
  Tensor a = randn({n, k}, rng);
  Eigen::MatrixXd A = ConstMapRowMat(a.data(), n, k);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, k);
  Eigen::MatrixXd R = qr.matrixQR().topLeftCorner(k, k).triangularView<Eigen::Upper>();
  for (int64_t j = 0; j < k; ++j)
    if (R(j, j) < 0) Q.col(j) = -Q.col(j);
  Tensor out({n, k});
  MapRowMat(out.data(), n, k) = Q;
  return out;
}

/// Orthogonal init for a [fan_in, fan_out] kernel matrix (columns orthonormal
/// when fan_in >= fan_out, rows otherwise).
inline Tensor orthogonal_init(int64_t rows, int64_t cols, std::mt19937_64& rng,
                              double gain = 1.0) {
  Tensor q = rows >= cols ? qr_orthonormal(rows, cols, rng) : qr_orthonormal(cols, rows, rng);
  Tensor out({rows, cols});
  if (rows >= cols) {
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = gain * q[i];
  } else {
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) out.at2(r, c) = gain * q.at2(c, r);
  }
  return out;
}

inline Tensor he_normal(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  return randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

class Conv2d {
 public:
  Conv2d() = default;
  /// Weight layout [kh*kw*in, out]; bias [out].
  Conv2d(ParamStore& ps, const std::string& name, int64_t in_ch, int64_t out_ch, int64_t ksize,
         int64_t stride, std::mt19937_64& rng, PadMode mode = PadMode::kZero,
         double weight_scale = -1.0)
      : in_ch_(in_ch), out_ch_(out_ch), ksize_(ksize), stride_(stride), mode_(mode) {
    int64_t fan_in = ksize * ksize * in_ch;
    double s = weight_scale > 0 ? weight_scale : std::sqrt(2.0 / fan_in);
    w_ = ps.add(name + ".w", randn({fan_in, out_ch}, rng, s));
    b_ = ps.add(name + ".b", Tensor({out_ch}, 0.0));
  }

  Var forward(const Var& x) const {
    const Shape& s = x->value.shape();
    if (s.size() != 4 || s[3] != in_ch_)
      throw std::invalid_argument("Conv2d: expected NHWC with C=" + std::to_string(in_ch_) +
                                  ", got " + shape_str(s));
    ConvGeom geom{s[0], s[1], s[2], s[3], ksize_,   ksize_,
                  stride_, (ksize_ - 1) / 2, (ksize_ - 1) / 2, mode_};
    if (!(cached_geom_ == geom) || !table_) {
      table_ = build_im2col_table(geom);
      cached_geom_ = geom;
    }
    int64_t oh = geom.oh(), ow = geom.ow();
    Var cols = gather(x, table_, Shape{s[0] * oh * ow, ksize_ * ksize_ * in_ch_});
    Var y = matmul(cols, w_);
    y = add(y, broadcast_rows(reshape(b_, Shape{1, out_ch_}), s[0] * oh * ow));
    return reshape(y, Shape{s[0], oh, ow, out_ch_});
  }

  Var weight() const { return w_; }
  Var bias() const { return b_; }
  int64_t out_channels() const { return out_ch_; }

 private:
  int64_t in_ch_ = 0, out_ch_ = 0, ksize_ = 0, stride_ = 1;
  PadMode mode_ = PadMode::kZero;
  Var w_, b_;
  mutable ConvGeom cached_geom_{};
  mutable IndexTable table_;
};

/// Batch normalization over N,H,W per channel. Running stats live in the
/// ParamStore as non-trainable state so they serialize with the blocks.
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& ps, const std::string& name, int64_t channels, double momentum = 0.1)
      : c_(channels), momentum_(momentum) {
    gamma_ = ps.add(name + ".gamma", Tensor({channels}, 1.0));
    beta_ = ps.add(name + ".beta", Tensor({channels}, 0.0));
    run_mean_ = ps.add(name + ".running_mean", Tensor({channels}, 0.0), false);
    run_var_ = ps.add(name + ".running_var", Tensor({channels}, 1.0), false);
  }

  Var forward(const Var& x, bool training) const {
    const Shape& s = x->value.shape();
    if (s.size() != 4 || s[3] != c_) throw std::invalid_argument("BatchNorm2d: bad input shape");
    int64_t m = s[0] * s[1] * s[2];
    Var flat = reshape(x, Shape{m, c_});
    Var mean, var;
    if (training) {
      mean = col_mean(flat);                       // [1, C]
      Var centered = sub(flat, broadcast_rows(mean, m));
      var = col_mean(mul(centered, centered));     // biased variance
      // Running stats track values only; they are not part of the tape.
      for (int64_t c = 0; c < c_; ++c) {
        run_mean_->value[c] = (1 - momentum_) * run_mean_->value[c] + momentum_ * mean->value[c];
        run_var_->value[c] = (1 - momentum_) * run_var_->value[c] + momentum_ * var->value[c];
      }
      Var inv = divide(constant(Tensor(Shape{1, c_}, 1.0)), sqrt_v(add_scalar(var, kEps)));
      Var y = mul(centered, broadcast_rows(inv, m));
      y = add(mul(y, broadcast_rows(reshape(gamma_, {1, c_}), m)),
              broadcast_rows(reshape(beta_, {1, c_}), m));
      return reshape(y, s);
    }
    Tensor scale_t({1, c_}), shift_t({1, c_});
    for (int64_t c = 0; c < c_; ++c) {
      double inv = 1.0 / std::sqrt(run_var_->value[c] + kEps);
      scale_t.at2(0, c) = inv;
      shift_t.at2(0, c) = -run_mean_->value[c] * inv;
    }
    Var y = add(mul(flat, broadcast_rows(constant(scale_t), m)),
                broadcast_rows(constant(shift_t), m));
    y = add(mul(y, broadcast_rows(reshape(gamma_, {1, c_}), m)),
            broadcast_rows(reshape(beta_, {1, c_}), m));
    return reshape(y, s);
  }

  static constexpr double kEps = 1e-5;

 private:
  int64_t c_ = 0;
  double momentum_ = 0.1;
  Var gamma_, beta_, run_mean_, run_var_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng,
         double weight_scale = -1.0)
      : in_(in), out_(out) {
    double s = weight_scale > 0 ? weight_scale : std::sqrt(2.0 / in);
    w_ = ps.add(name + ".w", randn({in, out}, rng, s));
    b_ = ps.add(name + ".b", Tensor({out}, 0.0));
  }
  Var forward(const Var& x) const {  // x: [N, in]
    Var y = matmul(x, w_);
    return add(y, broadcast_rows(reshape(b_, Shape{1, out_}), x->value.dim(0)));
  }

 private:
  int64_t in_ = 0, out_ = 0;
  Var w_, b_;
};

inline Var upsample2_nearest(const Var& x) {
  const Shape& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("upsample2_nearest: need NHWC");
  IndexTable t = build_upsample2_table(s[0], s[1], s[2], s[3]);
  return gather(x, t, Shape{s[0], s[1] * 2, s[2] * 2, s[3]});
}

/// [N,H,W,C] -> [N,1,1,C] mean over the spatial extent.
inline Var global_avg_pool(const Var& x) {
  const Shape& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("global_avg_pool: need NHWC");
  IndexTable t = build_nchw_table(s[0], s[1], s[2], s[3]);
  Var nc_hw = gather(x, t, Shape{s[0] * s[3], s[1] * s[2]});
  Var pooled = scale(row_sum(nc_hw), 1.0 / static_cast<double>(s[1] * s[2]));  // [N*C, 1]
  return reshape(pooled, Shape{s[0], 1, 1, s[3]});
}

inline Var broadcast_hw(const Var& x, int64_t h, int64_t w) {
  const Shape& s = x->value.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != 1)
    throw std::invalid_argument("broadcast_hw: need [N,1,1,C]");
  IndexTable t = build_broadcast_hw_table(s[0], h, w, s[3]);
  return gather(x, t, Shape{s[0], h, w, s[3]});
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam. Parameters present in the frozen set are skipped entirely, which is
/// how branch alternation and stage-2 freezing guarantee zero deltas.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Var>& params) {
    for (const Var& p : params) {
      if (!p->grad) continue;
      State& st = states_[p.get()];
      if (st.m.numel() == 0) {
        st.m = Tensor(p->value.shape());
        st.v = Tensor(p->value.shape());
      }
      st.t += 1;
      const Tensor& g = p->grad->value;
      double bc1 = 1.0 - std::pow(beta1_, st.t);
      double bc2 = 1.0 - std::pow(beta2_, st.t);
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        st.m[i] = beta1_ * st.m[i] + (1 - beta1_) * g[i];
        st.v[i] = beta2_ * st.v[i] + (1 - beta2_) * g[i] * g[i];
        p->value[i] -= lr_ * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + eps_);
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  struct State {
    Tensor m, v;
    int64_t t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::map<const Node*, State> states_;
};

}  // namespace dacal

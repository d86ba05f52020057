#pragma once

#include "dacal/tensor.hpp"

// Deterministic image mathematics shared by the enhancer, the critics and the
// evaluation path. Everything here is a pure function of its inputs.

namespace dacal {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ChannelMismatchError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ScaleError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Validates the HWC unit-interval image contract.
inline void check_image(const Tensor& img, const char* who) {
  const Shape& s = img.shape();
  if (s.size() != 3 || s[0] < 1 || s[1] < 1 || (s[2] != 1 && s[2] != 3))
    throw ShapeError(std::string(who) + ": expected HxWxC with C in {1,3}, got " + shape_str(s));
}

inline Tensor clamp_unit(Tensor img) {
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = std::clamp(img[i], 0.0, 1.0);
  return img;
}

struct BlurKernel {
  double sigma = 3.0;
  int64_t radius = 9;

  std::vector<double> weights() const {
    if (sigma <= 0.0 || radius < 1)
      throw std::invalid_argument("BlurKernel: need sigma > 0 and radius >= 1");
    std::vector<double> w(2 * radius + 1);
    double sum = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
      w[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
      sum += w[i + radius];
    }
    for (double& v : w) v /= sum;
    return w;
  }
};

/// Separable Gaussian blur with edge replication. The low-frequency critic
/// input of the frequency division.
inline Tensor gaussian_blur(const Tensor& img, const BlurKernel& k) {
  check_image(img, "gaussian_blur");
  if (img.dim(2) != 3)
    throw ChannelMismatchError("gaussian_blur: expected a 3-channel image");
  const int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2), r = k.radius;
  std::vector<double> kw = k.weights();
  Tensor tmp(img.shape()), out(img.shape());
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int64_t i = -r; i <= r; ++i)
          acc += kw[i + r] * img.at3(y, std::clamp<int64_t>(x + i, 0, w - 1), ch);
        tmp.at3(y, x, ch) = acc;
      }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int64_t i = -r; i <= r; ++i)
          acc += kw[i + r] * tmp.at3(std::clamp<int64_t>(y + i, 0, h - 1), x, ch);
        out.at3(y, x, ch) = acc;
      }
  return clamp_unit(std::move(out));
}

/// Rec. 601 luma. The high-frequency critic input.
inline Tensor to_grayscale(const Tensor& img) {
  check_image(img, "to_grayscale");
  if (img.dim(2) != 3)
    throw ChannelMismatchError("to_grayscale: expected a 3-channel image");
  Tensor out({img.dim(0), img.dim(1), 1});
  for (int64_t y = 0; y < img.dim(0); ++y)
    for (int64_t x = 0; x < img.dim(1); ++x)
      out.at3(y, x, 0) =
          0.299 * img.at3(y, x, 0) + 0.587 * img.at3(y, x, 1) + 0.114 * img.at3(y, x, 2);
  return out;
}

enum class ResizeMode { kNearest, kBilinear };

/// Half-pixel-centre resize; 2x bilinear downscale is an exact 2x2 average.
inline Tensor resize(const Tensor& img, int64_t new_h, int64_t new_w, ResizeMode mode) {
  check_image(img, "resize");
  if (new_h < 1 || new_w < 1) throw std::invalid_argument("resize: target size must be >= 1");
  const int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (new_h == h && new_w == w) return img;
  Tensor out({new_h, new_w, c});
  const double sy = static_cast<double>(h) / new_h;
  const double sx = static_cast<double>(w) / new_w;
  for (int64_t y = 0; y < new_h; ++y)
    for (int64_t x = 0; x < new_w; ++x) {
      double fy = (y + 0.5) * sy - 0.5;
      double fx = (x + 0.5) * sx - 0.5;
      if (mode == ResizeMode::kNearest) {
        int64_t iy = std::clamp<int64_t>(std::llround(fy), 0, h - 1);
        int64_t ix = std::clamp<int64_t>(std::llround(fx), 0, w - 1);
        for (int64_t ch = 0; ch < c; ++ch) out.at3(y, x, ch) = img.at3(iy, ix, ch);
      } else {
        int64_t y0 = static_cast<int64_t>(std::floor(fy));
        int64_t x0 = static_cast<int64_t>(std::floor(fx));
        double wy = fy - y0, wx = fx - x0;
        int64_t y0c = std::clamp<int64_t>(y0, 0, h - 1), y1c = std::clamp<int64_t>(y0 + 1, 0, h - 1);
        int64_t x0c = std::clamp<int64_t>(x0, 0, w - 1), x1c = std::clamp<int64_t>(x0 + 1, 0, w - 1);
        for (int64_t ch = 0; ch < c; ++ch) {
          double top = (1 - wx) * img.at3(y0c, x0c, ch) + wx * img.at3(y0c, x1c, ch);
          double bot = (1 - wx) * img.at3(y1c, x0c, ch) + wx * img.at3(y1c, x1c, ch);
          out.at3(y, x, ch) = (1 - wy) * top + wy * bot;
        }
      }
    }
  return clamp_unit(std::move(out));
}

/// 10*log10(1/MSE) on unit-interval data; identical inputs return +inf.
inline double psnr(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
  double se = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a[i] - b[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  double mse = se / static_cast<double>(a.numel());
  return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

// 11-tap Gaussian window, sigma 1.5 (the standard SSIM window).
inline std::vector<double> ssim_window() {
  std::vector<double> w(11);
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    double d = i - 5.0;
    w[i] = std::exp(-0.5 * d * d / (1.5 * 1.5));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Valid-region separable filter on a single channel held as a row-major grid.
inline std::vector<double> valid_filter(const std::vector<double>& img, int64_t h, int64_t w,
                                        const std::vector<double>& win, int64_t& oh, int64_t& ow) {
  int64_t t = static_cast<int64_t>(win.size());
  oh = h - t + 1;
  ow = w - t + 1;
  std::vector<double> tmp(static_cast<size_t>(h * ow));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t i = 0; i < t; ++i) acc += win[i] * img[y * w + x + i];
      tmp[y * ow + x] = acc;
    }
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t i = 0; i < t; ++i) acc += win[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

// Spatial means of the SSIM map (luminance * cs) and of the cs map alone for
// one channel pair, using valid-region windows.
inline void ssim_channel(const std::vector<double>& a, const std::vector<double>& b, int64_t h,
                         int64_t w, double& ssim_mean, double& cs_mean) {
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  std::vector<double> win = ssim_window();
  int64_t oh, ow;
  std::vector<double> mu_a = valid_filter(a, h, w, win, oh, ow);
  std::vector<double> mu_b = valid_filter(b, h, w, win, oh, ow);
  std::vector<double> aa(a.size()), bb(b.size()), ab(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  std::vector<double> m_aa = valid_filter(aa, h, w, win, oh, ow);
  std::vector<double> m_bb = valid_filter(bb, h, w, win, oh, ow);
  std::vector<double> m_ab = valid_filter(ab, h, w, win, oh, ow);
  double ssim_sum = 0.0, cs_sum = 0.0;
  for (int64_t i = 0; i < oh * ow; ++i) {
    double va = m_aa[i] - mu_a[i] * mu_a[i];
    double vb = m_bb[i] - mu_b[i] * mu_b[i];
    double cov = m_ab[i] - mu_a[i] * mu_b[i];
    double lum = (2 * mu_a[i] * mu_b[i] + kC1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1);
    double cs = (2 * cov + kC2) / (va + vb + kC2);
    ssim_sum += lum * cs;
    cs_sum += cs;
  }
  ssim_mean = ssim_sum / (oh * ow);
  cs_mean = cs_sum / (oh * ow);
}

// 2x2 average pooling, replicating the odd edge (same convention as the
// reference implementations that pad with SAME).
inline std::vector<double> downsample2(const std::vector<double>& img, int64_t h, int64_t w,
                                       int64_t& oh, int64_t& ow) {
  oh = (h + 1) / 2;
  ow = (w + 1) / 2;
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      int cnt = 0;
      for (int64_t dy = 0; dy < 2; ++dy)
        for (int64_t dx = 0; dx < 2; ++dx) {
          int64_t yy = 2 * y + dy, xx = 2 * x + dx;
          if (yy < h && xx < w) {
            acc += img[yy * w + xx];
            ++cnt;
          }
        }
      out[y * ow + x] = acc / cnt;
    }
  return out;
}

}  // namespace detail

inline constexpr double kMsssimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Largest scale count the image size supports: scale s needs a min side of
/// 11 * 2^(s-1), so 5 scales require >= 176 pixels.
inline int msssim_max_scales(int64_t h, int64_t w) {
  int scales = 0;
  int64_t need = 11;
  int64_t side = std::min(h, w);
  while (scales < 5 && side >= need) {
    ++scales;
    need *= 2;
  }
  return scales;
}

/// Multi-scale SSIM with the standard per-scale weights: contrast-structure
/// means at every scale, the full SSIM map mean at the coarsest, combined as
/// a weighted geometric product per channel and averaged over channels.
/// Symmetric in its arguments and 1.0 for identical images.
inline double ms_ssim(const Tensor& a, const Tensor& b, int scales = 5) {
  if (!a.same_shape(b)) throw std::invalid_argument("ms_ssim: shape mismatch");
  check_image(a, "ms_ssim");
  if (scales < 1 || scales > 5) throw ScaleError("ms_ssim: scales must be in [1,5]");
  if (msssim_max_scales(a.dim(0), a.dim(1)) < scales)
    throw ScaleError("ms_ssim: image too small for " + std::to_string(scales) + " scales");
  const int64_t c = a.dim(2);
  double result = 0.0;
  for (int64_t ch = 0; ch < c; ++ch) {
    int64_t h = a.dim(0), w = a.dim(1);
    std::vector<double> pa(static_cast<size_t>(h * w)), pb(static_cast<size_t>(h * w));
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        pa[y * w + x] = a.at3(y, x, ch);
        pb[y * w + x] = b.at3(y, x, ch);
      }
    double acc = 1.0;
    for (int s = 0; s < scales; ++s) {
      double ssim_mean, cs_mean;
      detail::ssim_channel(pa, pb, h, w, ssim_mean, cs_mean);
      double term = (s + 1 == scales) ? ssim_mean : cs_mean;
      acc *= std::pow(std::max(term, 0.0), kMsssimWeights[s]);
      if (s + 1 < scales) {
        int64_t oh, ow;
        pa = detail::downsample2(pa, h, w, oh, ow);
        pb = detail::downsample2(pb, h, w, oh, ow);
        h = oh;
        w = ow;
      }
    }
    result += acc;
  }
  return result / static_cast<double>(c);
}

}  // namespace dacal

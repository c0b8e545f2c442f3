// Full-reference image quality: PSNR and single-scale SSIM.
#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "evd/tensor.hpp"

namespace evd {

struct QualityScore {
  double psnr = 0.0;  // dB; +infinity when the images are identical
  double ssim = 0.0;
};

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

template <typename T>
double mse(const Tensor4<T>& a, const Tensor4<T>& b) {
  require_same_shape(a, b, "mse");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return a.empty() ? 0.0 : sum / static_cast<double>(a.size());
}

/// 10*log10(peak^2 / MSE); identical inputs give +infinity.
template <typename T>
double psnr(const Tensor4<T>& a, const Tensor4<T>& b, double peak = 1.0) {
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(peak * peak / m);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double peak = 1.0;
  double k1 = 0.01;
  double k2 = 0.03;
};

namespace detail {

inline std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const double mid = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - mid;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= sum;
  return g;
}

// Valid-region separable Gaussian filter of one plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                        const std::vector<double>& taps) {
  const std::size_t k = taps.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += taps[t] * src[y * w + x + t];
      rows[y * ow + x] = acc;
    }
  }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += taps[t] * rows[(y + t) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace detail

/// Mean SSIM over the valid-window map of every (sample, channel) plane.
template <typename T>
double ssim(const Tensor4<T>& a, const Tensor4<T>& b, const SsimOptions& opt = {}) {
  require_same_shape(a, b, "ssim");
  const std::size_t win = static_cast<std::size_t>(opt.window);
  if (a.h() < win || a.w() < win) {
    throw ContractViolation("ssim: image " + to_string(a.shape()) + " smaller than the " +
                            std::to_string(win) + "x" + std::to_string(win) + " window");
  }
  const auto taps = detail::gaussian_taps(opt.window, opt.sigma);
  const double c1 = (opt.k1 * opt.peak) * (opt.k1 * opt.peak);
  const double c2 = (opt.k2 * opt.peak) * (opt.k2 * opt.peak);
  const std::size_t h = a.h(), w = a.w(), plane = h * w;
  double total = 0.0;
  std::size_t planes = 0;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (std::size_t n = 0; n < a.n(); ++n) {
    for (std::size_t c = 0; c < a.c(); ++c) {
      const T* pa = a.plane(n, c);
      const T* pb = b.plane(n, c);
      for (std::size_t p = 0; p < plane; ++p) {
        x[p] = static_cast<double>(pa[p]);
        y[p] = static_cast<double>(pb[p]);
        xx[p] = x[p] * x[p];
        yy[p] = y[p] * y[p];
        xy[p] = x[p] * y[p];
      }
      const auto mx = detail::filter_valid(x, h, w, taps);
      const auto my = detail::filter_valid(y, h, w, taps);
      const auto sxx = detail::filter_valid(xx, h, w, taps);
      const auto syy = detail::filter_valid(yy, h, w, taps);
      const auto sxy = detail::filter_valid(xy, h, w, taps);
      double sum = 0.0;
      for (std::size_t p = 0; p < mx.size(); ++p) {
        const double vx = sxx[p] - mx[p] * mx[p];
        const double vy = syy[p] - my[p] * my[p];
        const double cov = sxy[p] - mx[p] * my[p];
        sum += ((2.0 * mx[p] * my[p] + c1) * (2.0 * cov + c2)) /
               ((mx[p] * mx[p] + my[p] * my[p] + c1) * (vx + vy + c2));
      }
      total += sum / static_cast<double>(mx.size());
      ++planes;
    }
  }
  return total / static_cast<double>(planes);
}

template <typename T>
QualityScore quality(const Tensor4<T>& pred, const Tensor4<T>& target) {
  return {psnr(pred, target), ssim(pred, target)};
}

template <typename T>
Tensor4<T> clamp01(Tensor4<T> t) {
  for (auto& v : t.span()) v = std::clamp(v, T(0), T(1));
  return t;
}

}  // namespace evd

// Slow, direct reference formulas for the quality metrics.
#pragma once

#include <cmath>
#include <vector>

#include "evd/tensor.hpp"

namespace evd::test {

/// SSIM from its definition: a full 2-D Gaussian window, moments taken as
/// weighted sums of deviations from the weighted mean, every valid window
/// position averaged, then averaged over planes.
inline double ssim_direct(const Tensor4<double>& a, const Tensor4<double>& b, int win = 11, double sigma = 1.5) {
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> w(static_cast<std::size_t>(win * win));
  double norm = 0;
  const double mid = (win - 1) / 2.0;
  for (int y = 0; y < win; ++y)
    for (int x = 0; x < win; ++x) {
      const double v = std::exp(-((y - mid) * (y - mid) + (x - mid) * (x - mid)) / (2 * sigma * sigma));
      w[static_cast<std::size_t>(y * win + x)] = v;
      norm += v;
    }
  for (auto& v : w) v /= norm;

  double total = 0;
  std::size_t planes = 0;
  for (std::size_t n = 0; n < a.n(); ++n) {
    for (std::size_t c = 0; c < a.c(); ++c) {
      double sum = 0;
      std::size_t count = 0;
      for (std::size_t oy = 0; oy + static_cast<std::size_t>(win) <= a.h(); ++oy) {
        for (std::size_t ox = 0; ox + static_cast<std::size_t>(win) <= a.w(); ++ox) {
          double mx = 0, my = 0;
          for (int y = 0; y < win; ++y)
            for (int x = 0; x < win; ++x) {
              const double k = w[static_cast<std::size_t>(y * win + x)];
              mx += k * a(n, c, oy + y, ox + x);
              my += k * b(n, c, oy + y, ox + x);
            }
          double vx = 0, vy = 0, cov = 0;
          for (int y = 0; y < win; ++y)
            for (int x = 0; x < win; ++x) {
              const double k = w[static_cast<std::size_t>(y * win + x)];
              const double dx = a(n, c, oy + y, ox + x) - mx, dy = b(n, c, oy + y, ox + x) - my;
              vx += k * dx * dx;
              vy += k * dy * dy;
              cov += k * dx * dy;
            }
          sum += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
      }
      total += sum / static_cast<double>(count);
      ++planes;
    }
  }
  return total / static_cast<double>(planes);
}

/// A fixed 16x16 RGB pair defined by closed-form patterns.
inline std::pair<Tensor4<double>, Tensor4<double>> frozen_pair() {
  Tensor4<double> a(1, 3, 16, 16), b(1, 3, 16, 16);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y), fc = static_cast<double>(c);
        a(0, c, y, x) = 0.5 + 0.4 * std::sin(0.37 * fx + 0.21 * fy + fc);
        b(0, c, y, x) = 0.45 + 0.35 * std::sin(0.33 * fx + 0.25 * fy + 0.8 * fc) + 0.05 * std::cos(1.3 * fx * fy);
      }
  return {a, b};
}

}  // namespace evd::test

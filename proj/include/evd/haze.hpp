// Atmospheric scattering model: I = J*t + A*(1 - t), t = exp(-beta*d),
// and its reformulation J = K*I - K + b.
#pragma once

#include <array>
#include <cmath>
#include <string>

#include "evd/tensor.hpp"

namespace evd {

struct HazeParams {
  std::array<double, 3> A{1.0, 1.0, 1.0};  // atmospheric light per channel
  double beta = 0.0;                       // scattering coefficient, 1/m

  static HazeParams scalar(double a, double beta) { return {{a, a, a}, beta}; }

  double channel(std::size_t c) const { return A[c % 3]; }

  void validate() const {
    for (double a : A) {
      if (!(a > 0.0 && a <= 1.0)) {
        throw ContractViolation("HazeParams: atmospheric light must lie in (0, 1], got " +
                                std::to_string(a));
      }
    }
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
      throw ContractViolation("HazeParams: beta must be >= 0, got " + std::to_string(beta));
    }
  }

  friend bool operator==(const HazeParams&, const HazeParams&) = default;
};

namespace detail {

// t may be single-channel (broadcast) or carry one channel per image channel.
template <typename T>
void check_transmission(const Tensor4<T>& image, const Tensor4<T>& t, const char* what) {
  const Shape& s = image.shape();
  const Shape& ts = t.shape();
  if (ts.n != s.n || ts.h != s.h || ts.w != s.w || (ts.c != 1 && ts.c != s.c)) {
    throw ContractViolation(std::string(what) + ": transmission shape " + to_string(ts) +
                            " incompatible with image shape " + to_string(s));
  }
}

template <typename T>
T t_at(const Tensor4<T>& t, std::size_t n, std::size_t c, std::size_t p) {
  return t.plane(n, t.c() == 1 ? 0 : c)[p];
}

}  // namespace detail

template <typename T>
Tensor4<T> transmission_from_depth(const Tensor4<T>& depth, double beta) {
  if (!(beta >= 0.0)) {
    throw ContractViolation("transmission_from_depth: beta must be >= 0, got " +
                            std::to_string(beta));
  }
  Tensor4<T> t(depth.shape());
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (!(depth[i] >= T(0))) {
      throw ContractViolation("transmission_from_depth: negative or NaN depth at element " +
                              std::to_string(i));
    }
    t[i] = static_cast<T>(std::exp(-beta * static_cast<double>(depth[i])));
  }
  return t;
}

/// I = J*t + A*(1 - t), t broadcast over channels.
template <typename T>
Tensor4<T> synthesize_haze(const Tensor4<T>& clean, const Tensor4<T>& t, const HazeParams& haze) {
  haze.validate();
  detail::check_transmission(clean, t, "synthesize_haze");
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (!(clean[i] >= T(0) && clean[i] <= T(1))) {
      throw ContractViolation("synthesize_haze: clean image value " +
                              std::to_string(static_cast<double>(clean[i])) +
                              " outside [0,1] at element " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!(t[i] > T(0) && t[i] <= T(1))) {
      throw ContractViolation("synthesize_haze: transmission outside (0,1] at element " +
                              std::to_string(i));
    }
  }
  Tensor4<T> out(clean.shape());
  const std::size_t plane = clean.h() * clean.w();
  for (std::size_t n = 0; n < clean.n(); ++n) {
    for (std::size_t c = 0; c < clean.c(); ++c) {
      const T a = static_cast<T>(haze.channel(c));
      const T* j = clean.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t p = 0; p < plane; ++p) {
        const T tv = detail::t_at(t, n, c, p);
        dst[p] = j[p] * tv + a * (T(1) - tv);
      }
    }
  }
  return out;
}

/// J = (I - A)/max(t, t_floor) + A, optionally clamped to [0,1].
template <typename T>
Tensor4<T> invert_haze(const Tensor4<T>& hazy, const Tensor4<T>& t, const HazeParams& haze,
                       double t_floor = 0.01, bool clamp = false) {
  if (!(t_floor > 0.0)) {
    throw ContractViolation("invert_haze: t_floor must be > 0, got " + std::to_string(t_floor));
  }
  detail::check_transmission(hazy, t, "invert_haze");
  Tensor4<T> out(hazy.shape());
  const std::size_t plane = hazy.h() * hazy.w();
  const T floor = static_cast<T>(t_floor);
  for (std::size_t n = 0; n < hazy.n(); ++n) {
    for (std::size_t c = 0; c < hazy.c(); ++c) {
      const T a = static_cast<T>(haze.channel(c));
      const T* src = hazy.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t p = 0; p < plane; ++p) {
        const T tv = std::max(detail::t_at(t, n, c, p), floor);
        T v = (src[p] - a) / tv + a;
        if (clamp) v = std::clamp(v, T(0), T(1));
        dst[p] = v;
      }
    }
  }
  return out;
}

/// sign(z)*max(|z|, eps) with sign(0) = -1; I <= 1 makes I - 1 <= 0.
template <typename T>
T guarded_denominator(T z, T eps) {
  if (z > T(0)) return std::max(z, eps);
  return -std::max(-z, eps);
}

/// K = ((I - A)/max(t, t_floor) + A) / guarded(I - 1).
template <typename T>
Tensor4<T> compute_K(const Tensor4<T>& hazy, const Tensor4<T>& t, const HazeParams& haze,
                     double denom_eps = 1e-4, double t_floor = 0.01) {
  if (!(denom_eps > 0.0)) {
    throw ContractViolation("compute_K: denom_eps must be > 0, got " + std::to_string(denom_eps));
  }
  Tensor4<T> numer = invert_haze(hazy, t, haze, t_floor, false);
  const T eps = static_cast<T>(denom_eps);
  for (std::size_t i = 0; i < numer.size(); ++i) {
    numer[i] /= guarded_denominator(hazy[i] - T(1), eps);
  }
  return numer;
}

/// Clean-image generation: J = K*I - K + b.
template <typename T>
Tensor4<T> apply_K(const Tensor4<T>& hazy, const Tensor4<T>& K, T bias = T(0)) {
  require_same_shape(hazy, K, "apply_K");
  Tensor4<T> out(hazy.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = K[i] * hazy[i] - K[i] + bias;
  return out;
}

template <typename T>
struct ApplyKGrads {
  Tensor4<T> hazy;  // dJ/dI = K
  Tensor4<T> K;     // dJ/dK = I - 1
};

template <typename T>
ApplyKGrads<T> apply_K_backward(const Tensor4<T>& hazy, const Tensor4<T>& K,
                                const Tensor4<T>& grad_out) {
  require_same_shape(hazy, K, "apply_K_backward");
  require_same_shape(hazy, grad_out, "apply_K_backward");
  ApplyKGrads<T> g{Tensor4<T>(hazy.shape()), Tensor4<T>(hazy.shape())};
  for (std::size_t i = 0; i < hazy.size(); ++i) {
    g.hazy[i] = grad_out[i] * K[i];
    g.K[i] = grad_out[i] * (hazy[i] - T(1));
  }
  return g;
}

}  // namespace evd

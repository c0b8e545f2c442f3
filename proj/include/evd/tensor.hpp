// Rank-4 tensors and the handful of layer primitives the dehazing networks
// are built from. Every primitive has an explicit backward; there is no
// autodiff graph.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evd/errors.hpp"

namespace evd {

struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t count() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
  return os.str();
}

/// Dense (n, c, h, w) array, w fastest.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape s, T fill = T(0)) : shape_(s), data_(s.count(), fill) {}
  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : Tensor4(Shape{n, c, h, w}, fill) {}

  const Shape& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index(n, c, y, x)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(n, c, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* plane(std::size_t n, std::size_t c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(std::size_t n, std::size_t c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor4& a, const Tensor4& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor4<T>& a, const Tensor4<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(what) + ": shape mismatch " + to_string(a.shape()) +
                            " vs " + to_string(b.shape()));
  }
}

template <typename T>
bool all_finite(const Tensor4<T>& t) {
  return std::all_of(t.span().begin(), t.span().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs(const Tensor4<T>& t) {
  T m = 0;
  for (T v : t.span()) m = std::max(m, std::abs(v));
  return m;
}

/// Copies sample `i` of a batch into a (1, c, h, w) tensor.
template <typename T>
Tensor4<T> take_sample(const Tensor4<T>& t, std::size_t i) {
  Tensor4<T> out(1, t.c(), t.h(), t.w());
  const std::size_t stride = t.c() * t.h() * t.w();
  std::copy_n(t.data() + i * stride, stride, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

/// "Same" convolution, stride 1, odd kernel, zero padding. An empty bias
/// vector means the layer has no bias term.
template <typename T>
struct ConvLayer {
  Tensor4<T> weight;  // (out_c, in_c, k, k)
  std::vector<T> bias;

  ConvLayer() = default;
  ConvLayer(std::size_t in_c, std::size_t out_c, std::size_t k, bool with_bias = true)
      : weight(out_c, in_c, k, k), bias(with_bias ? out_c : 0, T(0)) {
    if (k != 1 && k != 3 && k != 5 && k != 7) {
      throw ContractViolation("ConvLayer: kernel size must be 1, 3, 5 or 7, got " +
                              std::to_string(k));
    }
  }

  std::size_t in_c() const { return weight.c(); }
  std::size_t out_c() const { return weight.n(); }
  std::size_t k() const { return weight.h(); }
  std::size_t pad() const { return (k() - 1) / 2; }
  std::size_t param_count() const { return weight.size() + bias.size(); }

  /// Uniform in +-sqrt(1/(in_c*k*k)); bias zero.
  template <typename Rng>
  void init_uniform(Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in_c() * k() * k()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : weight.span()) v = static_cast<T>(dist(rng));
    std::fill(bias.begin(), bias.end(), T(0));
  }

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

template <typename T>
struct ConvGrads {
  Tensor4<T> input;
  Tensor4<T> weight;
  std::vector<T> bias;
};

namespace detail {

// Valid output range [lo, hi) along one axis for kernel offset d (0..k-1).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t len, std::size_t d,
                                                       std::size_t pad) {
  // out index o reads in index o + d - pad, which must lie in [0, len)
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(d) - static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
  const std::ptrdiff_t hi =
      std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(len), static_cast<std::ptrdiff_t>(len) - off);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename T>
void check_conv_input(const Tensor4<T>& input, const ConvLayer<T>& layer) {
  if (input.c() != layer.in_c()) {
    throw ContractViolation("conv2d: input shape " + to_string(input.shape()) +
                            " incompatible with weight shape " + to_string(layer.weight.shape()));
  }
}

}  // namespace detail

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const ConvLayer<T>& layer) {
  detail::check_conv_input(input, layer);
  const std::size_t N = input.n(), H = input.h(), W = input.w();
  const std::size_t O = layer.out_c(), C = layer.in_c(), K = layer.k(), P = layer.pad();
  Tensor4<T> out(N, O, H, W);
  std::vector<std::pair<std::size_t, std::size_t>> xr(K);
  for (std::size_t dx = 0; dx < K; ++dx) xr[dx] = detail::valid_range(W, dx, P);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      std::fill_n(out.plane(n, o), H * W, layer.bias.empty() ? T(0) : layer.bias[o]);
    }
    // row at a time: the output row stays in cache while every tap accumulates
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t o = 0; o < O; ++o) {
        T* d = out.plane(n, o) + y * W;
        for (std::size_t i = 0; i < C; ++i) {
          const T* src = input.plane(n, i);
          const T* wk = layer.weight.data() + layer.weight.index(o, i, 0, 0);
          for (std::size_t dy = 0; dy < K; ++dy) {
            if (y + dy < P || y + dy - P >= H) continue;
            const T* s = src + (y + dy - P) * W;
            for (std::size_t dx = 0; dx < K; ++dx) {
              const T wv = wk[dy * K + dx];
              const auto [x0, x1] = xr[dx];
              for (std::size_t x = x0; x < x1; ++x) d[x] += wv * s[x + dx - P];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& input, const ConvLayer<T>& layer,
                             const Tensor4<T>& grad_out) {
  detail::check_conv_input(input, layer);
  const std::size_t N = input.n(), H = input.h(), W = input.w();
  const std::size_t O = layer.out_c(), C = layer.in_c(), K = layer.k(), P = layer.pad();
  const Shape expect{N, O, H, W};
  if (grad_out.shape() != expect) {
    throw ContractViolation("conv2d_backward: grad_out shape " + to_string(grad_out.shape()) +
                            " does not match forward output shape " + to_string(expect));
  }
  ConvGrads<T> g{Tensor4<T>(input.shape()), Tensor4<T>(layer.weight.shape()),
                 std::vector<T>(layer.bias.size(), T(0))};
  std::vector<std::pair<std::size_t, std::size_t>> xr(K);
  for (std::size_t dx = 0; dx < K; ++dx) xr[dx] = detail::valid_range(W, dx, P);
  for (std::size_t n = 0; n < N; ++n) {
    if (!g.bias.empty()) {
      for (std::size_t o = 0; o < O; ++o) {
        const T* go = grad_out.plane(n, o);
        T bsum = 0;
        for (std::size_t p = 0; p < H * W; ++p) bsum += go[p];
        g.bias[o] += bsum;
      }
    }
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t o = 0; o < O; ++o) {
        const T* gr = grad_out.plane(n, o) + y * W;
        for (std::size_t i = 0; i < C; ++i) {
          const T* src = input.plane(n, i);
          T* gin = g.input.plane(n, i);
          const std::size_t widx = layer.weight.index(o, i, 0, 0);
          const T* wk = layer.weight.data() + widx;
          T* gw = g.weight.data() + widx;
          for (std::size_t dy = 0; dy < K; ++dy) {
            if (y + dy < P || y + dy - P >= H) continue;
            const std::size_t row = (y + dy - P) * W;
            for (std::size_t dx = 0; dx < K; ++dx) {
              const auto [x0, x1] = xr[dx];
              if (x0 == x1) continue;
              const T* s = src + row + (x0 + dx - P);
              T* d = gin + row + (x0 + dx - P);
              const T* gg = gr + x0;
              const std::size_t len = x1 - x0;
              const T wv = wk[dy * K + dx];
              T acc[4] = {0, 0, 0, 0};
              std::size_t x = 0;
              for (; x + 4 <= len; x += 4) {
                acc[0] += gg[x] * s[x];
                acc[1] += gg[x + 1] * s[x + 1];
                acc[2] += gg[x + 2] * s[x + 2];
                acc[3] += gg[x + 3] * s[x + 3];
              }
              for (; x < len; ++x) acc[0] += gg[x] * s[x];
              for (std::size_t xx = 0; xx < len; ++xx) d[xx] += wv * gg[xx];
              gw[dy * K + dx] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise

// NaN passes through so a poisoned weight still surfaces in the loss.
template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x) {
  Tensor4<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] < T(0) ? T(0) : x[i];
  return out;
}

/// Gradient passes where x > 0; zero at and below 0.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out) {
  require_same_shape(x, grad_out, "relu_backward");
  Tensor4<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T>
void relu_inplace(Tensor4<T>& x) {
  for (auto& v : x.span()) if (v < T(0)) v = T(0);
}

template <typename T>
void add_inplace(Tensor4<T>& acc, const Tensor4<T>& v) {
  require_same_shape(acc, v, "add_inplace");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

// ---------------------------------------------------------------------------
// Channel concat / split

template <typename T>
Tensor4<T> concat_channels(std::span<const Tensor4<T>* const> parts) {
  if (parts.empty()) throw ContractViolation("concat_channels: no parts");
  const Shape& s0 = parts.front()->shape();
  std::size_t channels = 0;
  for (const auto* p : parts) {
    const Shape& s = p->shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ContractViolation("concat_channels: spatial mismatch " + to_string(s0) + " vs " +
                              to_string(s));
    }
    channels += s.c;
  }
  Tensor4<T> out(s0.n, channels, s0.h, s0.w);
  const std::size_t plane = s0.h * s0.w;
  for (std::size_t n = 0; n < s0.n; ++n) {
    T* dst = out.plane(n, 0);
    for (const auto* p : parts) {
      const std::size_t len = p->c() * plane;
      std::copy_n(p->plane(n, 0), len, dst);
      dst += len;
    }
  }
  return out;
}

template <typename T>
Tensor4<T> concat_channels(const std::vector<Tensor4<T>>& parts) {
  std::vector<const Tensor4<T>*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(&p);
  return concat_channels<T>(std::span<const Tensor4<T>* const>(ptrs));
}

template <typename T>
std::vector<Tensor4<T>> split_channels(const Tensor4<T>& t, std::span<const std::size_t> sizes) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total != t.c()) {
    throw ContractViolation("split_channels: sizes sum to " + std::to_string(total) +
                            " but tensor has " + std::to_string(t.c()) + " channels");
  }
  std::vector<Tensor4<T>> out;
  out.reserve(sizes.size());
  for (auto s : sizes) out.emplace_back(t.n(), s, t.h(), t.w());
  const std::size_t plane = t.h() * t.w();
  for (std::size_t n = 0; n < t.n(); ++n) {
    const T* src = t.plane(n, 0);
    for (auto& part : out) {
      const std::size_t len = part.c() * plane;
      std::copy_n(src, len, part.plane(n, 0));
      src += len;
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor4<T>> split_channels(const Tensor4<T>& t, const std::vector<std::size_t>& sizes) {
  return split_channels(t, std::span<const std::size_t>(sizes));
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct LossResult {
  T loss;
  Tensor4<T> grad;
};

template <typename T>
LossResult<T> mse_loss(const Tensor4<T>& pred, const Tensor4<T>& target) {
  require_same_shape(pred, target, "mse_loss");
  const T inv = T(1) / static_cast<T>(pred.size());
  LossResult<T> r{T(0), Tensor4<T>(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    r.loss += d * d;
    r.grad[i] = T(2) * d * inv;
  }
  r.loss *= inv;
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

/// A named, mutable view of one parameter tensor and its gradient.
template <typename T>
struct ParamRef {
  std::string name;
  std::span<T> value;
  std::span<const T> grad;
};

/// One velocity buffer per parameter, mirroring its length.
template <typename T>
struct MomentumState {
  std::vector<std::string> names;
  std::vector<std::vector<T>> velocity;

  bool empty() const { return velocity.empty(); }
};

/// v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.
/// Buffers are created zero-initialized on first use.
template <typename T>
void sgd_step(std::span<const ParamRef<T>> params, MomentumState<T>& state, T lr, T momentum,
              T weight_decay) {
  if (state.empty()) {
    for (const auto& p : params) {
      state.names.push_back(p.name);
      state.velocity.emplace_back(p.value.size(), T(0));
    }
  }
  if (state.velocity.size() != params.size()) {
    throw ContractViolation("sgd_step: momentum state holds " +
                            std::to_string(state.velocity.size()) + " buffers for " +
                            std::to_string(params.size()) + " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (p.value.size() != p.grad.size() || p.value.size() != state.velocity[k].size()) {
      throw ContractViolation("sgd_step: size mismatch for parameter '" + p.name + "'");
    }
    T worst = 0;
    bool finite = true;
    for (T g : p.grad) {
      if (!std::isfinite(g)) finite = false;
      else worst = std::max(worst, std::abs(g));
    }
    if (!finite) {
      throw NumericError("sgd_step: non-finite gradient in '" + p.name +
                         "' (max finite |grad| = " + std::to_string(static_cast<double>(worst)) + ")");
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = state.velocity[k];
    auto value = params[k].value;
    auto grad = params[k].grad;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + grad[i] + weight_decay * value[i];
      value[i] -= lr * v[i];
    }
  }
}

template <typename T>
void sgd_step(const std::vector<ParamRef<T>>& params, MomentumState<T>& state, T lr, T momentum,
              T weight_decay) {
  sgd_step(std::span<const ParamRef<T>>(params), state, lr, momentum, weight_decay);
}

}  // namespace evd

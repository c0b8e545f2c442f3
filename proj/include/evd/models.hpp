// K-estimation networks: the single-frame five-conv network and its
// multi-frame variants (input-, K- and output-level fusion).
//
// Single-frame topology:
//   out1 = relu(conv1_1x1 (I))                    3 -> 3
//   out2 = relu(conv2_3x3 (out1))                 3 -> 3
//   out3 = relu(conv3_5x5 ([out1, out2]))         6 -> 3
//   out4 = relu(conv4_7x7 ([out2, out3]))         6 -> 3
//   K    = relu(conv5_3x3 ([out1..out4]))        12 -> 3
//   J    = K*I - K + b
//
// Multi-frame variants keep layers 1..L separate per frame ("columns") and
// share layers L+1..5. A shared layer reading a source produced inside the
// columns reads the concatenation of that source over all columns, in frame
// order. I-level fusion is L = 0 (conv1 reads all frames), K-level fusion at
// conv l is L = l, J-level fusion is L = 5 followed by per-frame clean-image
// generation and a 1x1 merge of the W dehazed frames.
#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "evd/checkpoint.hpp"
#include "evd/config.hpp"
#include "evd/fusion_spec.hpp"
#include "evd/haze.hpp"
#include "evd/tensor.hpp"

namespace evd {

inline constexpr int kNumLayers = 5;
inline constexpr std::size_t kRgb = 3;

namespace topology {

inline constexpr std::array<std::size_t, kNumLayers> kKernel = {1, 3, 5, 7, 3};

// Source 0 is the input frame, source j >= 1 is the output of conv j.
inline const std::vector<int>& sources(int layer) {
  static const std::array<std::vector<int>, kNumLayers> table = {
      std::vector<int>{0}, std::vector<int>{1}, std::vector<int>{1, 2}, std::vector<int>{2, 3},
      std::vector<int>{1, 2, 3, 4}};
  return table[static_cast<std::size_t>(layer - 1)];
}

/// How many column copies of `source` a shared layer sees under `spec`.
inline std::size_t multiplicity(const FusionSpec& spec, int source) {
  return source <= spec.split_depth() ? static_cast<std::size_t>(spec.window) : 1;
}

inline bool is_column_layer(const FusionSpec& spec, int layer) {
  return layer <= spec.split_depth();
}

inline std::size_t in_channels(const FusionSpec& spec, int layer) {
  std::size_t c = 0;
  for (int s : sources(layer)) c += kRgb * (is_column_layer(spec, layer) ? 1 : multiplicity(spec, s));
  return c;
}

inline std::size_t instances(const FusionSpec& spec, int layer) {
  return is_column_layer(spec, layer) ? static_cast<std::size_t>(spec.columns()) : 1;
}

}  // namespace topology

/// Exact number of learnable scalars for a topology.
inline std::size_t param_count(const FusionSpec& spec) {
  spec.validate();
  std::size_t total = 0;
  for (int k = 1; k <= kNumLayers; ++k) {
    const std::size_t kk = topology::kKernel[static_cast<std::size_t>(k - 1)];
    const std::size_t per = topology::in_channels(spec, k) * kRgb * kk * kk + kRgb;
    total += per * topology::instances(spec, k);
  }
  if (spec.has_fuse_layer()) {
    total += kRgb * static_cast<std::size_t>(spec.window) * kRgb;
    // the K-level merge has no bias, the image-level merge does
    if (spec.strategy == Fusion::JLevel) total += kRgb;
  }
  return total;
}

/// Layer weights of a network; also used as the gradient container.
template <typename T>
struct NetParams {
  // layers[k-1] holds one layer per column for column layers, else one.
  std::array<std::vector<ConvLayer<T>>, kNumLayers> layers;
  std::optional<ConvLayer<T>> fuse;

  /// Visits every parameter array as (name, span) in a fixed order.
  template <typename F>
  void visit(F&& f) {
    for (int k = 1; k <= kNumLayers; ++k) {
      auto& inst = layers[static_cast<std::size_t>(k - 1)];
      for (std::size_t c = 0; c < inst.size(); ++c) {
        const std::string base = "conv" + std::to_string(k) +
                                 (inst.size() > 1 ? ".col" + std::to_string(c) : std::string());
        f(base + ".weight", inst[c].weight.span());
        f(base + ".bias", std::span<T>(inst[c].bias));
      }
    }
    if (fuse) {
      f(std::string("fuse.weight"), fuse->weight.span());
      if (!fuse->bias.empty()) f(std::string("fuse.bias"), std::span<T>(fuse->bias));
    }
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<NetParams*>(this)->visit([&](const std::string& name, std::span<T> s) {
      f(name, std::span<const T>(s.data(), s.size()));
    });
  }

  /// Same topology, all zeros.
  NetParams zeros_like() const {
    NetParams z = *this;
    z.visit([](const std::string&, std::span<T> s) { std::fill(s.begin(), s.end(), T(0)); });
    return z;
  }

  void add(const NetParams& other) {
    std::vector<std::span<const T>> src;
    other.visit([&](const std::string&, std::span<const T> s) { src.push_back(s); });
    std::size_t i = 0;
    visit([&](const std::string&, std::span<T> s) {
      const auto o = src[i++];
      for (std::size_t j = 0; j < s.size(); ++j) s[j] += o[j];
    });
  }

  void scale(T factor) {
    visit([&](const std::string&, std::span<T> s) {
      for (auto& v : s) v *= factor;
    });
  }

  std::size_t count() const {
    std::size_t n = 0;
    visit([&](const std::string&, std::span<const T> s) { n += s.size(); });
    return n;
  }

  friend bool operator==(const NetParams&, const NetParams&) = default;
};

/// Pairs each parameter with its gradient for sgd_step.
template <typename T>
std::vector<ParamRef<T>> param_refs(NetParams<T>& params, const NetParams<T>& grads,
                                    const std::string& prefix = "") {
  std::vector<std::span<const T>> g;
  grads.visit([&](const std::string&, std::span<const T> s) { g.push_back(s); });
  std::vector<ParamRef<T>> refs;
  std::size_t i = 0;
  params.visit([&](const std::string& name, std::span<T> s) {
    if (i >= g.size() || g[i].size() != s.size()) {
      throw ContractViolation("param_refs: gradient layout does not match parameters at '" + name + "'");
    }
    refs.push_back({prefix + name, s, g[i++]});
  });
  return refs;
}

template <typename T>
struct NetGrads {
  NetParams<T> params;
  std::vector<Tensor4<T>> frames;  // d loss / d input frame, per window position
};

/// Intermediates of one forward pass.
template <typename T>
struct ForwardCache {
  std::uint64_t net_id = 0;
  std::uint64_t generation = 0;
  std::vector<Tensor4<T>> frames;
  // inputs[k-1][c], outputs[k-1][c]: conv input (concatenated) and post-ReLU output
  std::array<std::vector<Tensor4<T>>, kNumLayers> inputs;
  std::array<std::vector<Tensor4<T>>, kNumLayers> outputs;
  Tensor4<T> fuse_input;
  Tensor4<T> K;                      // K used by the final clean-image stage
  std::vector<Tensor4<T>> column_J;  // J-level only
};

template <typename T>
class MultiFrameNet {
 public:
  MultiFrameNet() : id_(next_id()) {}

  /// Fresh network; weights uniform in +-sqrt(1/fan_in) from `seed`, merge
  /// layers (if any) set to channelwise averaging over columns. conv5 biases
  /// start at 1 so K starts near 1 and J = K*I - K + 1 near the input.
  static MultiFrameNet build(const FusionSpec& spec, std::uint64_t seed, T output_bias = T(1)) {
    spec.validate();
    MultiFrameNet net;
    net.spec_ = spec;
    net.output_bias_ = output_bias;
    net.allocate();
    std::mt19937_64 rng(seed);
    for (auto& inst : net.params_.layers) {
      for (auto& layer : inst) layer.init_uniform(rng);
    }
    for (auto& layer : net.params_.layers[kNumLayers - 1]) std::fill(layer.bias.begin(), layer.bias.end(), T(1));
    if (net.params_.fuse) set_averaging(*net.params_.fuse, static_cast<std::size_t>(spec.window));
    return net;
  }

  /// Multi-frame network whose every column starts from `single`'s weights.
  /// Shared layers that read W column copies of a source get the single
  /// network's weights for that source replicated W times and scaled by 1/W,
  /// so W identical frames reproduce the single-frame output.
  static MultiFrameNet split_init(const MultiFrameNet& single, const FusionSpec& spec) {
    if (!single.spec().is_single()) {
      throw ContractViolation("split_init: source network must be single-frame, got " +
                              single.spec().to_string());
    }
    spec.validate();
    MultiFrameNet net;
    net.spec_ = spec;
    net.output_bias_ = single.output_bias_;
    net.allocate();
    const std::size_t W = static_cast<std::size_t>(spec.window);
    for (int k = 1; k <= kNumLayers; ++k) {
      const auto& src = single.params_.layers[static_cast<std::size_t>(k - 1)][0];
      auto& dst = net.params_.layers[static_cast<std::size_t>(k - 1)];
      if (topology::is_column_layer(spec, k)) {
        for (auto& layer : dst) layer = src;
        continue;
      }
      auto& layer = dst[0];
      layer.bias = src.bias;
      const std::size_t kk = src.k() * src.k();
      std::size_t in_dst = 0;
      std::size_t in_src = 0;
      for (int s : topology::sources(k)) {
        const std::size_t m = topology::multiplicity(spec, s);
        for (std::size_t copy = 0; copy < m; ++copy) {
          for (std::size_t o = 0; o < kRgb; ++o) {
            for (std::size_t ch = 0; ch < kRgb; ++ch) {
              const T* from = src.weight.data() + src.weight.index(o, in_src + ch, 0, 0);
              T* to = layer.weight.data() + layer.weight.index(o, in_dst + ch, 0, 0);
              for (std::size_t q = 0; q < kk; ++q) to[q] = from[q] / static_cast<T>(m);
            }
          }
          in_dst += kRgb;
        }
        in_src += kRgb;
      }
    }
    if (net.params_.fuse) set_averaging(*net.params_.fuse, W);
    return net;
  }

  const FusionSpec& spec() const { return spec_; }
  int window() const { return spec_.window; }
  T output_bias() const { return output_bias_; }
  const NetParams<T>& params() const { return params_; }

  /// Mutable access invalidates outstanding forward caches.
  NetParams<T>& mutable_params() {
    ++generation_;
    return params_;
  }

  std::size_t param_count() const { return params_.count(); }

  /// Forward pass on W frames, each (n, 3, h, w), ordered in time.
  Tensor4<T> forward(const std::vector<Tensor4<T>>& frames, ForwardCache<T>* cache = nullptr) const {
    check_frames(frames);
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    c = ForwardCache<T>{};
    c.net_id = id_;
    c.generation = generation_;
    c.frames = frames;
    const int L = spec_.split_depth();
    const std::size_t C = static_cast<std::size_t>(spec_.columns());

    for (int k = 1; k <= kNumLayers; ++k) {
      const std::size_t ki = static_cast<std::size_t>(k - 1);
      const auto& inst = params_.layers[ki];
      for (std::size_t col = 0; col < inst.size(); ++col) {
        std::vector<const Tensor4<T>*> parts;
        for (int s : topology::sources(k)) {
          if (k <= L) {
            parts.push_back(s == 0 ? &c.frames[col] : &c.outputs[static_cast<std::size_t>(s - 1)][col]);
          } else if (s == 0) {
            for (const auto& f : c.frames) parts.push_back(&f);
          } else {
            for (const auto& o : c.outputs[static_cast<std::size_t>(s - 1)]) parts.push_back(&o);
          }
        }
        Tensor4<T> in = parts.size() == 1 ? *parts[0]
                                          : concat_channels<T>(std::span<const Tensor4<T>* const>(parts));
        Tensor4<T> out = conv2d_forward(in, inst[col]);
        relu_inplace(out);
        c.inputs[ki].push_back(std::move(in));
        c.outputs[ki].push_back(std::move(out));
      }
    }

    const Tensor4<T>& center = c.frames[static_cast<std::size_t>(spec_.window / 2)];
    const auto& out5 = c.outputs[kNumLayers - 1];
    if (!spec_.has_fuse_layer()) {
      c.K = out5[0];
      return apply_K(center, c.K, output_bias_);
    }
    if (spec_.strategy == Fusion::KLevel) {
      c.fuse_input = concat_channels(out5);
      c.K = conv2d_forward(c.fuse_input, *params_.fuse);
      relu_inplace(c.K);
      return apply_K(center, c.K, output_bias_);
    }
    // J-level: dehaze every frame with its own K, then merge the images.
    for (std::size_t col = 0; col < C; ++col) {
      c.column_J.push_back(apply_K(c.frames[col], out5[col], output_bias_));
    }
    c.fuse_input = concat_channels(c.column_J);
    return conv2d_forward(c.fuse_input, *params_.fuse);
  }

  /// Exact gradients of sum(grad_out * forward output).
  NetGrads<T> backward(const ForwardCache<T>& c, const Tensor4<T>& grad_out) const {
    if (c.net_id != id_ || c.generation != generation_) {
      throw ContractViolation("backward: forward cache is stale (network changed since forward)");
    }
    const std::size_t W = static_cast<std::size_t>(spec_.window);
    const std::size_t C = static_cast<std::size_t>(spec_.columns());
    const int L = spec_.split_depth();
    NetGrads<T> g;
    g.params = params_.zeros_like();
    for (const auto& f : c.frames) g.frames.emplace_back(f.shape());

    // d loss / d post-ReLU output of each layer instance
    std::array<std::vector<Tensor4<T>>, kNumLayers> grad_out_k;
    for (std::size_t k = 0; k < static_cast<std::size_t>(kNumLayers); ++k) {
      for (const auto& o : c.outputs[k]) grad_out_k[k].emplace_back(o.shape());
    }

    const std::size_t center = W / 2;
    auto& g5 = grad_out_k[kNumLayers - 1];
    if (!spec_.has_fuse_layer()) {
      require_same_shape(grad_out, c.K, "backward");
      auto gk = apply_K_backward(c.frames[center], c.K, grad_out);
      add_inplace(g.frames[center], gk.hazy);
      add_inplace(g5[0], gk.K);
    } else if (spec_.strategy == Fusion::KLevel) {
      require_same_shape(grad_out, c.K, "backward");
      auto gk = apply_K_backward(c.frames[center], c.K, grad_out);
      add_inplace(g.frames[center], gk.hazy);
      auto gpre = relu_backward(c.K, gk.K);
      auto cg = conv2d_backward(c.fuse_input, *params_.fuse, gpre);
      g.params.fuse->weight = std::move(cg.weight);
      auto parts = split_channels(cg.input, std::vector<std::size_t>(C, kRgb));
      for (std::size_t col = 0; col < C; ++col) add_inplace(g5[col], parts[col]);
    } else {
      auto cg = conv2d_backward(c.fuse_input, *params_.fuse, grad_out);
      g.params.fuse->weight = std::move(cg.weight);
      g.params.fuse->bias = std::move(cg.bias);
      auto parts = split_channels(cg.input, std::vector<std::size_t>(C, kRgb));
      for (std::size_t col = 0; col < C; ++col) {
        auto gk = apply_K_backward(c.frames[col], c.outputs[kNumLayers - 1][col], parts[col]);
        add_inplace(g.frames[col], gk.hazy);
        add_inplace(g5[col], gk.K);
      }
    }

    for (int k = kNumLayers; k >= 1; --k) {
      const std::size_t ki = static_cast<std::size_t>(k - 1);
      const auto& inst = params_.layers[ki];
      for (std::size_t col = 0; col < inst.size(); ++col) {
        auto gpre = relu_backward(c.outputs[ki][col], grad_out_k[ki][col]);
        auto cg = conv2d_backward(c.inputs[ki][col], inst[col], gpre);
        auto& gl = g.params.layers[ki][col];
        gl.weight = std::move(cg.weight);
        gl.bias = std::move(cg.bias);
        // route the input gradient back to its sources, in concat order
        std::vector<std::size_t> sizes;
        std::vector<Tensor4<T>*> targets;
        for (int s : topology::sources(k)) {
          if (k <= L) {
            sizes.push_back(kRgb);
            targets.push_back(s == 0 ? &g.frames[col] : &grad_out_k[static_cast<std::size_t>(s - 1)][col]);
          } else if (s == 0) {
            for (std::size_t f = 0; f < W; ++f) {
              sizes.push_back(kRgb);
              targets.push_back(&g.frames[f]);
            }
          } else {
            for (auto& t : grad_out_k[static_cast<std::size_t>(s - 1)]) {
              sizes.push_back(kRgb);
              targets.push_back(&t);
            }
          }
        }
        auto parts = split_channels(cg.input, sizes);
        for (std::size_t p = 0; p < parts.size(); ++p) add_inplace(*targets[p], parts[p]);
      }
    }
    return g;
  }

  /// Weights and topology metadata; `prefix` namespaces every key and name.
  Checkpoint to_checkpoint(const std::string& prefix = "") const {
    Checkpoint ckpt;
    ckpt.meta[prefix + "spec"] = spec_.strategy_name();
    ckpt.meta[prefix + "W"] = std::to_string(spec_.window);
    ckpt.meta[prefix + "output_bias"] = format_real(static_cast<double>(output_bias_));
    params_.visit([&](const std::string& name, std::span<const T> s) {
      ckpt.add(prefix + name, span_tensor(s, tensor_shape(name)));
    });
    return ckpt;
  }

  static MultiFrameNet from_checkpoint(const Checkpoint& ckpt, const std::string& prefix = "") {
    const auto get_meta = [&](const std::string& key) { return ckpt.meta_at(prefix + key); };
    const FusionSpec spec = FusionSpec::parse(get_meta("spec"), std::stoi(get_meta("W")));
    MultiFrameNet net;
    net.spec_ = spec;
    net.output_bias_ = static_cast<T>(std::stod(get_meta("output_bias")));
    net.allocate();
    net.params_.visit([&](const std::string& name, std::span<T> s) {
      const auto& t = ckpt.at(prefix + name);
      if (t.size() != s.size()) {
        throw ContractViolation("checkpoint tensor '" + prefix + name + "' has " +
                                std::to_string(t.size()) + " values, topology " + spec.to_string() +
                                " expects " + std::to_string(s.size()));
      }
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<T>(t[i]);
    });
    return net;
  }

  /// Shape of a named parameter as stored in checkpoints.
  Shape tensor_shape(const std::string& name) const {
    Shape found{};
    const_cast<MultiFrameNet*>(this)->for_each_layer([&](const std::string& base, const ConvLayer<T>& l) {
      if (name == base + ".weight") found = l.weight.shape();
      if (name == base + ".bias") found = Shape{l.bias.size(), 1, 1, 1};
    });
    return found;
  }

  template <typename U>
  MultiFrameNet<U> cast() const {
    return MultiFrameNet<U>::from_checkpoint(to_checkpoint());
  }

 private:
  template <typename F>
  void for_each_layer(F&& f) {
    for (int k = 1; k <= kNumLayers; ++k) {
      auto& inst = params_.layers[static_cast<std::size_t>(k - 1)];
      for (std::size_t c = 0; c < inst.size(); ++c) {
        f("conv" + std::to_string(k) + (inst.size() > 1 ? ".col" + std::to_string(c) : std::string()),
          inst[c]);
      }
    }
    if (params_.fuse) f(std::string("fuse"), *params_.fuse);
  }

  void allocate() {
    for (int k = 1; k <= kNumLayers; ++k) {
      const std::size_t ki = static_cast<std::size_t>(k - 1);
      params_.layers[ki].assign(topology::instances(spec_, k),
                                ConvLayer<T>(topology::in_channels(spec_, k), kRgb, topology::kKernel[ki]));
    }
    if (spec_.has_fuse_layer()) {
      params_.fuse.emplace(kRgb * static_cast<std::size_t>(spec_.window), kRgb, 1,
                           spec_.strategy == Fusion::JLevel);
    }
  }

  static void set_averaging(ConvLayer<T>& fuse, std::size_t columns) {
    fuse.weight.fill(T(0));
    for (std::size_t col = 0; col < columns; ++col) {
      for (std::size_t ch = 0; ch < kRgb; ++ch) {
        fuse.weight(ch, col * kRgb + ch, 0, 0) = T(1) / static_cast<T>(columns);
      }
    }
    std::fill(fuse.bias.begin(), fuse.bias.end(), T(0));
  }

  void check_frames(const std::vector<Tensor4<T>>& frames) const {
    if (frames.size() != static_cast<std::size_t>(spec_.window)) {
      throw ContractViolation("forward: network " + spec_.to_string() + " expects " +
                              std::to_string(spec_.window) + " frames, got " +
                              std::to_string(frames.size()));
    }
    for (const auto& f : frames) {
      if (f.c() != kRgb || f.shape() != frames.front().shape()) {
        throw ContractViolation("forward: frames must share one (n,3,h,w) shape; got " +
                                to_string(f.shape()) + " and " + to_string(frames.front().shape()));
      }
    }
  }

  static Tensor4<double> span_tensor(std::span<const T> s, Shape shape) {
    Tensor4<double> t(shape);
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<double>(s[i]);
    return t;
  }

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter++;
  }

  FusionSpec spec_ = FusionSpec::single();
  T output_bias_ = T(0);
  NetParams<T> params_;
  std::uint64_t id_;
  std::uint64_t generation_ = 0;

  template <typename>
  friend class MultiFrameNet;

 public:
  // Copies get a fresh identity so caches from the source stay bound to it.
  MultiFrameNet(const MultiFrameNet& o)
      : spec_(o.spec_), output_bias_(o.output_bias_), params_(o.params_), id_(next_id()) {}
  MultiFrameNet& operator=(const MultiFrameNet& o) {
    spec_ = o.spec_;
    output_bias_ = o.output_bias_;
    params_ = o.params_;
    ++generation_;
    return *this;
  }
  MultiFrameNet(MultiFrameNet&&) noexcept = default;
  MultiFrameNet& operator=(MultiFrameNet&& o) noexcept {
    spec_ = o.spec_;
    output_bias_ = o.output_bias_;
    params_ = std::move(o.params_);
    id_ = o.id_;
    generation_ = o.generation_ + 1;
    return *this;
  }
};

template <typename T>
using SingleFrameNet = MultiFrameNet<T>;

/// Checkpoint with network weights, optimizer velocity and metadata.
template <typename T>
Checkpoint make_checkpoint(const MultiFrameNet<T>& net, const MomentumState<T>* momentum,
                           const std::map<std::string, std::string>& meta) {
  Checkpoint ckpt = net.to_checkpoint();
  for (const auto& [k, v] : meta) ckpt.meta[k] = v;
  if (momentum && !momentum->empty()) {
    for (std::size_t i = 0; i < momentum->names.size(); ++i) {
      const auto& name = momentum->names[i];
      const Shape s = net.tensor_shape(name);
      Tensor4<double> t(s);
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<double>(momentum->velocity[i][j]);
      ckpt.add("momentum/" + name, std::move(t));
    }
  }
  return ckpt;
}

/// Restores velocity buffers saved by make_checkpoint; empty if none stored.
template <typename T>
MomentumState<T> momentum_from_checkpoint(const MultiFrameNet<T>& net, const Checkpoint& ckpt) {
  MomentumState<T> state;
  if (!ckpt.find("momentum/conv1.weight") && !ckpt.find("momentum/conv1.col0.weight")) return state;
  net.params().visit([&](const std::string& name, std::span<const T> s) {
    const auto& t = ckpt.at("momentum/" + name);
    if (t.size() != s.size()) throw ContractViolation("momentum tensor size mismatch for '" + name + "'");
    state.names.push_back(name);
    std::vector<T> v(t.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(t[i]);
    state.velocity.push_back(std::move(v));
  });
  return state;
}

}  // namespace evd

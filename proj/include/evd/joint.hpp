// Joint dehazing + detection: WH sliding dehazing windows feed a WH-frame
// grid detection head. Labels and evaluation are cell-level.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "evd/checkpoint.hpp"
#include "evd/config.hpp"
#include "evd/dataset.hpp"
#include "evd/image_io.hpp"
#include "evd/metrics.hpp"
#include "evd/models.hpp"
#include "evd/tensor.hpp"
#include "evd/trainer.hpp"

namespace evd {

inline constexpr std::size_t kToyClasses = 2;  // rectangle, disk
inline constexpr std::size_t kBranchChannels = 8;
inline constexpr std::size_t kHeadChannels = 16;

struct TreeSpec {
  FusionSpec dehaze = FusionSpec::k_level(2, 5);  // its window is WL
  int high_window = 3;                            // WH
  std::size_t grid = 4;                           // S

  int low_window() const { return dehaze.window; }
  int overall() const { return low_window() + high_window - 1; }

  void validate() const {
    dehaze.validate();
    if (high_window < 1 || high_window % 2 == 0) {
      throw ContractViolation("TreeSpec: high window must be odd and >= 1, got " +
                              std::to_string(high_window));
    }
    if (grid < 1) throw ContractViolation("TreeSpec: grid must be >= 1");
  }

  /// Input positions (0-based) whose dehazed versions feed the head.
  std::vector<std::size_t> dehazed_indices() const {
    std::vector<std::size_t> idx;
    for (int j = 0; j < high_window; ++j) idx.push_back(static_cast<std::size_t>(j + low_window() / 2));
    return idx;
  }

  std::string to_string() const {
    return "WL=" + std::to_string(low_window()) + ",WH=" + std::to_string(high_window) +
           ",S=" + std::to_string(grid) + ",dehaze=" + dehaze.to_string();
  }
};

// ---------------------------------------------------------------------------
// Average pooling to an S x S grid

template <typename T>
Tensor4<T> avg_pool_forward(const Tensor4<T>& x, std::size_t s) {
  if (s == 0 || x.h() % s != 0 || x.w() % s != 0) {
    throw ContractViolation("avg_pool: " + to_string(x.shape()) + " not divisible into a " +
                            std::to_string(s) + "x" + std::to_string(s) + " grid");
  }
  const std::size_t ch = x.h() / s, cw = x.w() / s;
  const T inv = T(1) / static_cast<T>(ch * cw);
  Tensor4<T> out(x.n(), x.c(), s, s);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t y = 0; y < x.h(); ++y)
        for (std::size_t xx = 0; xx < x.w(); ++xx) out(n, c, y / ch, xx / cw) += x(n, c, y, xx) * inv;
  return out;
}

template <typename T>
Tensor4<T> avg_pool_backward(const Shape& input, const Tensor4<T>& grad_out) {
  const std::size_t s = grad_out.h();
  const std::size_t ch = input.h / s, cw = input.w / s;
  const T inv = T(1) / static_cast<T>(ch * cw);
  Tensor4<T> g(input);
  for (std::size_t n = 0; n < input.n; ++n)
    for (std::size_t c = 0; c < input.c; ++c)
      for (std::size_t y = 0; y < input.h; ++y)
        for (std::size_t x = 0; x < input.w; ++x) g(n, c, y, x) = grad_out(n, c, y / ch, x / cw) * inv;
  return g;
}

// ---------------------------------------------------------------------------
// Detection head

template <typename T>
struct HeadParams {
  std::vector<ConvLayer<T>> branch1, branch2;  // one per input frame
  ConvLayer<T> fuse;                           // 8*WH -> 16, k3
  ConvLayer<T> out;                            // 16 -> 1 + classes, k1

  /// (name, span) for every array; `post_fusion_only` restricts to fuse/out.
  template <typename F>
  void visit(F&& f, bool post_fusion_only = false) {
    if (!post_fusion_only) {
      for (std::size_t b = 0; b < branch1.size(); ++b) {
        const std::string base = "head.branch" + std::to_string(b);
        f(base + ".conv1.weight", branch1[b].weight.span());
        f(base + ".conv1.bias", std::span<T>(branch1[b].bias));
        f(base + ".conv2.weight", branch2[b].weight.span());
        f(base + ".conv2.bias", std::span<T>(branch2[b].bias));
      }
    }
    f(std::string("head.fuse.weight"), fuse.weight.span());
    f(std::string("head.fuse.bias"), std::span<T>(fuse.bias));
    f(std::string("head.out.weight"), out.weight.span());
    f(std::string("head.out.bias"), std::span<T>(out.bias));
  }

  template <typename F>
  void visit(F&& f, bool post_fusion_only = false) const {
    const_cast<HeadParams*>(this)->visit(
        [&](const std::string& name, std::span<T> s) { f(name, std::span<const T>(s.data(), s.size())); },
        post_fusion_only);
  }

  HeadParams zeros_like() const {
    HeadParams z = *this;
    z.visit([](const std::string&, std::span<T> s) { std::fill(s.begin(), s.end(), T(0)); });
    return z;
  }

  std::size_t count() const {
    std::size_t n = 0;
    visit([&](const std::string&, std::span<const T> s) { n += s.size(); });
    return n;
  }

  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

template <typename T>
struct HeadCache {
  std::vector<Tensor4<T>> frames;
  std::vector<Tensor4<T>> b1, b2;  // post-ReLU branch outputs
  Tensor4<T> fused_in, fused;      // concat, post-ReLU fuse output
  Tensor4<T> pooled;
};

template <typename T>
struct HeadGrads {
  HeadParams<T> params;
  std::vector<Tensor4<T>> frames;
};

template <typename T>
class ToyDetectorHead {
 public:
  ToyDetectorHead() = default;

  static ToyDetectorHead build(int frames, std::size_t grid, std::uint64_t seed) {
    if (frames < 1) throw ContractViolation("ToyDetectorHead: need at least one frame");
    ToyDetectorHead h;
    h.grid_ = grid;
    const std::size_t wh = static_cast<std::size_t>(frames);
    std::mt19937_64 rng(seed ^ 0xde7ec7ULL);
    for (std::size_t b = 0; b < wh; ++b) {
      h.p_.branch1.emplace_back(kRgb, kBranchChannels, 3);
      h.p_.branch2.emplace_back(kBranchChannels, kBranchChannels, 3);
      h.p_.branch1.back().init_uniform(rng);
      h.p_.branch2.back().init_uniform(rng);
    }
    h.p_.fuse = ConvLayer<T>(kBranchChannels * wh, kHeadChannels, 3);
    h.p_.fuse.init_uniform(rng);
    h.p_.out = ConvLayer<T>(kHeadChannels, 1 + kToyClasses, 1);
    h.p_.out.init_uniform(rng);
    return h;
  }

  /// Branches copied, fuse input blocks replicated and scaled by 1/WH, so
  /// identical frames reproduce the single-frame head.
  static ToyDetectorHead split_init(const ToyDetectorHead& single, int frames) {
    if (single.frames() != 1) throw ContractViolation("split_init: source head must be single-frame");
    if (frames < 1) throw ContractViolation("split_init: need at least one frame");
    const std::size_t wh = static_cast<std::size_t>(frames);
    ToyDetectorHead h;
    h.grid_ = single.grid_;
    h.p_.branch1.assign(wh, single.p_.branch1[0]);
    h.p_.branch2.assign(wh, single.p_.branch2[0]);
    h.p_.fuse = ConvLayer<T>(kBranchChannels * wh, kHeadChannels, 3);
    h.p_.fuse.bias = single.p_.fuse.bias;
    const auto& src = single.p_.fuse.weight;
    const T scale = T(1) / static_cast<T>(wh);
    for (std::size_t o = 0; o < kHeadChannels; ++o)
      for (std::size_t b = 0; b < wh; ++b)
        for (std::size_t c = 0; c < kBranchChannels; ++c)
          for (std::size_t y = 0; y < 3; ++y)
            for (std::size_t x = 0; x < 3; ++x)
              h.p_.fuse.weight(o, b * kBranchChannels + c, y, x) = src(o, c, y, x) * scale;
    h.p_.out = single.p_.out;
    return h;
  }

  int frames() const { return static_cast<int>(p_.branch1.size()); }
  std::size_t grid() const { return grid_; }
  const HeadParams<T>& params() const { return p_; }
  HeadParams<T>& mutable_params() { return p_; }
  std::size_t param_count() const { return p_.count(); }

  /// Logits (n, 1 + classes, S, S): objectness then class scores.
  Tensor4<T> forward(const std::vector<Tensor4<T>>& frames, HeadCache<T>* cache = nullptr) const {
    if (static_cast<int>(frames.size()) != this->frames()) {
      throw ContractViolation("ToyDetectorHead: expected " + std::to_string(this->frames()) +
                              " frames, got " + std::to_string(frames.size()));
    }
    HeadCache<T> local;
    HeadCache<T>& c = cache ? *cache : local;
    c = HeadCache<T>{};
    c.frames = frames;
    for (std::size_t b = 0; b < frames.size(); ++b) {
      require_same_shape(frames[b], frames[0], "ToyDetectorHead");
      c.b1.push_back(conv2d_forward(frames[b], p_.branch1[b]));
      relu_inplace(c.b1.back());
      c.b2.push_back(conv2d_forward(c.b1.back(), p_.branch2[b]));
      relu_inplace(c.b2.back());
    }
    c.fused_in = concat_channels(c.b2);
    c.fused = conv2d_forward(c.fused_in, p_.fuse);
    relu_inplace(c.fused);
    c.pooled = avg_pool_forward(c.fused, grid_);
    return conv2d_forward(c.pooled, p_.out);
  }

  /// `full` false stops after the post-fusion layers (branch and frame
  /// gradients left empty).
  HeadGrads<T> backward(const HeadCache<T>& c, const Tensor4<T>& grad_out, bool full = true) const {
    HeadGrads<T> g;
    g.params = p_.zeros_like();
    auto go = conv2d_backward(c.pooled, p_.out, grad_out);
    g.params.out.weight = std::move(go.weight);
    g.params.out.bias = std::move(go.bias);
    auto gfused = relu_backward(c.fused, avg_pool_backward(c.fused.shape(), go.input));
    auto gf = conv2d_backward(c.fused_in, p_.fuse, gfused);
    g.params.fuse.weight = std::move(gf.weight);
    g.params.fuse.bias = std::move(gf.bias);
    if (!full) return g;
    auto parts = split_channels(gf.input, std::vector<std::size_t>(p_.branch1.size(), kBranchChannels));
    for (std::size_t b = 0; b < parts.size(); ++b) {
      auto g2 = conv2d_backward(c.b1[b], p_.branch2[b], relu_backward(c.b2[b], parts[b]));
      auto g1 = conv2d_backward(c.frames[b], p_.branch1[b], relu_backward(c.b1[b], g2.input));
      g.params.branch2[b].weight = std::move(g2.weight);
      g.params.branch2[b].bias = std::move(g2.bias);
      g.params.branch1[b].weight = std::move(g1.weight);
      g.params.branch1[b].bias = std::move(g1.bias);
      g.frames.push_back(std::move(g1.input));
    }
    return g;
  }

  Shape tensor_shape(const std::string& name) const {
    Shape found{};
    auto check = [&](const std::string& base, const ConvLayer<T>& l) {
      if (name == base + ".weight") found = l.weight.shape();
      if (name == base + ".bias") found = Shape{l.bias.size(), 1, 1, 1};
    };
    for (std::size_t b = 0; b < p_.branch1.size(); ++b) {
      check("head.branch" + std::to_string(b) + ".conv1", p_.branch1[b]);
      check("head.branch" + std::to_string(b) + ".conv2", p_.branch2[b]);
    }
    check("head.fuse", p_.fuse);
    check("head.out", p_.out);
    return found;
  }

 private:
  HeadParams<T> p_;
  std::size_t grid_ = 4;
};

// ---------------------------------------------------------------------------
// Labels and loss

struct GridLabel {
  std::size_t grid = 0;
  std::vector<std::uint8_t> present;  // row-major S*S
  std::vector<int> cls;               // class id where present, else -1

  std::size_t cells() const { return grid * grid; }
};

/// A cell holds an object when one shape covers at least half its pixels;
/// the class is that of the shape covering most of it.
inline GridLabel rasterize_label(const std::vector<int>& owner, const SceneSpec& scene, std::size_t grid) {
  const std::size_t h = scene.height, w = scene.width;
  if (grid == 0 || h % grid != 0 || w % grid != 0) {
    throw ContractViolation("rasterize_label: " + std::to_string(w) + "x" + std::to_string(h) +
                            " frame not divisible into a " + std::to_string(grid) + " grid");
  }
  if (owner.size() != h * w) throw ContractViolation("rasterize_label: owner map size mismatch");
  GridLabel lab{grid, std::vector<std::uint8_t>(grid * grid, 0), std::vector<int>(grid * grid, -1)};
  const std::size_t ch = h / grid, cw = w / grid;
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      std::vector<std::size_t> votes(scene.shapes.size(), 0);
      for (std::size_t y = gy * ch; y < (gy + 1) * ch; ++y)
        for (std::size_t x = gx * cw; x < (gx + 1) * cw; ++x)
          if (owner[y * w + x] >= 0) ++votes[static_cast<std::size_t>(owner[y * w + x])];
      if (votes.empty()) continue;
      const auto best = std::max_element(votes.begin(), votes.end());
      if (2 * *best >= ch * cw) {
        const std::size_t cell = gy * grid + gx;
        lab.present[cell] = 1;
        lab.cls[cell] = scene.shapes[static_cast<std::size_t>(best - votes.begin())].class_id();
      }
    }
  }
  return lab;
}

template <typename T>
struct LabeledVideo {
  Video<T> video;
  std::vector<GridLabel> labels;  // one per frame
};

template <typename T = double>
LabeledVideo<T> make_labeled_toy_video(const std::string& id, const SceneSpec& scene, std::size_t n_frames,
                                       const HazeParams& haze, Split split, std::size_t grid,
                                       bool quantize = true) {
  auto frames = generate_toy_scene<T>(scene, n_frames);
  LabeledVideo<T> lv;
  lv.video.id = id;
  lv.video.split = split;
  lv.video.clean = std::move(frames.clean);
  lv.video.depth = std::move(frames.depth);
  synthesize_video(lv.video, haze, quantize);
  for (const auto& o : frames.owner) lv.labels.push_back(rasterize_label(o, scene, grid));
  return lv;
}

template <typename T = double>
std::vector<LabeledVideo<T>> make_labeled_toy_dataset(const ToyDatasetSpec& spec, std::size_t grid,
                                                      bool quantize = true) {
  spec.validate();
  std::vector<LabeledVideo<T>> out;
  for (std::size_t i = 0; i < spec.n_train + spec.n_test; ++i) {
    const auto vs = spec.video_seed(i);
    char id[32];
    std::snprintf(id, sizeof id, "toy%03zu", i);
    out.push_back(make_labeled_toy_video<T>(id, SceneSpec::random(vs, spec.width, spec.height, spec.shapes),
                                            spec.frames, assign_haze_params(vs, spec.haze),
                                            i < spec.n_train ? Split::Train : Split::Test, grid, quantize));
  }
  return out;
}

template <typename T>
struct DetectionLoss {
  double loss = 0;
  Tensor4<T> grad;
};

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// log(1 + exp(z)) without overflow
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Mean over cells of BCE(objectness) + [object] * CE(class).
template <typename T>
DetectionLoss<T> detection_loss(const Tensor4<T>& logits, const std::vector<GridLabel>& labels) {
  if (labels.size() != logits.n()) {
    throw ContractViolation("detection_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                            std::to_string(logits.n()));
  }
  const std::size_t nc = logits.c() - 1;
  if (logits.c() < 2) throw ContractViolation("detection_loss: need objectness and class channels");
  DetectionLoss<T> r{0.0, Tensor4<T>(logits.shape())};
  const double inv = 1.0 / static_cast<double>(logits.n() * logits.h() * logits.w());
  std::vector<double> z(nc), p(nc);
  for (std::size_t n = 0; n < logits.n(); ++n) {
    const auto& lab = labels[n];
    if (lab.grid != logits.h() || lab.grid != logits.w()) {
      throw ContractViolation("detection_loss: label grid " + std::to_string(lab.grid) +
                              " does not match logits " + to_string(logits.shape()));
    }
    for (std::size_t y = 0; y < lab.grid; ++y) {
      for (std::size_t x = 0; x < lab.grid; ++x) {
        const std::size_t cell = y * lab.grid + x;
        const double o = static_cast<double>(logits(n, 0, y, x));
        const double obj = lab.present[cell] ? 1.0 : 0.0;
        // BCE with logits: softplus(o) - obj*o
        r.loss += (softplus(o) - obj * o) * inv;
        r.grad(n, 0, y, x) = static_cast<T>((sigmoid(o) - obj) * inv);
        if (!lab.present[cell]) continue;
        const int k = lab.cls[cell];
        if (k < 0 || static_cast<std::size_t>(k) >= nc) {
          throw ContractViolation("detection_loss: class id " + std::to_string(k) + " out of range");
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < nc; ++c) mx = std::max(mx, z[c] = static_cast<double>(logits(n, c + 1, y, x)));
        double sum = 0;
        for (std::size_t c = 0; c < nc; ++c) sum += p[c] = std::exp(z[c] - mx);
        r.loss += (std::log(sum) + mx - z[static_cast<std::size_t>(k)]) * inv;
        for (std::size_t c = 0; c < nc; ++c) {
          r.grad(n, c + 1, y, x) =
              static_cast<T>((p[c] / sum - (c == static_cast<std::size_t>(k) ? 1.0 : 0.0)) * inv);
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Tree model

template <typename T>
struct TreeCache {
  std::vector<ForwardCache<T>> dehaze;  // one per high-level position
  std::vector<Tensor4<T>> dehazed;
  HeadCache<T> head;
};

template <typename T>
struct TreeGrads {
  NetParams<T> dehaze;
  HeadParams<T> head;
  std::vector<Tensor4<T>> frames;  // d loss / d input frame
};

template <typename T>
struct TreeModel {
  TreeSpec spec;
  MultiFrameNet<T> dehaze;
  ToyDetectorHead<T> head;

  void validate() const {
    spec.validate();
    if (!(dehaze.spec() == spec.dehaze)) {
      throw ContractViolation("TreeModel: dehazer is " + dehaze.spec().to_string() + ", tree expects " +
                              spec.dehaze.to_string());
    }
    if (head.frames() != spec.high_window || head.grid() != spec.grid) {
      throw ContractViolation("TreeModel: head does not match " + spec.to_string());
    }
  }
};

/// Dehazes the WH sliding low-level windows (shared weights) and runs the head.
template <typename T>
Tensor4<T> tree_forward(const TreeModel<T>& m, const std::vector<Tensor4<T>>& frames,
                        TreeCache<T>* cache = nullptr) {
  const int overall = m.spec.overall(), wl = m.spec.low_window();
  if (static_cast<int>(frames.size()) != overall) {
    throw ContractViolation("tree_forward: expected " + std::to_string(overall) + " frames (WL+WH-1), got " +
                            std::to_string(frames.size()));
  }
  TreeCache<T> local;
  TreeCache<T>& c = cache ? *cache : local;
  c = TreeCache<T>{};
  for (int j = 0; j < m.spec.high_window; ++j) {
    std::vector<Tensor4<T>> win(frames.begin() + j, frames.begin() + j + wl);
    c.dehaze.emplace_back();
    c.dehazed.push_back(m.dehaze.forward(win, cache ? &c.dehaze.back() : nullptr));
  }
  return m.head.forward(c.dehazed, &c.head);
}

/// `extra_dehazed`, when non-empty, adds to the gradient arriving at each
/// dehazed frame (used by an auxiliary reconstruction loss).
template <typename T>
TreeGrads<T> tree_backward(const TreeModel<T>& m, const TreeCache<T>& c, const Tensor4<T>& grad_out,
                           const std::vector<Tensor4<T>>& extra_dehazed = {}) {
  if (c.dehaze.size() != static_cast<std::size_t>(m.spec.high_window) || c.dehaze[0].frames.empty()) {
    throw ContractViolation("tree_backward: cache was not filled by tree_forward");
  }
  TreeGrads<T> g;
  auto hg = m.head.backward(c.head, grad_out);
  g.head = std::move(hg.params);
  g.dehaze = m.dehaze.params().zeros_like();
  const std::size_t wl = static_cast<std::size_t>(m.spec.low_window());
  for (const auto& f : c.dehaze[0].frames) g.frames.emplace_back(f.shape());
  for (int j = 1; j < m.spec.high_window; ++j) g.frames.emplace_back(c.dehaze[0].frames[0].shape());
  for (std::size_t j = 0; j < c.dehaze.size(); ++j) {
    Tensor4<T> gj = hg.frames[j];
    if (!extra_dehazed.empty()) add_inplace(gj, extra_dehazed.at(j));
    auto ng = m.dehaze.backward(c.dehaze[j], gj);
    g.dehaze.add(ng.params);
    for (std::size_t f = 0; f < wl; ++f) add_inplace(g.frames[j + f], ng.frames[f]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
Checkpoint tree_to_checkpoint(const TreeModel<T>& m) {
  Checkpoint ckpt = m.dehaze.to_checkpoint("dehaze/");
  ckpt.meta["kind"] = "tree";
  ckpt.meta["tree.WH"] = std::to_string(m.spec.high_window);
  ckpt.meta["tree.grid"] = std::to_string(m.spec.grid);
  m.head.params().visit([&](const std::string& name, std::span<const T> s) {
    Tensor4<double> t(m.head.tensor_shape(name));
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<double>(s[i]);
    ckpt.add(name, std::move(t));
  });
  return ckpt;
}

template <typename T>
TreeModel<T> tree_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.count("kind") || ckpt.meta.at("kind") != "tree") {
    throw ContractViolation("checkpoint does not hold a joint tree model");
  }
  TreeModel<T> m;
  m.dehaze = MultiFrameNet<T>::from_checkpoint(ckpt, "dehaze/");
  m.spec.dehaze = m.dehaze.spec();
  m.spec.high_window = std::stoi(ckpt.meta_at("tree.WH"));
  m.spec.grid = static_cast<std::size_t>(std::stoul(ckpt.meta_at("tree.grid")));
  m.spec.validate();
  m.head = ToyDetectorHead<T>::build(m.spec.high_window, m.spec.grid, 0);
  m.head.mutable_params().visit([&](const std::string& name, std::span<T> s) {
    const auto& t = ckpt.at(name);
    if (t.size() != s.size()) throw ContractViolation("checkpoint tensor '" + name + "' has the wrong size");
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<T>(t[i]);
  });
  return m;
}

// ---------------------------------------------------------------------------
// Training

struct JointConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch = 4;
  long budget = 1000;            // total iterations over both phases
  double phase1_fraction = 0.9;  // head post-fusion layers only
  double lambda_mse = 0.0;       // optional reconstruction term in phase 2
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0) || momentum < 0 || weight_decay < 0 || lambda_mse < 0) {
      throw ContractViolation("JointConfig: lr must be > 0; momentum, weight_decay, lambda_mse >= 0");
    }
    if (batch < 1 || budget < 0) throw ContractViolation("JointConfig: batch >= 1 and budget >= 0 required");
    if (!(phase1_fraction >= 0 && phase1_fraction <= 1)) {
      throw ContractViolation("JointConfig: phase1_fraction must lie in [0,1]");
    }
  }

  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
      if (k == "lr") lr = parse_double(k, v);
      else if (k == "momentum") momentum = parse_double(k, v);
      else if (k == "weight_decay") weight_decay = parse_double(k, v);
      else if (k == "batch") batch = static_cast<int>(parse_long(k, v));
      else if (k == "budget") budget = parse_long(k, v);
      else if (k == "phase1_fraction") phase1_fraction = parse_double(k, v);
      else if (k == "lambda_mse") lambda_mse = parse_double(k, v);
      else if (k == "seed") seed = static_cast<std::uint64_t>(parse_long(k, v));
      else throw ContractViolation("unknown joint config key '" + k + "'");
    }
    validate();
  }

  KeyValues to_key_values() const {
    return {{"lr", format_real(lr)},
            {"momentum", format_real(momentum)},
            {"weight_decay", format_real(weight_decay)},
            {"batch", std::to_string(batch)},
            {"budget", std::to_string(budget)},
            {"phase1_fraction", format_real(phase1_fraction)},
            {"lambda_mse", format_real(lambda_mse)},
            {"seed", std::to_string(seed)}};
  }

  long phase1_iters() const { return static_cast<long>(std::llround(phase1_fraction * static_cast<double>(budget))); }
};

template <typename T>
using LabeledDataset = std::vector<LabeledVideo<T>>;

template <typename T>
std::vector<const LabeledVideo<T>*> labeled_in(const LabeledDataset<T>& data, Split split) {
  std::vector<const LabeledVideo<T>*> out;
  for (const auto& v : data)
    if (v.video.split == split) out.push_back(&v);
  return out;
}

namespace detail {

// Stacks single-sample tensors along n.
template <typename T>
Tensor4<T> stack(const std::vector<const Tensor4<T>*>& parts) {
  const Shape s = parts.at(0)->shape();
  Tensor4<T> out(parts.size(), s.c, s.h, s.w);
  const std::size_t per = s.c * s.h * s.w;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require_same_shape(*parts[i], *parts[0], "stack");
    std::copy(parts[i]->data(), parts[i]->data() + per, out.data() + i * per);
  }
  return out;
}

}  // namespace detail

template <typename T>
struct JointBatch {
  std::vector<Tensor4<T>> frames;  // overall window, each (batch, 3, h, w)
  std::vector<Tensor4<T>> clean;   // clean frames at the dehazed positions
  std::vector<GridLabel> labels;
  std::vector<std::pair<std::size_t, std::size_t>> picks;  // (video, center)
};

template <typename T>
JointBatch<T> sample_joint_batch(const std::vector<const LabeledVideo<T>*>& videos, const TreeSpec& spec,
                                 int batch, std::mt19937_64& rng) {
  JointBatch<T> b;
  const int overall = spec.overall();
  std::vector<std::vector<const Tensor4<T>*>> fr(static_cast<std::size_t>(overall));
  std::vector<std::vector<const Tensor4<T>*>> cl(static_cast<std::size_t>(spec.high_window));
  for (int i = 0; i < batch; ++i) {
    const std::size_t vi = std::uniform_int_distribution<std::size_t>(0, videos.size() - 1)(rng);
    const auto& v = *videos[vi];
    const std::size_t center = std::uniform_int_distribution<std::size_t>(0, v.video.size() - 1)(rng);
    const auto idx = window_indices(v.video.size(), center, overall);
    for (int f = 0; f < overall; ++f) fr[static_cast<std::size_t>(f)].push_back(&v.video.hazy[idx[static_cast<std::size_t>(f)]]);
    const auto dh = spec.dehazed_indices();
    for (std::size_t j = 0; j < dh.size(); ++j) cl[j].push_back(&v.video.clean[idx[dh[j]]]);
    b.labels.push_back(v.labels[center]);
    b.picks.emplace_back(vi, center);
  }
  for (auto& f : fr) b.frames.push_back(detail::stack(f));
  for (auto& c : cl) b.clean.push_back(detail::stack(c));
  return b;
}

struct JointLog {
  std::vector<double> loss;  // per iteration, both phases
  long phase1_iters = 0;
  bool phase1_frozen = true;  // dehazer and head branches unchanged by phase 1
};

template <typename T>
struct TwoStepResult {
  TreeModel<T> phase1;  // snapshot at the end of phase 1
  TreeModel<T> final;
  JointLog log;
};

namespace detail {

template <typename T>
std::vector<ParamRef<T>> head_refs(HeadParams<T>& p, const HeadParams<T>& g, bool post_only) {
  std::vector<std::span<const T>> gs;
  g.visit([&](const std::string&, std::span<const T> s) { gs.push_back(s); }, post_only);
  std::vector<ParamRef<T>> refs;
  std::size_t i = 0;
  p.visit([&](const std::string& name, std::span<T> s) { refs.push_back({name, s, gs[i++]}); }, post_only);
  return refs;
}

template <typename T>
void check_loss(double loss, long it) {
  if (!std::isfinite(loss)) {
    throw NumericError("joint training: non-finite loss at iteration " + std::to_string(it));
  }
}

}  // namespace detail

/// Trains every head layer on frozen-dehazer outputs; used to prepare the
/// single-frame head that split_init expands.
template <typename T>
ToyDetectorHead<T> train_head(const TreeModel<T>& tree, const LabeledDataset<T>& data, const JointConfig& cfg,
                              long iters) {
  cfg.validate();
  tree.validate();
  const auto videos = labeled_in(data, Split::Train);
  if (videos.empty()) throw ContractViolation("train_head: no training videos");
  TreeModel<T> m = tree;
  MomentumState<T> mom;
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 3);
  for (long it = 1; it <= iters; ++it) {
    const auto b = sample_joint_batch(videos, m.spec, cfg.batch, rng);
    TreeCache<T> cache;
    const auto logits = tree_forward(m, b.frames, &cache);
    const auto dl = detection_loss(logits, b.labels);
    detail::check_loss<T>(dl.loss, it);
    const auto hg = m.head.backward(cache.head, dl.grad);
    sgd_step(detail::head_refs(m.head.mutable_params(), hg.params, false), mom, static_cast<T>(cfg.lr),
             static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
  }
  return m.head;
}

/// Phase 1 trains the head's post-fusion layers with everything else frozen;
/// phase 2 trains the whole tree on detection loss (+ lambda * MSE of the
/// dehazed frames).
template <typename T>
TwoStepResult<T> two_step_train(const TreeModel<T>& init, const LabeledDataset<T>& data, const JointConfig& cfg) {
  cfg.validate();
  init.validate();
  const auto videos = labeled_in(data, Split::Train);
  if (videos.empty() && cfg.budget > 0) throw ContractViolation("two_step_train: no training videos");
  TwoStepResult<T> r{init, init, {}};
  TreeModel<T>& m = r.final;
  const long p1 = cfg.phase1_iters();
  r.log.phase1_iters = p1;
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 2);

  MomentumState<T> mom1;
  for (long it = 1; it <= std::min(p1, cfg.budget); ++it) {
    const auto b = sample_joint_batch(videos, m.spec, cfg.batch, rng);
    TreeCache<T> cache;
    const auto logits = tree_forward(m, b.frames, &cache);
    const auto dl = detection_loss(logits, b.labels);
    detail::check_loss<T>(dl.loss, it);
    r.log.loss.push_back(dl.loss);
    const auto hg = m.head.backward(cache.head, dl.grad, false);
    sgd_step(detail::head_refs(m.head.mutable_params(), hg.params, true), mom1, static_cast<T>(cfg.lr),
             static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
  }
  r.log.phase1_frozen = m.dehaze.params() == init.dehaze.params() &&
                        m.head.params().branch1 == init.head.params().branch1 &&
                        m.head.params().branch2 == init.head.params().branch2;
  r.phase1 = m;

  MomentumState<T> mom_d, mom_h;
  for (long it = p1 + 1; it <= cfg.budget; ++it) {
    const auto b = sample_joint_batch(videos, m.spec, cfg.batch, rng);
    TreeCache<T> cache;
    const auto logits = tree_forward(m, b.frames, &cache);
    const auto dl = detection_loss(logits, b.labels);
    double loss = dl.loss;
    std::vector<Tensor4<T>> extra;
    if (cfg.lambda_mse > 0) {
      for (std::size_t j = 0; j < cache.dehazed.size(); ++j) {
        auto ml = mse_loss(cache.dehazed[j], b.clean[j]);
        loss += cfg.lambda_mse * static_cast<double>(ml.loss);
        for (auto& v : ml.grad.span()) v *= static_cast<T>(cfg.lambda_mse);
        extra.push_back(std::move(ml.grad));
      }
    }
    detail::check_loss<T>(loss, it);
    r.log.loss.push_back(loss);
    auto g = tree_backward(m, cache, dl.grad, extra);
    auto drefs = param_refs(m.dehaze.mutable_params(), g.dehaze);
    sgd_step(drefs, mom_d, static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum),
             static_cast<T>(cfg.weight_decay));
    sgd_step(detail::head_refs(m.head.mutable_params(), g.head, false), mom_h, static_cast<T>(cfg.lr),
             static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
  }
  return r;
}

/// Everything needed to go from labeled hazy videos to a two-step trained
/// tree: single-frame dehazer pretraining, split into the tree's dehazing
/// spec (optionally fine-tuned), single-frame head pretraining on the
/// dehazed frames, split into WH branches, then two_step_train.
struct JointPipelineConfig {
  TreeSpec tree;
  TrainConfig dehaze;              // single-frame pretraining; max_iters is its budget
  long dehaze_finetune_iters = 0;  // multi-frame fine-tuning after the split
  long head_pretrain_iters = 500;
  JointConfig joint;
};

template <typename T>
struct JointPipelineResult {
  TreeModel<T> initial;  // input to two_step_train
  TwoStepResult<T> trained;
};

template <typename T>
Dataset<T> plain_videos(const LabeledDataset<T>& data) {
  Dataset<T> out;
  for (const auto& lv : data) out.push_back(lv.video);
  return out;
}

template <typename T>
JointPipelineResult<T> joint_pipeline(const JointPipelineConfig& cfg, const LabeledDataset<T>& data) {
  cfg.tree.validate();
  const auto videos = plain_videos(data);
  TrainConfig pre = cfg.dehaze;
  pre.spec = FusionSpec::single();
  pre.seed = cfg.joint.seed;
  pre.eval_every = 0;
  auto single = train<T>(pre, videos).final_net;
  auto dehaze = cfg.tree.dehaze.is_single() ? single : MultiFrameNet<T>::split_init(single, cfg.tree.dehaze);
  if (cfg.dehaze_finetune_iters > 0) {
    TrainConfig ft = pre;
    ft.spec = cfg.tree.dehaze;
    ft.max_iters = cfg.dehaze_finetune_iters;
    dehaze = train<T>(ft, videos, dehaze).final_net;
  }
  TreeModel<T> one{cfg.tree, dehaze, ToyDetectorHead<T>::build(1, cfg.tree.grid, cfg.joint.seed)};
  one.spec.high_window = 1;
  const auto head1 = train_head(one, data, cfg.joint, cfg.head_pretrain_iters);
  TreeModel<T> tree{cfg.tree, dehaze, ToyDetectorHead<T>::split_init(head1, cfg.tree.high_window)};
  JointPipelineResult<T> r{tree, two_step_train(tree, data, cfg.joint)};
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct CellPrediction {
  std::size_t video = 0, frame = 0, cell_y = 0, cell_x = 0;
  double objectness = 0;               // probability
  std::vector<double> class_prob;      // softmax over classes
  bool present = false;
  int cls = -1;
};

template <typename T>
std::vector<CellPrediction> predict_cells(const TreeModel<T>& m, const LabeledDataset<T>& data, Split split,
                                          int stride = 1) {
  std::vector<CellPrediction> out;
  const int overall = m.spec.overall();
  for (std::size_t vi = 0; vi < data.size(); ++vi) {
    const auto& lv = data[vi];
    if (lv.video.split != split) continue;
    for (std::size_t f = 0; f < lv.video.size(); f += static_cast<std::size_t>(stride)) {
      std::vector<Tensor4<T>> frames;
      for (std::size_t i : window_indices(lv.video.size(), f, overall)) frames.push_back(lv.video.hazy[i]);
      const auto logits = tree_forward(m, frames);
      const auto& lab = lv.labels[f];
      for (std::size_t y = 0; y < logits.h(); ++y) {
        for (std::size_t x = 0; x < logits.w(); ++x) {
          CellPrediction p;
          p.video = vi;
          p.frame = f;
          p.cell_y = y;
          p.cell_x = x;
          p.objectness = sigmoid(static_cast<double>(logits(0, 0, y, x)));
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t c = 1; c < logits.c(); ++c) mx = std::max(mx, static_cast<double>(logits(0, c, y, x)));
          double sum = 0;
          for (std::size_t c = 1; c < logits.c(); ++c) {
            p.class_prob.push_back(std::exp(static_cast<double>(logits(0, c, y, x)) - mx));
            sum += p.class_prob.back();
          }
          for (auto& v : p.class_prob) v /= sum;
          p.present = lab.present[y * lab.grid + x] != 0;
          p.cls = lab.cls[y * lab.grid + x];
          out.push_back(std::move(p));
        }
      }
    }
  }
  return out;
}

/// Area under the precision-recall curve from a descending score sweep;
/// tied scores enter together. NaN when there are no positives.
inline double average_precision(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::size_t total_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  if (total_pos == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0, prev_recall = 0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (positive[order[j]]) ++tp;
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

struct MapResult {
  std::vector<double> ap;  // per class; NaN when the class never occurs
  double map = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> warnings;
};

/// Per-class cell AP with score objectness * P(class), and their mean over
/// classes that occur.
inline MapResult toy_map(const std::vector<CellPrediction>& cells, std::size_t num_classes = kToyClasses) {
  MapResult r;
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<double> scores;
    std::vector<bool> pos;
    for (const auto& p : cells) {
      scores.push_back(p.objectness * p.class_prob.at(c));
      pos.push_back(p.present && p.cls == static_cast<int>(c));
    }
    const double ap = average_precision(scores, pos);
    r.ap.push_back(ap);
    if (std::isnan(ap)) {
      r.warnings.push_back("class " + std::to_string(c) + " has no labeled cells; AP undefined and excluded");
    } else {
      sum += ap;
      ++used;
    }
  }
  if (used > 0) r.map = sum / static_cast<double>(used);
  return r;
}

template <typename T>
MapResult toy_map(const TreeModel<T>& m, const LabeledDataset<T>& data, Split split = Split::Test, int stride = 1) {
  return toy_map(predict_cells(m, data, split, stride));
}

/// CSV `video,frame,cell_y,cell_x,objectness,class0,...`.
inline void write_grid_csv(const std::filesystem::path& path, const std::vector<CellPrediction>& cells,
                           const std::vector<std::string>& video_ids) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "video,frame,cell_y,cell_x,objectness";
  const std::size_t nc = cells.empty() ? kToyClasses : cells[0].class_prob.size();
  for (std::size_t c = 0; c < nc; ++c) out << ",class" << c;
  out << ",label_present,label_class\n";
  for (const auto& p : cells) {
    out << video_ids.at(p.video) << ',' << p.frame << ',' << p.cell_y << ',' << p.cell_x << ','
        << format_real(p.objectness);
    for (double v : p.class_prob) out << ',' << format_real(v);
    out << ',' << (p.present ? 1 : 0) << ',' << p.cls << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

/// Frame with cells whose objectness exceeds `threshold` outlined in the
/// color of the predicted class (red: class 0, blue: class 1). `cells` are
/// the predictions of this one frame.
template <typename T>
void write_overlay(const std::filesystem::path& path, const Tensor4<T>& frame,
                   const std::vector<CellPrediction>& cells, std::size_t grid, double threshold = 0.5) {
  if (grid == 0 || frame.h() % grid || frame.w() % grid) {
    throw ContractViolation("write_overlay: frame not divisible into a " + std::to_string(grid) + " grid");
  }
  Tensor4<T> img = clamp01(frame);
  static const double colors[2][3] = {{1, 0.1, 0.1}, {0.1, 0.3, 1}};
  for (const auto& p : cells) {
    if (p.objectness < threshold) continue;
    const std::size_t ch = img.h() / grid, cw = img.w() / grid;
    const std::size_t k = static_cast<std::size_t>(
        std::max_element(p.class_prob.begin(), p.class_prob.end()) - p.class_prob.begin()) % 2;
    for (std::size_t y = p.cell_y * ch; y < (p.cell_y + 1) * ch; ++y) {
      for (std::size_t x = p.cell_x * cw; x < (p.cell_x + 1) * cw; ++x) {
        const bool edge = y == p.cell_y * ch || y + 1 == (p.cell_y + 1) * ch || x == p.cell_x * cw ||
                          x + 1 == (p.cell_x + 1) * cw;
        if (!edge) continue;
        for (std::size_t c = 0; c < 3; ++c) img(0, c, y, x) = static_cast<T>(colors[k][c]);
      }
    }
  }
  io::write_rgb(path, img);
}

}  // namespace evd

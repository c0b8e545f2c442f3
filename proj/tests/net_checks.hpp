// Finite-difference and equivalence checks on whole networks, shared by the
// unit tests and the acceptance runner.
#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "evd/joint.hpp"
#include "evd/models.hpp"
#include "test_util.hpp"

namespace evd::test {

inline std::vector<Tensor4<double>> random_frames(int w, std::size_t size, std::mt19937_64& rng) {
  std::vector<Tensor4<double>> f;
  for (int i = 0; i < w; ++i) f.push_back(random_tensor(1, 3, size, size, rng, 0.0, 1.0));
  return f;
}

// Zero-initialized biases put some pre-activations exactly on the ReLU kink
// (e.g. behind an all-zero input patch); finite differences are meaningless
// there, so checks run at a nearby generic point.
template <typename Params>
void jitter_biases(Params& p, std::mt19937_64& rng, double amp = 0.05) {
  std::uniform_real_distribution<double> u(-amp, amp);
  p.visit([&](const std::string& name, std::span<double> s) {
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) {
      for (auto& v : s) v += u(rng);
    }
  });
}

// Perturbs up to `per_array` evenly spaced entries of every span in `spans`.
inline double fd_spans(const std::vector<std::span<double>>& spans,
                       const std::vector<std::span<const double>>& analytic,
                       const std::function<double()>& loss, std::size_t per_array, double h = 1e-6) {
  double worst = 0.0;
  for (std::size_t a = 0; a < spans.size(); ++a) {
    auto v = spans[a];
    const std::size_t stride = std::max<std::size_t>(1, v.size() / per_array);
    for (std::size_t i = 0; i < v.size(); i += stride) {
      const double keep = v[i];
      v[i] = keep + h;
      const double up = loss();
      v[i] = keep - h;
      const double down = loss();
      v[i] = keep;
      worst = std::max(worst, rel_err(analytic[a][i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

/// Worst relative error of MultiFrameNet::backward against central
/// differences of sum(go * forward), over parameters and input frames.
inline double network_fd_error(const FusionSpec& spec, std::uint64_t seed, std::size_t size = 7,
                               std::size_t per_array = 12) {
  std::mt19937_64 rng(seed);
  auto net = MultiFrameNet<double>::build(spec, seed);
  // move merge layers away from plain averaging
  if (auto& fuse = net.mutable_params().fuse) {
    for (auto& w : fuse->weight.span()) w += 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
  }
  jitter_biases(net.mutable_params(), rng);
  auto frames = random_frames(spec.window, size, rng);
  const auto go = random_tensor(1, 3, size, size, rng);
  ForwardCache<double> cache;
  net.forward(frames, &cache);
  const auto g = net.backward(cache, go);

  auto& params = net.mutable_params();
  auto loss = [&] {
    const auto out = net.forward(frames);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * go[i];
    return s;
  };
  std::vector<std::span<double>> spans;
  std::vector<std::span<const double>> analytic;
  params.visit([&](const std::string&, std::span<double> s) { spans.push_back(s); });
  g.params.visit([&](const std::string&, std::span<const double> s) { analytic.push_back(s); });
  for (std::size_t i = 0; i < frames.size(); ++i) {
    spans.push_back(frames[i].span());
    analytic.push_back(g.frames[i].span());
  }
  return fd_spans(spans, analytic, loss, per_array);
}

/// Largest |multi(frames) - single(frame)| over identical input frames.
inline double split_init_gap(const FusionSpec& spec, std::uint64_t seed, std::size_t size = 9) {
  std::mt19937_64 rng(seed);
  const auto single = MultiFrameNet<double>::build(FusionSpec::single(), seed);
  const auto multi = MultiFrameNet<double>::split_init(single, spec);
  const auto frame = random_tensor(2, 3, size, size, rng, 0.0, 1.0);
  const auto a = single.forward({frame});
  const auto b = multi.forward(std::vector<Tensor4<double>>(static_cast<std::size_t>(spec.window), frame));
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Finite differences through the whole tree: dehazers, head and the loss.
inline double tree_fd_error(const TreeSpec& spec, std::uint64_t seed, std::size_t size = 8,
                            std::size_t per_array = 6) {
  std::mt19937_64 rng(seed);
  TreeModel<double> m{spec, MultiFrameNet<double>::build(spec.dehaze, seed),
                      ToyDetectorHead<double>::build(spec.high_window, spec.grid, seed)};
  jitter_biases(m.dehaze.mutable_params(), rng);
  jitter_biases(m.head.mutable_params(), rng);
  auto frames = random_frames(spec.overall(), size, rng);
  std::vector<GridLabel> labels(1);
  labels[0].grid = spec.grid;
  labels[0].present.assign(spec.grid * spec.grid, 0);
  labels[0].cls.assign(spec.grid * spec.grid, -1);
  for (std::size_t i = 0; i < spec.grid * spec.grid; ++i) {
    labels[0].present[i] = static_cast<std::uint8_t>(rng() % 2);
    if (labels[0].present[i]) labels[0].cls[i] = static_cast<int>(rng() % kToyClasses);
  }
  TreeCache<double> cache;
  const auto logits = tree_forward(m, frames, &cache);
  const auto lr = detection_loss(logits, labels);
  const auto g = tree_backward(m, cache, lr.grad);

  auto loss = [&] { return detection_loss(tree_forward(m, frames), labels).loss; };
  std::vector<std::span<double>> spans;
  std::vector<std::span<const double>> analytic;
  m.dehaze.mutable_params().visit([&](const std::string&, std::span<double> s) { spans.push_back(s); });
  g.dehaze.visit([&](const std::string&, std::span<const double> s) { analytic.push_back(s); });
  m.head.mutable_params().visit([&](const std::string&, std::span<double> s) { spans.push_back(s); });
  g.head.visit([&](const std::string&, std::span<const double> s) { analytic.push_back(s); });
  for (std::size_t i = 0; i < frames.size(); ++i) {
    spans.push_back(frames[i].span());
    analytic.push_back(g.frames[i].span());
  }
  return fd_spans(spans, analytic, loss, per_array);
}

}  // namespace evd::test

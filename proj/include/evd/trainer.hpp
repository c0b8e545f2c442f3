// SGD training, evaluation and the fusion-strategy benchmark.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "evd/config.hpp"
#include "evd/dataset.hpp"
#include "evd/metrics.hpp"
#include "evd/models.hpp"

namespace evd {

struct TrainConfig {
  double lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch = 8;
  long max_iters = 1000;
  std::uint64_t seed = 0;
  long eval_every = 0;     // 0: no periodic evaluation
  int eval_stride = 1;     // evaluate every k-th center frame
  int crop = 64;           // square training crops; larger than the frame means full frame
  FusionSpec spec = FusionSpec::k_level(2, 5);
  bool f32 = false;
  double output_bias = 1.0;  // b in J = K*I - K + b
  double target_psnr = 0.0;  // stop once an evaluation reaches this; 0 disables
  std::filesystem::path checkpoint_dir;  // where last-good is written on abort

  void validate() const {
    if (!(lr > 0) || momentum < 0 || weight_decay < 0) {
      throw ContractViolation("TrainConfig: lr must be > 0, momentum and weight_decay >= 0");
    }
    if (batch < 1) throw ContractViolation("TrainConfig: batch must be >= 1");
    if (target_psnr < 0) throw ContractViolation("TrainConfig: target_psnr must be >= 0");
    if (max_iters < 0 || eval_every < 0 || eval_stride < 1 || crop < 1) {
      throw ContractViolation("TrainConfig: iteration counts and sizes must be non-negative");
    }
    spec.validate();
  }

  /// Applies recognised keys; unknown keys are a contract violation.
  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
      if (k == "lr") lr = parse_double(k, v);
      else if (k == "momentum") momentum = parse_double(k, v);
      else if (k == "weight_decay") weight_decay = parse_double(k, v);
      else if (k == "batch") batch = static_cast<int>(parse_long(k, v));
      else if (k == "max_iters") max_iters = parse_long(k, v);
      else if (k == "seed") seed = static_cast<std::uint64_t>(parse_long(k, v));
      else if (k == "eval_every") eval_every = parse_long(k, v);
      else if (k == "eval_stride") eval_stride = static_cast<int>(parse_long(k, v));
      else if (k == "crop") crop = static_cast<int>(parse_long(k, v));
      else if (k == "spec") spec = FusionSpec::parse(v, spec.window);
      else if (k == "window") spec.window = static_cast<int>(parse_long(k, v));
      else if (k == "precision") f32 = parse_precision(v);
      else if (k == "output_bias") output_bias = parse_double(k, v);
      else if (k == "target_psnr") target_psnr = parse_double(k, v);
      else throw ContractViolation("unknown training config key '" + k + "'");
    }
    if (spec.strategy == Fusion::ILevel && spec.window == 1) spec = FusionSpec::single();
    validate();
  }

  KeyValues to_key_values() const {
    return {{"lr", format_real(lr)},
            {"momentum", format_real(momentum)},
            {"weight_decay", format_real(weight_decay)},
            {"batch", std::to_string(batch)},
            {"max_iters", std::to_string(max_iters)},
            {"seed", std::to_string(seed)},
            {"eval_every", std::to_string(eval_every)},
            {"eval_stride", std::to_string(eval_stride)},
            {"crop", std::to_string(crop)},
            {"spec", spec.strategy_name()},
            {"window", std::to_string(spec.window)},
            {"precision", f32 ? "f32" : "f64"},
            {"output_bias", format_real(output_bias)},
            {"target_psnr", format_real(target_psnr)}};
  }
};

struct EvalPoint {
  long iteration = 0;
  double psnr = 0;
  double ssim = 0;
};

struct TrainLog {
  std::vector<double> loss;  // loss[i] is the batch loss of iteration i+1
  std::vector<EvalPoint> evals;
  double seconds = 0;
  long best_iteration = 0;
  double best_ssim = -1;

  /// CSV `iteration,loss,psnr,ssim`; psnr/ssim empty where not evaluated.
  void write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "iteration,loss,psnr,ssim\n";
    std::size_t e = 0;
    for (std::size_t i = 0; i < loss.size(); ++i) {
      const long it = static_cast<long>(i) + 1;
      out << it << ',' << format_real(loss[i]) << ',';
      if (e < evals.size() && evals[e].iteration == it) {
        out << format_real(evals[e].psnr) << ',' << format_real(evals[e].ssim);
        ++e;
      } else {
        out << ',';
      }
      out << '\n';
    }
  }
};

template <typename T>
struct TrainResult {
  MultiFrameNet<T> final_net;
  MultiFrameNet<T> best_net;
  MomentumState<T> momentum;
  TrainLog log;
};

template <typename T>
using Dataset = std::vector<Video<T>>;

template <typename T>
std::vector<const Video<T>*> videos_in(const Dataset<T>& data, Split split) {
  std::vector<const Video<T>*> out;
  for (const auto& v : data) {
    if (v.split == split) out.push_back(&v);
  }
  return out;
}

/// A batch of crops: W hazy frame stacks plus the clean target stack.
template <typename T>
struct Batch {
  std::vector<Tensor4<T>> frames;
  Tensor4<T> target;
};

/// Draws `batch` random (video, center, crop) samples from `rng`.
template <typename T>
Batch<T> sample_batch(const std::vector<const Video<T>*>& videos, int window, int batch, int crop,
                      std::mt19937_64& rng) {
  const std::size_t H0 = videos.front()->clean.front().h(), W0 = videos.front()->clean.front().w();
  const std::size_t ch = std::min<std::size_t>(static_cast<std::size_t>(crop), H0);
  const std::size_t cw = std::min<std::size_t>(static_cast<std::size_t>(crop), W0);
  Batch<T> b;
  for (int w = 0; w < window; ++w) b.frames.emplace_back(static_cast<std::size_t>(batch), 3, ch, cw);
  b.target = Tensor4<T>(static_cast<std::size_t>(batch), 3, ch, cw);
  for (int s = 0; s < batch; ++s) {
    const auto& v = *videos[rng() % videos.size()];
    const std::size_t center = rng() % v.size();
    const std::size_t h = v.clean[center].h(), w = v.clean[center].w();
    if (h < ch || w < cw) throw ContractViolation("sample_batch: videos must share one frame size");
    const std::size_t oy = rng() % (h - ch + 1), ox = rng() % (w - cw + 1);
    const auto idx = window_indices(v.size(), center, window);
    auto copy_crop = [&](const Tensor4<T>& src, Tensor4<T>& dst) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < ch; ++y) {
          std::copy_n(src.plane(0, c) + (oy + y) * w + ox, cw,
                      dst.plane(static_cast<std::size_t>(s), c) + y * cw);
        }
      }
    };
    for (int k = 0; k < window; ++k) copy_crop(v.hazy[idx[static_cast<std::size_t>(k)]], b.frames[static_cast<std::size_t>(k)]);
    copy_crop(v.clean[center], b.target);
  }
  return b;
}

/// Restores one frame of a video with any window-based dehazer.
template <typename T>
using Dehazer = std::function<Tensor4<T>(const Video<T>&, std::size_t center)>;

template <typename T>
Dehazer<T> net_dehazer(const MultiFrameNet<T>& net) {
  return [&net](const Video<T>& v, std::size_t center) {
    return net.forward(sample_window(v, center, net.window()).frames);
  };
}

struct VideoScore {
  std::string id;
  double psnr = 0;
  double ssim = 0;
  std::size_t frames = 0;
};

struct MetricsTable {
  std::vector<VideoScore> videos;
  double mean_psnr = 0;
  double mean_ssim = 0;

  void write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "video,frames,psnr,ssim\n";
    for (const auto& v : videos) {
      out << v.id << ',' << v.frames << ',' << format_real(v.psnr) << ',' << format_real(v.ssim) << '\n';
    }
    out << "mean,," << format_real(mean_psnr) << ',' << format_real(mean_ssim) << '\n';
  }
};

/// Per-video and overall mean PSNR/SSIM of clamped predictions against the
/// clean frames; per-video values average over the scored frames.
template <typename T>
MetricsTable evaluate_with(const Dehazer<T>& dehaze, const Dataset<T>& data, Split split,
                           int stride = 1) {
  const auto videos = videos_in(data, split);
  if (videos.empty()) throw ContractViolation("evaluate: split '" + to_string(split) + "' is empty");
  MetricsTable table;
  for (const auto* v : videos) {
    VideoScore score{v->id, 0, 0, 0};
    for (std::size_t f = 0; f < v->size(); f += static_cast<std::size_t>(stride)) {
      const auto pred = clamp01(dehaze(*v, f));
      score.psnr += psnr(pred, v->clean[f]);
      score.ssim += ssim(pred, v->clean[f]);
      ++score.frames;
    }
    score.psnr /= static_cast<double>(score.frames);
    score.ssim /= static_cast<double>(score.frames);
    table.mean_psnr += score.psnr;
    table.mean_ssim += score.ssim;
    table.videos.push_back(score);
  }
  table.mean_psnr /= static_cast<double>(table.videos.size());
  table.mean_ssim /= static_cast<double>(table.videos.size());
  return table;
}

template <typename T>
MetricsTable evaluate(const MultiFrameNet<T>& net, const Dataset<T>& data, Split split, int stride = 1) {
  return evaluate_with(net_dehazer(net), data, split, stride);
}

template <typename T>
std::map<std::string, std::string> train_meta(const TrainConfig& cfg, long iteration) {
  return {{"seed", std::to_string(cfg.seed)},
          {"iteration", std::to_string(iteration)},
          {"precision", sizeof(T) == 4 ? "f32" : "f64"}};
}

/// Minimizes MSE between network output and clean center frames over
/// randomly sampled training windows. Evaluation (if enabled) runs on the
/// test split; the best-SSIM network is kept.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const Dataset<T>& data,
                     std::optional<MultiFrameNet<T>> init = std::nullopt,
                     const MomentumState<T>* init_momentum = nullptr) {
  cfg.validate();
  const auto train_videos = videos_in(data, Split::Train);
  if (train_videos.empty()) throw ContractViolation("train: no training videos");
  if (init && !(init->spec() == cfg.spec)) {
    throw ContractViolation("train: initial network is " + init->spec().to_string() +
                            " but config asks for " + cfg.spec.to_string());
  }
  const auto start = std::chrono::steady_clock::now();
  TrainResult<T> r{init ? *init : MultiFrameNet<T>::build(cfg.spec, cfg.seed, static_cast<T>(cfg.output_bias)),
                   MultiFrameNet<T>{}, init_momentum ? *init_momentum : MomentumState<T>{}, {}};
  r.best_net = r.final_net;
  const bool have_eval = cfg.eval_every > 0 && !videos_in(data, Split::Test).empty();
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);

  for (long it = 1; it <= cfg.max_iters; ++it) {
    const Batch<T> b = sample_batch(train_videos, cfg.spec.window, cfg.batch, cfg.crop, rng);
    ForwardCache<T> cache;
    const auto pred = r.final_net.forward(b.frames, &cache);
    const auto loss = mse_loss(pred, b.target);
    if (!std::isfinite(static_cast<double>(loss.loss))) {
      if (!cfg.checkpoint_dir.empty()) {
        save_checkpoint(make_checkpoint(r.final_net, &r.momentum, train_meta<T>(cfg, it - 1)),
                        cfg.checkpoint_dir / "last_good.evdn");
      }
      throw NumericError("train: non-finite loss at iteration " + std::to_string(it) +
                         (cfg.checkpoint_dir.empty() ? std::string()
                                                     : "; last good checkpoint saved to " +
                                                           (cfg.checkpoint_dir / "last_good.evdn").string()));
    }
    r.log.loss.push_back(static_cast<double>(loss.loss));
    const auto grads = r.final_net.backward(cache, loss.grad);
    sgd_step(param_refs(r.final_net.mutable_params(), grads.params), r.momentum, static_cast<T>(cfg.lr),
             static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));

    if (have_eval && (it % cfg.eval_every == 0 || it == cfg.max_iters)) {
      const auto m = evaluate(r.final_net, data, Split::Test, cfg.eval_stride);
      r.log.evals.push_back({it, m.mean_psnr, m.mean_ssim});
      if (m.mean_ssim > r.log.best_ssim) {
        r.log.best_ssim = m.mean_ssim;
        r.log.best_iteration = it;
        r.best_net = r.final_net;
      }
      if (cfg.target_psnr > 0 && m.mean_psnr >= cfg.target_psnr) break;
    }
  }
  if (!have_eval) {
    r.best_net = r.final_net;
    r.log.best_iteration = cfg.max_iters;
  }
  r.log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// ---------------------------------------------------------------------------
// Fusion benchmark

struct BenchRow {
  FusionSpec spec;
  std::string label;
  std::vector<double> psnr, ssim;  // one per seed
  std::string error;

  static double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
  }
  static double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  double mean_psnr() const { return mean(psnr); }
  double mean_ssim() const { return mean(ssim); }
};

struct BenchConfig {
  TrainConfig pretrain;  // single-frame model every variant is split from
  TrainConfig finetune;  // identical budget per variant
  int n_seeds = 3;
  int eval_stride = 1;
};

template <typename T>
std::vector<BenchRow> fusion_bench(const std::vector<FusionSpec>& specs, const Dataset<T>& data,
                                   const BenchConfig& cfg,
                                   const std::function<void(const std::string&)>& progress = {}) {
  if (cfg.n_seeds < 1) throw ContractViolation("fusion_bench: n_seeds must be >= 1");
  std::vector<BenchRow> rows;
  for (const auto& s : specs) rows.push_back({s, s.table_label(), {}, {}, {}});
  for (int seed = 0; seed < cfg.n_seeds; ++seed) {
    TrainConfig pre = cfg.pretrain;
    pre.spec = FusionSpec::single();
    pre.seed = static_cast<std::uint64_t>(seed);
    pre.eval_every = 0;
    const auto single = train<T>(pre, data).final_net;
    if (progress) progress("seed " + std::to_string(seed) + ": single-frame pretraining done");
    for (auto& row : rows) {
      if (!row.error.empty()) continue;
      try {
        TrainConfig ft = cfg.finetune;
        ft.spec = row.spec;
        ft.seed = static_cast<std::uint64_t>(seed);
        ft.eval_every = 0;
        auto init = row.spec.is_single() ? single : MultiFrameNet<T>::split_init(single, row.spec);
        const auto trained = train<T>(ft, data, init).final_net;
        const auto m = evaluate(trained, data, Split::Test, cfg.eval_stride);
        row.psnr.push_back(m.mean_psnr);
        row.ssim.push_back(m.mean_ssim);
        if (progress) {
          std::ostringstream os;
          os << "seed " << seed << ": " << row.label << " psnr " << m.mean_psnr << " ssim " << m.mean_ssim;
          progress(os.str());
        }
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  }
  return rows;
}

inline void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "method,spec,window,params,psnr_mean,psnr_sd,ssim_mean,ssim_sd,seeds,error\n";
  for (const auto& r : rows) {
    out << '"' << r.label << "\"," << r.spec.strategy_name() << ',' << r.spec.window << ','
        << param_count(r.spec) << ',' << format_real(r.mean_psnr()) << ','
        << format_real(BenchRow::stddev(r.psnr)) << ',' << format_real(r.mean_ssim()) << ','
        << format_real(BenchRow::stddev(r.ssim)) << ',' << r.psnr.size() << ",\"" << r.error << "\"\n";
  }
}

}  // namespace evd

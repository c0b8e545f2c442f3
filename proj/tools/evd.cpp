// evd: command-line front end for synthesis, training, inference,
// evaluation, the fusion benchmark and the joint dehaze+detect pipeline.
//
// Exit codes: 0 success, 1 contract/config/numeric error, 2 I/O error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "evd/checkpoint.hpp"
#include "evd/config.hpp"
#include "evd/dataset.hpp"
#include "evd/errors.hpp"
#include "evd/image_io.hpp"
#include "evd/joint.hpp"
#include "evd/metrics.hpp"
#include "evd/models.hpp"
#include "evd/trainer.hpp"

namespace fs = std::filesystem;
using namespace evd;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  std::string out;
};

// Flags that override config keys; only flags actually given are applied.
struct Overrides {
  std::vector<std::pair<std::string, std::string>> flags;  // key -> bound value
  std::map<std::string, CLI::Option*> options;
  std::map<std::string, std::string> values;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    values[key];
    options[key] = app->add_option(flag, values[key], help);
  }

  KeyValues given() const {
    KeyValues kv;
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) kv.emplace_back(key, values.at(key));
    }
    return kv;
  }
};

KeyValues file_config(const Globals& g) {
  return g.config.empty() ? KeyValues{} : read_key_values(g.config);
}

// Splits "prefix.key" entries off a key/value list.
KeyValues take_prefix(KeyValues& kv, const std::string& prefix) {
  KeyValues taken, rest;
  for (auto& p : kv) {
    if (p.first.rfind(prefix, 0) == 0) {
      taken.emplace_back(p.first.substr(prefix.size()), p.second);
    } else {
      rest.push_back(p);
    }
  }
  kv = std::move(rest);
  return taken;
}

fs::path require_out(const Globals& g, const std::string& cmd) {
  if (g.out.empty()) throw ContractViolation(cmd + ": --out DIR is required");
  fs::create_directories(g.out);
  return g.out;
}

void write_run_manifest(const fs::path& dir, const std::string& command, const Globals& g,
                        const KeyValues& resolved) {
  KeyValues kv{{"command", command}, {"seed", std::to_string(g.seed)}, {"precision", g.precision}};
  if (!g.config.empty()) kv.emplace_back("config", g.config);
  for (const auto& p : resolved) kv.push_back(p);
  write_key_values(dir / "run_manifest.txt", kv);
}

KeyValues prefixed(const std::string& prefix, const KeyValues& kv) {
  KeyValues out;
  for (const auto& [k, v] : kv) out.emplace_back(prefix + k, v);
  return out;
}

template <typename T>
Dataset<T> load_dataset(const fs::path& root) {
  Dataset<T> data;
  for (const auto& rec : ingest_dataset(root)) {
    auto v = load_video<T>(rec);
    synthesize_video(v, rec.haze, true);
    data.push_back(std::move(v));
  }
  if (data.empty()) throw ContractViolation("dataset '" + root.string() + "' lists no videos");
  return data;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Globals& g, const std::string& in) {
  const fs::path out = require_out(g, "synth");
  std::vector<ManifestEntry> entries;
  std::size_t frames = 0;
  for (const auto& rec : ingest_dataset(in)) {
    auto v = load_video<double>(rec);
    synthesize_video(v, rec.haze, true);
    write_hazy_frames(out, v);
    entries.push_back({rec.id, rec.haze, rec.split});
    frames += v.size();
  }
  write_manifest(out / "manifest.txt", entries);
  write_run_manifest(out, "synth", g, {{"in", in}});
  std::cout << "synthesized " << frames << " hazy frames from " << entries.size() << " videos into " << out
            << '\n';
  return 0;
}

int cmd_toygen(const Globals& g, const KeyValues& cli) {
  const fs::path out = require_out(g, "toygen");
  ToyDatasetSpec spec;
  spec.seed = g.seed;
  spec.apply(file_config(g));
  spec.apply(cli);
  std::vector<ManifestEntry> entries;
  for (const auto& v : make_toy_dataset<double>(spec)) {
    write_rgbd_video(out / v.id, v);
    write_hazy_frames(out, v);
    entries.push_back({v.id, v.haze, v.split});
  }
  write_manifest(out / "manifest.txt", entries);
  write_run_manifest(out, "toygen", g, spec.to_key_values());
  std::cout << "wrote " << entries.size() << " procedural videos (" << spec.frames << " frames, " << spec.width
            << "x" << spec.height << ") to " << out << '\n';
  return 0;
}

TrainConfig resolve_train_config(const Globals& g, const KeyValues& cli) {
  TrainConfig cfg;
  cfg.seed = g.seed;
  cfg.f32 = parse_precision(g.precision);
  cfg.apply(file_config(g));
  cfg.apply(cli);
  cfg.seed = g.seed;
  cfg.f32 = parse_precision(g.precision);
  return cfg;
}

template <typename T>
int run_train(const Globals& g, const TrainConfig& cfg, const std::string& data_root, const std::string& init) {
  const fs::path out = require_out(g, "train");
  const auto data = load_dataset<T>(data_root);
  std::optional<MultiFrameNet<T>> net;
  MomentumState<T> momentum;
  if (!init.empty()) {
    const auto ckpt = load_checkpoint(init);
    auto loaded = MultiFrameNet<T>::from_checkpoint(ckpt);
    if (loaded.spec() == cfg.spec) {
      momentum = momentum_from_checkpoint(loaded, ckpt);
      net = std::move(loaded);
    } else if (loaded.spec().is_single()) {
      net = MultiFrameNet<T>::split_init(loaded, cfg.spec);
    } else {
      throw ContractViolation("train: --init holds " + loaded.spec().to_string() + ", which cannot seed " +
                              cfg.spec.to_string() + " (only a single-frame model can be split)");
    }
  }
  TrainConfig c = cfg;
  c.checkpoint_dir = out;
  const auto r = train<T>(c, data, net, momentum.empty() ? nullptr : &momentum);
  const long iters = static_cast<long>(r.log.loss.size());
  auto meta = train_meta<T>(cfg, iters);
  save_checkpoint(make_checkpoint(r.final_net, &r.momentum, meta), out / "final.evdn");
  meta["iteration"] = std::to_string(r.log.best_iteration);
  save_checkpoint(make_checkpoint<T>(r.best_net, nullptr, meta), out / "best.evdn");
  r.log.write_csv(out / "train_log.csv");
  KeyValues resolved = cfg.to_key_values();
  resolved.emplace_back("data", data_root);
  if (!init.empty()) resolved.emplace_back("init", init);
  write_run_manifest(out, "train", g, resolved);
  std::cout << "trained " << cfg.spec.to_string() << " (" << r.final_net.param_count() << " parameters) for "
            << iters << " iterations";
  if (!r.log.loss.empty()) std::cout << ", final batch loss " << r.log.loss.back();
  if (!r.log.evals.empty()) {
    std::cout << ", best test SSIM " << r.log.best_ssim << " at iteration " << r.log.best_iteration;
  }
  std::cout << '\n';
  return 0;
}

template <typename T>
int run_dehaze(const Globals& g, const std::string& ckpt_path, const std::string& in) {
  const fs::path out = require_out(g, "dehaze");
  const auto net = MultiFrameNet<T>::from_checkpoint(load_checkpoint(ckpt_path));
  fs::path dir = in;
  if (fs::is_directory(dir / "hazy")) dir /= "hazy";
  const auto files = list_images(dir);
  if (files.empty()) throw IoError("no frames found under '" + dir.string() + "'");
  std::vector<Tensor4<T>> frames;
  for (const auto& f : files) frames.push_back(io::read_rgb<T>(f));
  for (std::size_t c = 0; c < frames.size(); ++c) {
    std::vector<Tensor4<T>> win;
    for (std::size_t i : window_indices(frames.size(), c, net.window())) win.push_back(frames[i]);
    io::write_rgb(out / (files[c].stem().string() + ".png"), clamp01(net.forward(win)));
  }
  write_run_manifest(out, "dehaze", g, {{"checkpoint", ckpt_path}, {"in", in}});
  std::cout << "dehazed " << frames.size() << " frames with " << net.spec().to_string() << " into " << out
            << '\n';
  return 0;
}

template <typename T>
int run_eval(const Globals& g, const std::string& ckpt_path, const std::string& data_root,
             const std::string& split, int stride) {
  const fs::path out = require_out(g, "eval");
  const auto net = MultiFrameNet<T>::from_checkpoint(load_checkpoint(ckpt_path));
  const auto data = load_dataset<T>(data_root);
  const auto table = evaluate(net, data, parse_split(split), stride);
  table.write_csv(out / "metrics.csv");
  write_run_manifest(out, "eval", g,
                     {{"checkpoint", ckpt_path}, {"data", data_root}, {"split", split},
                      {"stride", std::to_string(stride)}});
  for (const auto& v : table.videos) {
    std::cout << std::left << std::setw(16) << v.id << " PSNR " << std::fixed << std::setprecision(4) << v.psnr
              << " dB  SSIM " << v.ssim << '\n';
  }
  std::cout << std::left << std::setw(16) << "mean" << " PSNR " << table.mean_psnr << " dB  SSIM "
            << table.mean_ssim << '\n';
  return 0;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) out.push_back(static_cast<int>(parse_long("frames", trim(tok))));
  if (out.empty()) throw ContractViolation("expected a comma-separated list of integers, got '" + s + "'");
  return out;
}

// "all": every fusion variant at each window, plus the single-frame row.
std::vector<FusionSpec> parse_specs(const std::string& s, const std::vector<int>& windows) {
  std::vector<FusionSpec> out;
  if (s == "all") {
    for (int w : windows) {
      out.push_back(FusionSpec::i_level(w));
      for (int l = 1; l <= kNumLayers; ++l) out.push_back(FusionSpec::k_level(l, w));
      out.push_back(FusionSpec::j_level(w));
    }
    out.push_back(FusionSpec::single());
    return out;
  }
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    tok = trim(tok);
    const auto spec = FusionSpec::parse(tok, 1);
    if (spec.is_single()) {
      out.push_back(FusionSpec::single());
      continue;
    }
    for (int w : windows) out.push_back(FusionSpec::parse(tok, w));
  }
  return out;
}

template <typename T>
int run_bench(const Globals& g, KeyValues kv, const std::string& data_root, const std::string& specs_arg,
              const std::string& frames_arg) {
  const fs::path out = require_out(g, "fusion-bench");
  BenchConfig bc;
  long pretrain_iters = 1000;
  KeyValues train_kv;
  for (const auto& [k, v] : kv) {
    if (k == "pretrain_iters") pretrain_iters = parse_long(k, v);
    else if (k == "seeds") bc.n_seeds = static_cast<int>(parse_long(k, v));
    else if (k == "eval_stride") bc.eval_stride = static_cast<int>(parse_long(k, v));
    else train_kv.emplace_back(k, v);
  }
  bc.finetune.apply(train_kv);
  bc.finetune.f32 = parse_precision(g.precision);
  bc.pretrain = bc.finetune;
  bc.pretrain.max_iters = pretrain_iters;
  const auto specs = parse_specs(specs_arg, parse_int_list(frames_arg));
  const auto data = load_dataset<T>(data_root);
  const auto rows = fusion_bench<T>(specs, data, bc, [](const std::string& s) { std::cerr << s << '\n'; });
  write_bench_csv(out / "bench.csv", rows);
  KeyValues resolved = bc.finetune.to_key_values();
  resolved.emplace_back("pretrain_iters", std::to_string(pretrain_iters));
  resolved.emplace_back("seeds", std::to_string(bc.n_seeds));
  resolved.emplace_back("eval_stride", std::to_string(bc.eval_stride));
  resolved.emplace_back("specs", specs_arg);
  resolved.emplace_back("frames", frames_arg);
  resolved.emplace_back("data", data_root);
  write_run_manifest(out, "fusion-bench", g, resolved);
  std::cout << std::left << std::setw(40) << "method" << std::setw(10) << "params" << std::setw(22) << "PSNR (dB)"
            << "SSIM\n";
  for (const auto& r : rows) {
    std::ostringstream p, s;
    p << std::fixed << std::setprecision(3) << r.mean_psnr() << " +- " << BenchRow::stddev(r.psnr);
    s << std::fixed << std::setprecision(4) << r.mean_ssim() << " +- " << BenchRow::stddev(r.ssim);
    std::cout << std::left << std::setw(40) << r.label << std::setw(10) << param_count(r.spec) << std::setw(22)
              << p.str() << s.str();
    if (!r.error.empty()) std::cout << "  [error: " << r.error << "]";
    std::cout << '\n';
  }
  return 0;
}

// Joint keys: toy.* (data), dehaze.* (single-frame pretraining),
// tree.{spec,window,high_window,grid}, pipeline.{dehaze_finetune_iters,
// head_pretrain_iters}, joint.* (two-step training).
struct JointSetup {
  ToyDatasetSpec toy;
  JointPipelineConfig pipe;
};

JointSetup resolve_joint(const Globals& g, KeyValues kv) {
  JointSetup s;
  s.toy.n_train = 6;
  s.toy.n_test = 2;
  s.toy.frames = 30;
  s.toy.shapes = 4;
  s.toy.seed = g.seed;
  s.pipe.tree.grid = 6;
  s.pipe.dehaze.lr = 0.05;
  s.pipe.dehaze.batch = 4;
  s.pipe.dehaze.crop = 32;
  s.pipe.joint.seed = g.seed;
  s.toy.apply(take_prefix(kv, "toy."));
  s.pipe.dehaze.apply(take_prefix(kv, "dehaze."));
  s.pipe.joint.apply(take_prefix(kv, "joint."));
  for (const auto& [k, v] : take_prefix(kv, "tree.")) {
    if (k == "spec") s.pipe.tree.dehaze = FusionSpec::parse(v, s.pipe.tree.dehaze.window);
    else if (k == "window") s.pipe.tree.dehaze.window = static_cast<int>(parse_long(k, v));
    else if (k == "high_window") s.pipe.tree.high_window = static_cast<int>(parse_long(k, v));
    else if (k == "grid") s.pipe.tree.grid = parse_count(k, v);
    else throw ContractViolation("unknown joint config key 'tree." + k + "'");
  }
  for (const auto& [k, v] : take_prefix(kv, "pipeline.")) {
    if (k == "dehaze_finetune_iters") s.pipe.dehaze_finetune_iters = parse_long(k, v);
    else if (k == "head_pretrain_iters") s.pipe.head_pretrain_iters = parse_long(k, v);
    else throw ContractViolation("unknown joint config key 'pipeline." + k + "'");
  }
  if (!kv.empty()) throw ContractViolation("unknown joint config key '" + kv.front().first + "'");
  s.pipe.tree.validate();
  return s;
}

KeyValues joint_key_values(const JointSetup& s) {
  KeyValues kv = prefixed("toy.", s.toy.to_key_values());
  for (const auto& p : prefixed("dehaze.", s.pipe.dehaze.to_key_values())) kv.push_back(p);
  for (const auto& p : prefixed("joint.", s.pipe.joint.to_key_values())) kv.push_back(p);
  kv.emplace_back("tree.spec", s.pipe.tree.dehaze.strategy_name());
  kv.emplace_back("tree.window", std::to_string(s.pipe.tree.dehaze.window));
  kv.emplace_back("tree.high_window", std::to_string(s.pipe.tree.high_window));
  kv.emplace_back("tree.grid", std::to_string(s.pipe.tree.grid));
  kv.emplace_back("pipeline.dehaze_finetune_iters", std::to_string(s.pipe.dehaze_finetune_iters));
  kv.emplace_back("pipeline.head_pretrain_iters", std::to_string(s.pipe.head_pretrain_iters));
  return kv;
}

void print_map(const std::string& label, const MapResult& m) {
  std::cout << std::left << std::setw(14) << label << std::fixed << std::setprecision(4);
  for (std::size_t c = 0; c < m.ap.size(); ++c) std::cout << " AP" << c << " " << m.ap[c];
  std::cout << "  MAP " << m.map << '\n';
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << '\n';
}

void write_map_csv(const fs::path& path, const std::vector<std::pair<std::string, MapResult>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "model,ap_class0,ap_class1,map\n";
  for (const auto& [name, m] : rows) {
    out << name;
    for (double a : m.ap) out << ',' << format_real(a);
    out << ',' << format_real(m.map) << '\n';
  }
}

template <typename T>
Checkpoint tree_checkpoint(const TreeModel<T>& m, const JointSetup& s, const std::string& stage) {
  auto ckpt = tree_to_checkpoint(m);
  for (const auto& [k, v] : joint_key_values(s)) ckpt.meta["cfg." + k] = v;
  ckpt.meta["stage"] = stage;
  ckpt.meta["precision"] = sizeof(T) == 4 ? "f32" : "f64";
  return ckpt;
}

template <typename T>
int run_joint_train(const Globals& g, const KeyValues& kv) {
  const fs::path out = require_out(g, "joint-train");
  const auto s = resolve_joint(g, kv);
  const auto data = make_labeled_toy_dataset<T>(s.toy, s.pipe.tree.grid);
  const auto r = joint_pipeline<T>(s.pipe, data);
  save_checkpoint(tree_checkpoint(r.trained.phase1, s, "phase1"), out / "tree_phase1.evdn");
  save_checkpoint(tree_checkpoint(r.trained.final, s, "final"), out / "tree_final.evdn");
  {
    std::ofstream log(out / "joint_log.csv", std::ios::trunc);
    if (!log) throw IoError("cannot write joint_log.csv");
    log << "iteration,phase,loss\n";
    for (std::size_t i = 0; i < r.trained.log.loss.size(); ++i) {
      const long it = static_cast<long>(i) + 1;
      log << it << ',' << (it <= r.trained.log.phase1_iters ? 1 : 2) << ',' << format_real(r.trained.log.loss[i])
          << '\n';
    }
  }
  const auto m1 = toy_map(r.trained.phase1, data);
  const auto m2 = toy_map(r.trained.final, data);
  write_map_csv(out / "map.csv", {{"phase1", m1}, {"final", m2}});
  write_run_manifest(out, "joint-train", g, joint_key_values(s));
  std::cout << "tree " << s.pipe.tree.to_string() << ", phase-1 freeze "
            << (r.trained.log.phase1_frozen ? "verified" : "VIOLATED") << '\n';
  print_map("phase 1 only", m1);
  print_map("two-step", m2);
  return r.trained.log.phase1_frozen ? 0 : 1;
}

template <typename T>
int run_joint_eval(const Globals& g, const std::string& ckpt_path, const std::string& split, int overlays) {
  const fs::path out = require_out(g, "joint-eval");
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto model = tree_from_checkpoint<T>(ckpt);
  // the test set is regenerated from the dataset keys stored at training time
  KeyValues toy_kv;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.rfind("cfg.toy.", 0) == 0) toy_kv.emplace_back(k.substr(8), v);
  }
  ToyDatasetSpec toy;
  toy.apply(toy_kv);
  const auto data = make_labeled_toy_dataset<T>(toy, model.spec.grid);
  const auto cells = predict_cells(model, data, parse_split(split));
  const auto m = toy_map(cells);
  std::vector<std::string> ids;
  for (const auto& lv : data) ids.push_back(lv.video.id);
  write_grid_csv(out / "grid.csv", cells, ids);
  write_map_csv(out / "map.csv", {{ckpt.meta.count("stage") ? ckpt.meta.at("stage") : "model", m}});
  // overlays for the first frames of the first video in the split
  const std::size_t per_frame = model.spec.grid * model.spec.grid;
  for (int f = 0; f < overlays && static_cast<std::size_t>(f + 1) * per_frame <= cells.size(); ++f) {
    const auto first = cells.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(f) * per_frame);
    std::vector<CellPrediction> frame_cells(first, first + static_cast<std::ptrdiff_t>(per_frame));
    const auto& v = data[frame_cells[0].video].video;
    if (frame_cells[0].video != cells[0].video) break;
    write_overlay(out / "overlay" / frame_name(frame_cells[0].frame), v.hazy[frame_cells[0].frame], frame_cells,
                  model.spec.grid);
  }
  write_run_manifest(out, "joint-eval", g, {{"checkpoint", ckpt_path}, {"split", split}});
  print_map(split, m);
  return 0;
}

int cmd_info(const std::string& ckpt_path) {
  const auto ckpt = load_checkpoint(ckpt_path);
  auto meta = [&](const std::string& k) { return ckpt.meta.count(k) ? ckpt.meta.at(k) : std::string("-"); };
  if (meta("kind") == "tree") {
    const auto m = tree_from_checkpoint<double>(ckpt);
    std::cout << "kind       joint tree\n"
              << "tree       " << m.spec.to_string() << '\n'
              << "overall W  " << m.spec.overall() << '\n'
              << "params     dehaze " << m.dehaze.param_count() << ", head " << m.head.param_count() << '\n'
              << "stage      " << meta("stage") << '\n';
    return 0;
  }
  const auto net = MultiFrameNet<double>::from_checkpoint(ckpt);
  std::cout << "spec       " << net.spec().strategy_name() << '\n'
            << "W          " << net.window() << '\n'
            << "params     " << net.param_count() << '\n'
            << "iteration  " << meta("iteration") << '\n'
            << "seed       " << meta("seed") << '\n'
            << "precision  " << meta("precision") << '\n'
            << "label      " << net.spec().table_label() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-frame video dehazing: synthesis, training, evaluation and joint detection"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key=value config file (command-line flags take precedence)");
  app.add_option("--seed", g.seed, "seed for every random choice")->capture_default_str();
  app.add_option("--precision", g.precision, "f64 (reference) or f32 (training speed only)")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  app.add_option("--out", g.out, "output directory");

  auto* synth = app.add_subcommand("synth", "render hazy frames for an RGB-D dataset directory");
  std::string synth_in;
  synth->add_option("--in", synth_in, "dataset root holding manifest.txt and <id>/rgb, <id>/depth")->required();

  auto* toygen = app.add_subcommand("toygen", "write a procedural RGB-D + hazy dataset");
  Overrides toy_ov;
  toy_ov.add(toygen, "--train-videos", "n_train", "training videos");
  toy_ov.add(toygen, "--test-videos", "n_test", "test videos");
  toy_ov.add(toygen, "--frames", "frames", "frames per video");
  toy_ov.add(toygen, "--width", "width", "frame width");
  toy_ov.add(toygen, "--height", "height", "frame height");
  toy_ov.add(toygen, "--shapes", "shapes", "moving shapes per scene");
  toy_ov.add(toygen, "--a-min", "a_min", "lowest atmospheric light");
  toy_ov.add(toygen, "--a-max", "a_max", "highest atmospheric light");
  toy_ov.add(toygen, "--beta-min", "beta_min", "lowest scattering coefficient");
  toy_ov.add(toygen, "--beta-max", "beta_max", "highest scattering coefficient");

  auto* trainc = app.add_subcommand("train", "train a single- or multi-frame dehazing network");
  std::string train_data, train_init;
  trainc->add_option("--data", train_data, "dataset root (manifest.txt + RGB-D videos)")->required();
  trainc->add_option("--init", train_init, "checkpoint to resume, or single-frame model to split");
  Overrides train_ov;
  train_ov.add(trainc, "--spec", "spec", "SINGLE, I_LEVEL, K_LEVEL(l) or J_LEVEL");
  train_ov.add(trainc, "--window", "window", "temporal window W");
  train_ov.add(trainc, "--iters", "max_iters", "SGD iterations");
  train_ov.add(trainc, "--lr", "lr", "learning rate");
  train_ov.add(trainc, "--momentum", "momentum", "momentum");
  train_ov.add(trainc, "--weight-decay", "weight_decay", "weight decay");
  train_ov.add(trainc, "--batch", "batch", "batch size");
  train_ov.add(trainc, "--crop", "crop", "square crop size");
  train_ov.add(trainc, "--eval-every", "eval_every", "evaluate on the test split every N iterations");
  train_ov.add(trainc, "--eval-stride", "eval_stride", "score every k-th test frame");
  train_ov.add(trainc, "--output-bias", "output_bias", "b in J = K*I - K + b");
  train_ov.add(trainc, "--target-psnr", "target_psnr", "stop once an evaluation reaches this PSNR");

  auto* dehaze = app.add_subcommand("dehaze", "dehaze a directory of frames");
  std::string dh_ckpt, dh_in;
  dehaze->add_option("--checkpoint", dh_ckpt, "trained network")->required();
  dehaze->add_option("--in", dh_in, "frame directory (or video directory with hazy/)")->required();

  auto* evalc = app.add_subcommand("eval", "PSNR/SSIM of a network on a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "test";
  int ev_stride = 1;
  evalc->add_option("--checkpoint", ev_ckpt, "trained network")->required();
  evalc->add_option("--data", ev_data, "dataset root")->required();
  evalc->add_option("--split", ev_split, "train or test")->capture_default_str();
  evalc->add_option("--stride", ev_stride, "score every k-th frame")->capture_default_str();

  auto* bench = app.add_subcommand("fusion-bench", "train and compare fusion strategies");
  std::string bench_data, bench_specs = "all", bench_frames = "5";
  bench->add_option("--data", bench_data, "dataset root")->required();
  bench->add_option("--specs", bench_specs, "all, or a list such as K2,I,J,SINGLE")->capture_default_str();
  bench->add_option("--frames", bench_frames, "comma-separated window sizes")->capture_default_str();
  Overrides bench_ov;
  bench_ov.add(bench, "--pretrain-iters", "pretrain_iters", "single-frame pretraining iterations");
  bench_ov.add(bench, "--iters", "max_iters", "fine-tuning iterations per variant");
  bench_ov.add(bench, "--seeds", "seeds", "number of seeds");
  bench_ov.add(bench, "--lr", "lr", "learning rate");
  bench_ov.add(bench, "--batch", "batch", "batch size");
  bench_ov.add(bench, "--crop", "crop", "square crop size");
  bench_ov.add(bench, "--eval-stride", "eval_stride", "score every k-th test frame");

  auto* jtrain = app.add_subcommand("joint-train", "two-step training of the dehaze + detect tree on toy data");
  Overrides joint_ov;
  joint_ov.add(jtrain, "--budget", "joint.budget", "two-step iterations (90% head, 10% everything)");
  joint_ov.add(jtrain, "--lr", "joint.lr", "two-step learning rate");
  joint_ov.add(jtrain, "--lambda-mse", "joint.lambda_mse", "weight of the dehazing MSE in phase 2");
  joint_ov.add(jtrain, "--dehaze-iters", "dehaze.max_iters", "single-frame dehazer pretraining iterations");
  joint_ov.add(jtrain, "--head-iters", "pipeline.head_pretrain_iters", "single-frame head pretraining iterations");
  joint_ov.add(jtrain, "--high-window", "tree.high_window", "WH");
  joint_ov.add(jtrain, "--low-window", "tree.window", "WL");

  auto* jeval = app.add_subcommand("joint-eval", "toy MAP, grid CSV and overlays of a tree checkpoint");
  std::string je_ckpt, je_split = "test";
  int je_overlays = 4;
  jeval->add_option("--checkpoint", je_ckpt, "tree checkpoint from joint-train")->required();
  jeval->add_option("--split", je_split, "train or test")->capture_default_str();
  jeval->add_option("--overlays", je_overlays, "overlay PNGs to write")->capture_default_str();

  auto* info = app.add_subcommand("info", "describe a checkpoint");
  std::string info_ckpt;
  info->add_option("--checkpoint", info_ckpt, "checkpoint file")->required();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  const bool f32 = g.precision == "f32";
  try {
    if (*synth) return cmd_synth(g, synth_in);
    if (*toygen) return cmd_toygen(g, toy_ov.given());
    if (*trainc) {
      const auto cfg = resolve_train_config(g, train_ov.given());
      return f32 ? run_train<float>(g, cfg, train_data, train_init)
                 : run_train<double>(g, cfg, train_data, train_init);
    }
    if (*dehaze) return f32 ? run_dehaze<float>(g, dh_ckpt, dh_in) : run_dehaze<double>(g, dh_ckpt, dh_in);
    if (*evalc) {
      return f32 ? run_eval<float>(g, ev_ckpt, ev_data, ev_split, ev_stride)
                 : run_eval<double>(g, ev_ckpt, ev_data, ev_split, ev_stride);
    }
    if (*bench) {
      KeyValues kv = file_config(g);
      kv.emplace_back("seed", std::to_string(g.seed));
      for (const auto& p : bench_ov.given()) kv.push_back(p);
      return f32 ? run_bench<float>(g, kv, bench_data, bench_specs, bench_frames)
                 : run_bench<double>(g, kv, bench_data, bench_specs, bench_frames);
    }
    if (*jtrain) {
      KeyValues kv = file_config(g);
      for (const auto& p : joint_ov.given()) kv.push_back(p);
      return f32 ? run_joint_train<float>(g, kv) : run_joint_train<double>(g, kv);
    }
    if (*jeval) {
      return f32 ? run_joint_eval<float>(g, je_ckpt, je_split, je_overlays)
                 : run_joint_eval<double>(g, je_ckpt, je_split, je_overlays);
    }
    if (*info) return cmd_info(info_ckpt);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

// Hazy video datasets: RGB-D ingestion, haze synthesis, temporal windows and
// procedural toy scenes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "evd/config.hpp"
#include "evd/haze.hpp"
#include "evd/image_io.hpp"
#include "evd/tensor.hpp"

namespace evd {

namespace fs = std::filesystem;

enum class Split { Train, Test };

inline std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw ContractViolation("unknown split '" + s + "' (expected train or test)");
}

// ---------------------------------------------------------------------------
// Manifest

/// One video of a dataset directory: ordered RGB and depth frame paths plus
/// the haze parameters that apply to the whole clip.
struct VideoRecord {
  std::string id;
  std::vector<fs::path> rgb;
  std::vector<fs::path> depth;
  HazeParams haze;
  Split split = Split::Train;

  std::size_t size() const { return rgb.size(); }
};

struct ManifestEntry {
  std::string id;
  HazeParams haze;
  Split split = Split::Train;
};

/// One line per video: `id=NAME A=a beta=b split=train|test`; A may be
/// `r,g,b`. Blank lines and `#` comments are ignored.
inline std::vector<ManifestEntry> parse_manifest(std::istream& in, const std::string& origin) {
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::map<std::string, std::string> kv;
    for (std::string tok; ls >> tok;) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) {
        throw IoError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + tok + "'");
      }
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    if (kv.empty()) continue;
    ManifestEntry e;
    try {
      e.id = kv.at("id");
      const std::string a = kv.at("A");
      if (a.find(',') != std::string::npos) {
        std::istringstream as(a);
        std::string part;
        for (std::size_t c = 0; c < 3; ++c) {
          if (!std::getline(as, part, ',')) throw ContractViolation("A needs 1 or 3 values");
          e.haze.A[c] = std::stod(part);
        }
      } else {
        e.haze.A.fill(std::stod(a));
      }
      e.haze.beta = std::stod(kv.at("beta"));
      e.split = kv.count("split") ? parse_split(kv.at("split")) : Split::Train;
    } catch (const std::out_of_range&) {
      throw IoError(origin + ":" + std::to_string(lineno) + ": entry needs id, A and beta");
    } catch (const std::invalid_argument& ex) {
      throw IoError(origin + ":" + std::to_string(lineno) + ": " + ex.what());
    }
    e.haze.validate();
    out.push_back(e);
  }
  return out;
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  return parse_manifest(in, path.string());
}

inline void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open manifest '" + path.string() + "' for writing");
  for (const auto& e : entries) {
    out << "id=" << e.id << " A=";
    if (e.haze.A[0] == e.haze.A[1] && e.haze.A[1] == e.haze.A[2]) {
      out << format_real(e.haze.A[0]);
    } else {
      out << format_real(e.haze.A[0]) << ',' << format_real(e.haze.A[1]) << ','
          << format_real(e.haze.A[2]);
    }
    out << " beta=" << format_real(e.haze.beta) << " split=" << to_string(e.split) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Ingestion

inline std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && io::is_image_file(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

/// Validates `<dir>/rgb/*` against same-named `<dir>/depth/*.png|pgm`.
inline VideoRecord ingest_rgbd(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("video directory '" + dir.string() + "' does not exist");
  VideoRecord rec;
  rec.id = dir.filename().string();
  rec.rgb = list_images(dir / "rgb");
  if (rec.rgb.empty()) throw IoError("no RGB frames under '" + (dir / "rgb").string() + "'");
  const auto depth_files = list_images(dir / "depth");
  for (std::size_t i = 0; i < rec.rgb.size(); ++i) {
    const std::string stem = rec.rgb[i].stem().string();
    const auto it = std::find_if(depth_files.begin(), depth_files.end(),
                                 [&](const fs::path& p) { return p.stem().string() == stem; });
    if (it == depth_files.end()) {
      throw IoError("depth file missing for frame " + stem + " (index " + std::to_string(i) +
                    ", expected '" + (dir / "depth" / (stem + ".png")).string() + "')");
    }
    rec.depth.push_back(*it);
  }
  if (depth_files.size() != rec.rgb.size()) {
    throw IoError("'" + dir.string() + "' has " + std::to_string(rec.rgb.size()) + " RGB frames but " +
                  std::to_string(depth_files.size()) + " depth frames");
  }
  return rec;
}

/// Replaces invalid (zero) depths by the nearest valid pixel, breadth-first
/// over the 4-neighbourhood in scan order.
template <typename T>
void fill_depth_holes(Tensor4<T>& depth, const std::vector<bool>& valid) {
  const std::size_t h = depth.h(), w = depth.w();
  std::vector<bool> done = valid;
  std::deque<std::size_t> queue;
  for (std::size_t p = 0; p < h * w; ++p) {
    if (valid[p]) queue.push_back(p);
  }
  if (queue.empty()) throw IoError("depth map has no valid pixels");
  T* d = depth.plane(0, 0);
  while (!queue.empty()) {
    const std::size_t p = queue.front();
    queue.pop_front();
    const std::size_t y = p / w, x = p % w;
    const std::size_t nbrs[4] = {y > 0 ? p - w : p, y + 1 < h ? p + w : p, x > 0 ? p - 1 : p,
                                 x + 1 < w ? p + 1 : p};
    for (std::size_t q : nbrs) {
      if (!done[q]) {
        done[q] = true;
        d[q] = d[p];
        queue.push_back(q);
      }
    }
  }
}

/// Depth in meters from a 16-bit image; `depth_scale` stored units per meter.
template <typename T = double>
Tensor4<T> load_depth(const fs::path& path, double depth_scale = 5000.0) {
  if (!(depth_scale > 0.0)) throw ContractViolation("load_depth: depth_scale must be > 0");
  const io::RawImage img = io::read_depth16(path);
  Tensor4<T> d(1, 1, img.height, img.width);
  std::vector<bool> valid(img.samples.size());
  bool any_hole = false;
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    valid[i] = img.samples[i] != 0;
    any_hole = any_hole || !valid[i];
    d[i] = static_cast<T>(img.samples[i] / depth_scale);
  }
  if (any_hole) fill_depth_holes(d, valid);
  return d;
}

// ---------------------------------------------------------------------------
// In-memory videos

/// Clean frames, depth maps and their hazy renderings, each (1, c, h, w).
template <typename T>
struct Video {
  std::string id;
  HazeParams haze;
  Split split = Split::Train;
  std::vector<Tensor4<T>> clean;
  std::vector<Tensor4<T>> depth;
  std::vector<Tensor4<T>> hazy;
  std::vector<Tensor4<T>> transmission;

  std::size_t size() const { return clean.size(); }
};

/// Hazes every frame with the clip's constant A and beta. With `quantize`
/// the hazy frames are rounded to 8 bits as if read back from disk.
template <typename T>
void synthesize_video(Video<T>& video, const HazeParams& params, bool quantize = true) {
  params.validate();
  video.haze = params;
  video.hazy.clear();
  video.transmission.clear();
  for (std::size_t f = 0; f < video.size(); ++f) {
    auto t = transmission_from_depth(video.depth[f], params.beta);
    auto hazy = synthesize_haze(video.clean[f], t, params);
    video.hazy.push_back(quantize ? io::quantize8(hazy) : std::move(hazy));
    video.transmission.push_back(std::move(t));
  }
}

template <typename T = double>
Video<T> load_video(const VideoRecord& rec, double depth_scale = 5000.0) {
  Video<T> v;
  v.id = rec.id;
  v.haze = rec.haze;
  v.split = rec.split;
  for (std::size_t f = 0; f < rec.size(); ++f) {
    v.clean.push_back(io::read_rgb<T>(rec.rgb[f]));
    v.depth.push_back(load_depth<T>(rec.depth[f], depth_scale));
    if (v.clean.back().h() != v.depth.back().h() || v.clean.back().w() != v.depth.back().w()) {
      throw IoError("frame '" + rec.rgb[f].string() + "' and depth '" + rec.depth[f].string() +
                    "' differ in size");
    }
  }
  return v;
}

/// Every video listed in `<root>/manifest.txt`.
inline std::vector<VideoRecord> ingest_dataset(const fs::path& root) {
  std::vector<VideoRecord> out;
  for (const auto& e : read_manifest(root / "manifest.txt")) {
    VideoRecord rec = ingest_rgbd(root / e.id);
    rec.id = e.id;
    rec.haze = e.haze;
    rec.split = e.split;
    out.push_back(std::move(rec));
  }
  return out;
}

/// Frame file name for index `i`: 0000.png, 0001.png, ...
inline std::string frame_name(std::size_t i, const std::string& ext = ".png") {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i << ext;
  return os.str();
}

/// Writes `<root>/<id>/hazy/NNNN.png` for every video and copies the manifest.
template <typename T>
void write_hazy_frames(const fs::path& root, const Video<T>& video) {
  for (std::size_t f = 0; f < video.hazy.size(); ++f) {
    io::write_rgb(root / video.id / "hazy" / frame_name(f), video.hazy[f]);
  }
}

// ---------------------------------------------------------------------------
// Temporal windows

enum class EdgePolicy { Replicate };

/// Frame indices of the W-frame window centred on `center`; out-of-range
/// positions repeat the first/last frame.
inline std::vector<std::size_t> window_indices(std::size_t length, std::size_t center, int window,
                                               EdgePolicy = EdgePolicy::Replicate) {
  if (window < 1 || window % 2 == 0) {
    throw ContractViolation("window size must be odd and >= 1, got " + std::to_string(window));
  }
  if (length == 0 || center >= length) {
    throw ContractViolation("window center " + std::to_string(center) + " outside sequence of " +
                            std::to_string(length) + " frames");
  }
  const std::ptrdiff_t half = window / 2;
  std::vector<std::size_t> idx;
  for (std::ptrdiff_t k = -half; k <= half; ++k) {
    const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(center) + k;
    idx.push_back(static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(length) - 1)));
  }
  return idx;
}

template <typename T>
struct FrameWindow {
  std::vector<Tensor4<T>> frames;  // hazy, temporal order
  std::size_t center = 0;          // index of the restored frame in the video
  Tensor4<T> target;               // clean center frame
};

template <typename T>
FrameWindow<T> sample_window(const Video<T>& video, std::size_t center, int window,
                             EdgePolicy policy = EdgePolicy::Replicate) {
  FrameWindow<T> fw;
  fw.center = center;
  for (std::size_t i : window_indices(video.size(), center, window, policy)) {
    fw.frames.push_back(video.hazy.at(i));
  }
  fw.target = video.clean.at(center);
  return fw;
}

// ---------------------------------------------------------------------------
// Procedural scenes

enum class ShapeKind { Rectangle = 0, Disk = 1 };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::Rectangle;
  double x = 0, y = 0;       // centre at frame 0, pixels
  double half_w = 4, half_h = 4;  // rectangle half extents; disk radius = half_w
  double vx = 0, vy = 0;     // px/frame, |v| <= 2
  double depth = 1.0;        // meters
  std::array<double, 3> color{0.5, 0.5, 0.5};
  double stripe = 0.0;       // amplitude of a diagonal stripe texture

  int class_id() const { return static_cast<int>(kind); }
};

/// Background: textured color field over a depth gradient (far at the top,
/// near at the bottom); shapes move linearly in front of it, bouncing off
/// the borders.
struct SceneSpec {
  std::size_t width = 48, height = 48;
  double depth_top = 3.0, depth_bottom = 1.0;
  std::vector<ShapeSpec> shapes;
  std::uint64_t seed = 0;  // background texture

  void validate() const {
    if (width == 0 || height == 0) throw ContractViolation("SceneSpec: empty image size");
    if (!(depth_top >= 0 && depth_bottom >= 0)) throw ContractViolation("SceneSpec: negative depth");
    for (const auto& s : shapes) {
      if (std::hypot(s.vx, s.vy) > 2.0 + 1e-12) {
        throw ContractViolation("SceneSpec: shape speed exceeds 2 px/frame");
      }
      if (!(s.depth >= 0)) throw ContractViolation("SceneSpec: negative shape depth");
    }
  }

  /// Random scene: `n_shapes` shapes of random kind, size, color and velocity.
  static SceneSpec random(std::uint64_t seed, std::size_t width, std::size_t height, int n_shapes) {
    SceneSpec s;
    s.width = width;
    s.height = height;
    s.seed = seed;
    std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    s.depth_top = 2.0 + 1.5 * u(rng);
    s.depth_bottom = 0.6 + 0.6 * u(rng);
    for (int i = 0; i < n_shapes; ++i) {
      ShapeSpec sh;
      sh.kind = u(rng) < 0.5 ? ShapeKind::Rectangle : ShapeKind::Disk;
      const double size = 0.10 * static_cast<double>(std::min(width, height)) * (1.0 + u(rng));
      sh.half_w = size;
      sh.half_h = sh.kind == ShapeKind::Disk ? size : size * (0.6 + 0.8 * u(rng));
      sh.x = sh.half_w + u(rng) * (static_cast<double>(width) - 2 * sh.half_w);
      sh.y = sh.half_h + u(rng) * (static_cast<double>(height) - 2 * sh.half_h);
      const double speed = 0.5 + 1.5 * u(rng);
      const double angle = 2.0 * M_PI * u(rng);
      sh.vx = speed * std::cos(angle);
      sh.vy = speed * std::sin(angle);
      sh.depth = 0.5 + 1.5 * u(rng);
      // saturated colors: one channel near zero keeps a dark-pixel cue
      const std::size_t dark = static_cast<std::size_t>(u(rng) * 3.0) % 3;
      for (std::size_t c = 0; c < 3; ++c) sh.color[c] = c == dark ? 0.05 * u(rng) : 0.3 + 0.65 * u(rng);
      sh.stripe = 0.15 * u(rng);
      s.shapes.push_back(sh);
    }
    return s;
  }
};

/// Position of a shape's centre at frame `f` with reflection at the borders.
inline std::pair<double, double> shape_position(const ShapeSpec& s, std::size_t width,
                                                std::size_t height, std::size_t f) {
  auto reflect = [](double p, double v, double lo, double hi, std::size_t f) {
    double pos = p + v * static_cast<double>(f);
    if (hi <= lo) return lo;
    const double span = hi - lo;
    double r = std::fmod(pos - lo, 2.0 * span);
    if (r < 0) r += 2.0 * span;
    return lo + (r <= span ? r : 2.0 * span - r);
  };
  const double hw = s.half_w, hh = s.kind == ShapeKind::Disk ? s.half_w : s.half_h;
  return {reflect(s.x, s.vx, hw, static_cast<double>(width) - hw, f),
          reflect(s.y, s.vy, hh, static_cast<double>(height) - hh, f)};
}

inline bool shape_covers(const ShapeSpec& s, double cx, double cy, double px, double py) {
  const double dx = px - cx, dy = py - cy;
  if (s.kind == ShapeKind::Disk) return dx * dx + dy * dy <= s.half_w * s.half_w;
  return std::abs(dx) <= s.half_w && std::abs(dy) <= s.half_h;
}

template <typename T>
struct ToyFrames {
  std::vector<Tensor4<T>> clean;       // (1,3,h,w) in [0,1]
  std::vector<Tensor4<T>> depth;       // (1,1,h,w) meters
  std::vector<std::vector<int>> owner;  // per pixel: shape index or -1
};

/// Deterministic RGB + depth sequence for a scene; pixel centres are at
/// integer coordinates.
template <typename T = double>
ToyFrames<T> generate_toy_scene(const SceneSpec& spec, std::size_t n_frames) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width;
  // background texture: a few random plane waves per channel
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  struct Wave { double kx, ky, phase, amp; };
  std::array<std::vector<Wave>, 3> waves;
  std::array<double, 3> base{};
  for (std::size_t c = 0; c < 3; ++c) {
    base[c] = 0.25 + 0.5 * u(rng);
    for (int k = 0; k < 3; ++k) {
      const double freq = 0.08 + 0.35 * u(rng), ang = 2.0 * M_PI * u(rng);
      waves[c].push_back({freq * std::cos(ang), freq * std::sin(ang), 2.0 * M_PI * u(rng),
                          0.12 + 0.18 * u(rng)});
    }
  }
  Tensor4<T> background(1, 3, h, w);
  Tensor4<T> bg_depth(1, 1, h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const double a = h > 1 ? static_cast<double>(y) / static_cast<double>(h - 1) : 0.0;
    for (std::size_t x = 0; x < w; ++x) {
      bg_depth(0, 0, y, x) = static_cast<T>(spec.depth_top + (spec.depth_bottom - spec.depth_top) * a);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = base[c];
        for (const auto& wv : waves[c]) {
          v += wv.amp * std::sin(wv.kx * static_cast<double>(x) + wv.ky * static_cast<double>(y) + wv.phase);
        }
        background(0, c, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  // draw far shapes first so nearer ones occlude them
  std::vector<std::size_t> order(spec.shapes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return spec.shapes[a].depth > spec.shapes[b].depth;
  });

  ToyFrames<T> out;
  for (std::size_t f = 0; f < n_frames; ++f) {
    Tensor4<T> img = background;
    Tensor4<T> dep = bg_depth;
    std::vector<int> owner(h * w, -1);
    for (std::size_t idx : order) {
      const auto& s = spec.shapes[idx];
      const auto [cx, cy] = shape_position(s, w, h, f);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          if (!shape_covers(s, cx, cy, static_cast<double>(x), static_cast<double>(y))) continue;
          // stripes move with the shape
          const double tex = s.stripe * std::sin(0.9 * ((static_cast<double>(x) - cx) + (static_cast<double>(y) - cy)));
          for (std::size_t c = 0; c < 3; ++c) {
            img(0, c, y, x) = static_cast<T>(std::clamp(s.color[c] * (1.0 + tex), 0.0, 1.0));
          }
          dep(0, 0, y, x) = static_cast<T>(s.depth);
          owner[y * w + x] = static_cast<int>(idx);
        }
      }
    }
    out.clean.push_back(std::move(img));
    out.depth.push_back(std::move(dep));
    out.owner.push_back(std::move(owner));
  }
  return out;
}

struct HazeRanges {
  double a_min = 0.6, a_max = 1.0;
  double beta_min = 0.4, beta_max = 1.6;

  void validate() const {
    if (a_min > a_max) throw ContractViolation("HazeRanges: inverted A range");
    if (beta_min > beta_max) throw ContractViolation("HazeRanges: inverted beta range");
    if (!(a_min > 0.0 && a_max <= 1.0)) throw ContractViolation("HazeRanges: A must lie in (0,1]");
    if (beta_min < 0.0) throw ContractViolation("HazeRanges: beta must be >= 0");
  }
};

/// Scalar A and beta drawn uniformly from `ranges`, deterministic per seed.
inline HazeParams assign_haze_params(std::uint64_t seed, const HazeRanges& ranges = {}) {
  ranges.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double a = ranges.a_min + (ranges.a_max - ranges.a_min) * u(rng);
  const double b = ranges.beta_min + (ranges.beta_max - ranges.beta_min) * u(rng);
  return HazeParams::scalar(std::min(a, ranges.a_max), std::min(b, ranges.beta_max));
}

/// A procedural hazy video, ready for training.
template <typename T = double>
Video<T> make_toy_video(const std::string& id, const SceneSpec& scene, std::size_t n_frames,
                        const HazeParams& haze, Split split, bool quantize = true) {
  auto frames = generate_toy_scene<T>(scene, n_frames);
  Video<T> v;
  v.id = id;
  v.split = split;
  v.clean = std::move(frames.clean);
  v.depth = std::move(frames.depth);
  synthesize_video(v, haze, quantize);
  return v;
}

/// A set of procedural videos: train ones first, then test ones.
struct ToyDatasetSpec {
  std::size_t n_train = 8, n_test = 2;
  std::size_t frames = 60;
  std::size_t width = 48, height = 48;
  int shapes = 3;
  HazeRanges haze;
  std::uint64_t seed = 0;

  void validate() const {
    if (frames == 0 || n_train + n_test == 0) throw ContractViolation("ToyDatasetSpec: empty dataset");
    if (shapes < 0) throw ContractViolation("ToyDatasetSpec: negative shape count");
    haze.validate();
  }

  std::uint64_t video_seed(std::size_t i) const { return seed * 1000003ULL + i + 1; }

  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
      if (k == "n_train") n_train = parse_count(k, v);
      else if (k == "n_test") n_test = parse_count(k, v);
      else if (k == "frames") frames = parse_count(k, v);
      else if (k == "width") width = parse_count(k, v);
      else if (k == "height") height = parse_count(k, v);
      else if (k == "shapes") shapes = static_cast<int>(parse_long(k, v));
      else if (k == "a_min") haze.a_min = parse_double(k, v);
      else if (k == "a_max") haze.a_max = parse_double(k, v);
      else if (k == "beta_min") haze.beta_min = parse_double(k, v);
      else if (k == "beta_max") haze.beta_max = parse_double(k, v);
      else if (k == "seed") seed = static_cast<std::uint64_t>(parse_long(k, v));
      else throw ContractViolation("unknown toy dataset key '" + k + "'");
    }
    validate();
  }

  KeyValues to_key_values() const {
    return {{"n_train", std::to_string(n_train)}, {"n_test", std::to_string(n_test)},
            {"frames", std::to_string(frames)},   {"width", std::to_string(width)},
            {"height", std::to_string(height)},   {"shapes", std::to_string(shapes)},
            {"a_min", format_real(haze.a_min)},   {"a_max", format_real(haze.a_max)},
            {"beta_min", format_real(haze.beta_min)}, {"beta_max", format_real(haze.beta_max)},
            {"seed", std::to_string(seed)}};
  }
};

template <typename T = double>
std::vector<Video<T>> make_toy_dataset(const ToyDatasetSpec& spec, bool quantize = true) {
  spec.validate();
  std::vector<Video<T>> out;
  for (std::size_t i = 0; i < spec.n_train + spec.n_test; ++i) {
    const auto vs = spec.video_seed(i);
    const Split split = i < spec.n_train ? Split::Train : Split::Test;
    char id[32];
    std::snprintf(id, sizeof id, "toy%03zu", i);
    out.push_back(make_toy_video<T>(id, SceneSpec::random(vs, spec.width, spec.height, spec.shapes),
                                    spec.frames, assign_haze_params(vs, spec.haze), split, quantize));
  }
  return out;
}

/// Writes rgb/NNNN.png and 16-bit depth/NNNN.png for a procedural video.
template <typename T>
void write_rgbd_video(const fs::path& dir, const Video<T>& v, double depth_scale = 5000.0) {
  for (std::size_t f = 0; f < v.size(); ++f) {
    io::write_rgb(dir / "rgb" / frame_name(f), v.clean[f]);
    const auto& d = v.depth[f];
    std::vector<std::uint16_t> samples(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      samples[i] = static_cast<std::uint16_t>(
          std::clamp(std::lround(static_cast<double>(d[i]) * depth_scale), 1L, 65535L));
    }
    io::write_depth16(dir / "depth" / frame_name(f), d.w(), d.h(), std::move(samples));
  }
}

}  // namespace evd

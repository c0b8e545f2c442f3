// PNG (libpng) and binary PPM/PGM reading and writing.
//
// Color images come back as (1, 3, h, w) tensors in [0,1]; depth images are
// raw 16-bit samples.
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "evd/errors.hpp"
#include "evd/tensor.hpp"

namespace evd::io {

namespace fs = std::filesystem;

struct RawImage {
  std::size_t width = 0, height = 0, channels = 0;
  int bit_depth = 8;                 // 8 or 16
  std::vector<std::uint16_t> samples;  // row-major, interleaved channels
};

namespace detail {

inline std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline RawImage read_png(const fs::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open image '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed for '" + path.string() + "'");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed for '" + path.string() + "'");
  }
  RawImage img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("'" + path.string() + "' is not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_png(png, info, PNG_TRANSFORM_EXPAND | PNG_TRANSFORM_STRIP_ALPHA | PNG_TRANSFORM_PACKING,
               nullptr);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  png_bytepp rows = png_get_rows(png, info);
  img.samples.resize(img.width * img.height * img.channels);
  const std::size_t rowlen = img.width * img.channels;
  for (std::size_t y = 0; y < img.height; ++y) {
    const png_bytep r = rows[y];
    for (std::size_t i = 0; i < rowlen; ++i) {
      img.samples[y * rowlen + i] =
          img.bit_depth == 16 ? static_cast<std::uint16_t>((r[2 * i] << 8) | r[2 * i + 1]) : r[i];
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png(const fs::path& path, const RawImage& img) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed for '" + path.string() + "'");
  }
  const std::size_t rowlen = img.width * img.channels * (img.bit_depth == 16 ? 2 : 1);
  std::vector<png_byte> buf(rowlen * img.height);
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (img.bit_depth == 16) {
      buf[2 * i] = static_cast<png_byte>(img.samples[i] >> 8);
      buf[2 * i + 1] = static_cast<png_byte>(img.samples[i] & 0xff);
    } else {
      buf[i] = static_cast<png_byte>(img.samples[i]);
    }
  }
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = buf.data() + y * rowlen;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               img.bit_depth, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Binary PNM: P5 (gray) or P6 (RGB), maxval up to 65535.
inline RawImage read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path.string() + "'");
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") {
    throw IoError("'" + path.string() + "' is not a binary PGM/PPM (magic '" + magic + "')");
  }
  auto next_int = [&]() {
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      long v = -1;
      in >> v;
      if (!in || v < 0) throw IoError("malformed header in '" + path.string() + "'");
      return static_cast<std::size_t>(v);
    }
  };
  RawImage img;
  img.width = next_int();
  img.height = next_int();
  const std::size_t maxval = next_int();
  if (maxval == 0 || maxval > 65535) throw IoError("bad maxval in '" + path.string() + "'");
  in.get();
  img.channels = magic == "P6" ? 3 : 1;
  img.bit_depth = maxval > 255 ? 16 : 8;
  img.samples.resize(img.width * img.height * img.channels);
  const std::size_t bytes = img.samples.size() * (img.bit_depth == 16 ? 2 : 1);
  std::vector<unsigned char> buf(bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) {
    throw IoError("'" + path.string() + "' is truncated");
  }
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    img.samples[i] = img.bit_depth == 16
                         ? static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1])
                         : buf[i];
  }
  return img;
}

inline void write_pnm(const fs::path& path, const RawImage& img) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << (img.channels == 3 ? "P6" : "P5") << '\n'
      << img.width << ' ' << img.height << '\n'
      << (img.bit_depth == 16 ? 65535 : 255) << '\n';
  for (std::uint16_t v : img.samples) {
    if (img.bit_depth == 16) {
      out.put(static_cast<char>(v >> 8));
      out.put(static_cast<char>(v & 0xff));
    } else {
      out.put(static_cast<char>(v));
    }
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace detail

inline bool is_image_file(const fs::path& p) {
  const auto e = detail::lower_ext(p);
  return e == ".png" || e == ".ppm" || e == ".pgm" || e == ".pnm";
}

inline RawImage read_raw(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("image file '" + path.string() + "' does not exist");
  return detail::lower_ext(path) == ".png" ? detail::read_png(path) : detail::read_pnm(path);
}

inline void write_raw(const fs::path& path, const RawImage& img) {
  if (detail::lower_ext(path) == ".png") {
    detail::write_png(path, img);
  } else {
    detail::write_pnm(path, img);
  }
}

/// Color image as (1, 3, h, w) in [0,1]; gray images are replicated.
template <typename T = double>
Tensor4<T> read_rgb(const fs::path& path) {
  const RawImage img = read_raw(path);
  if (img.channels != 1 && img.channels != 3) {
    throw IoError("'" + path.string() + "' has " + std::to_string(img.channels) + " channels");
  }
  const double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
  Tensor4<T> t(1, 3, img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = (y * img.width + x) * img.channels + (img.channels == 3 ? c : 0);
        t(0, c, y, x) = static_cast<T>(img.samples[src] / scale);
      }
    }
  }
  return t;
}

/// Writes sample `n` of a 3-channel tensor as 8-bit RGB, clamped and rounded.
template <typename T>
void write_rgb(const fs::path& path, const Tensor4<T>& t, std::size_t n = 0) {
  if (t.c() != 3) throw ContractViolation("write_rgb: expected 3 channels, got " + to_string(t.shape()));
  RawImage img;
  img.width = t.w();
  img.height = t.h();
  img.channels = 3;
  img.bit_depth = 8;
  img.samples.resize(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(t(n, c, y, x)), 0.0, 1.0);
        img.samples[(y * img.width + x) * 3 + c] = static_cast<std::uint16_t>(std::lround(v * 255.0));
      }
    }
  }
  write_raw(path, img);
}

/// 8-bit round trip of a [0,1] tensor, the quantization that disk storage applies.
template <typename T>
Tensor4<T> quantize8(const Tensor4<T>& t) {
  Tensor4<T> q(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = std::clamp(static_cast<double>(t[i]), 0.0, 1.0);
    q[i] = static_cast<T>(std::lround(v * 255.0) / 255.0);
  }
  return q;
}

/// Single-channel 16-bit samples.
inline RawImage read_depth16(const fs::path& path) {
  RawImage img = read_raw(path);
  if (img.channels != 1) {
    throw IoError("depth image '" + path.string() + "' must be single-channel, has " +
                  std::to_string(img.channels));
  }
  return img;
}

inline void write_depth16(const fs::path& path, std::size_t width, std::size_t height,
                          std::vector<std::uint16_t> samples) {
  RawImage img;
  img.width = width;
  img.height = height;
  img.channels = 1;
  img.bit_depth = 16;
  img.samples = std::move(samples);
  write_raw(path, img);
}

}  // namespace evd::io

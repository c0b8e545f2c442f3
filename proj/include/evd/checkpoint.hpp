// Named-tensor archive.
//
// Layout (little-endian):
//   "EVDN"                       4 bytes magic
//   u32 version
//   u32 meta_len, meta bytes     UTF-8 "key=value\n" lines
//   u32 tensor_count
//   per tensor: u32 name_len, name bytes, u32 dims[4], f64 data[prod(dims)]
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "evd/errors.hpp"
#include "evd/tensor.hpp"

namespace evd {

inline constexpr char kCheckpointMagic[4] = {'E', 'V', 'D', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor4<double> value;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;

  const Tensor4<double>* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t.value;
    }
    return nullptr;
  }

  const Tensor4<double>& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw ContractViolation("checkpoint has no tensor named '" + name + "'");
  }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw ContractViolation("checkpoint metadata lacks key '" + key + "'");
    return it->second;
  }

  void add(std::string name, Tensor4<double> value) {
    tensors.push_back({std::move(name), std::move(value)});
  }

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    if (a.meta != b.meta || a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      if (a.tensors[i].name != b.tensors[i].name || !(a.tensors[i].value == b.tensors[i].value)) {
        return false;
      }
    }
    return true;
  }
};

namespace detail {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

template <typename U>
void put(std::string& buf, U v) {
  v = to_little(v);
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  buf.append(b, sizeof(U));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return to_little(v);
  }

  std::string get_string(std::size_t len, const char* what) {
    need(len, what);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t len, const char* what) {
    if (bytes_.size() - pos_ < len) {
      throw IoError("checkpoint '" + path_ + "' is truncated while reading " + what + " (offset " +
                    std::to_string(pos_) + ", file size " + std::to_string(bytes_.size()) + ")");
    }
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string buf(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(buf, kCheckpointVersion);
  std::string meta;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractViolation("checkpoint metadata entry '" + k + "' contains '=' or newline");
    }
    meta += k + "=" + v + "\n";
  }
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(meta.size()));
  buf += meta;
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.name.size()));
    buf += t.name;
    const Shape& s = t.value.shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    for (double v : t.value.span()) detail::put<double>(buf, v);
  }
  return buf;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  const std::string magic = r.get_string(4, "magic");
  if (magic != std::string(kCheckpointMagic, 4)) {
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint '" + path + "' has format version " + std::to_string(version) +
                  "; this build reads version " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  std::istringstream meta(r.get_string(meta_len, "metadata"));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw IoError("checkpoint '" + path + "' has malformed metadata line '" + line + "'");
    }
    ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    std::string name = r.get_string(name_len, "tensor name");
    Shape s;
    s.n = r.get<std::uint32_t>("tensor dims");
    s.c = r.get<std::uint32_t>("tensor dims");
    s.h = r.get<std::uint32_t>("tensor dims");
    s.w = r.get<std::uint32_t>("tensor dims");
    if (s.count() > r.remaining() / sizeof(double)) {
      throw IoError("checkpoint '" + path + "' is truncated inside tensor '" + name + "'");
    }
    Tensor4<double> t(s);
    for (auto& v : t.span()) v = r.get<double>("tensor data");
    ckpt.tensors.push_back({std::move(name), std::move(t)});
  }
  if (!r.at_end()) {
    throw IoError("checkpoint '" + path + "' has " + std::to_string(r.remaining()) +
                  " trailing bytes");
  }
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path.string());
}

}  // namespace evd

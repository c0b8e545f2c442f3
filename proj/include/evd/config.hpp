// Plain-text key=value configuration.
#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "evd/errors.hpp"

namespace evd {

/// Ordered key=value pairs; later entries override earlier ones on apply.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string format_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// One `key = value` per line; `#` starts a comment.
inline KeyValues parse_key_values(std::istream& in, const std::string& origin) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractViolation(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

inline KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  return parse_key_values(in, path.string());
}

inline void write_key_values(const std::filesystem::path& path, const KeyValues& kv) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ContractViolation("config key '" + key + "': '" + v + "' is not a number");
  }
}

inline long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ContractViolation("config key '" + key + "': '" + v + "' is not an integer");
  }
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const long n = parse_long(key, v);
  if (n < 0) throw ContractViolation("config key '" + key + "' must be >= 0, got " + v);
  return static_cast<std::size_t>(n);
}

/// true for f32, false for f64.
inline bool parse_precision(const std::string& v) {
  if (v == "f32") return true;
  if (v == "f64") return false;
  throw ContractViolation("precision must be f32 or f64, got '" + v + "'");
}

}  // namespace evd

#pragma once

#include <algorithm>
#include <cctype>
#include <string>

#include "evd/errors.hpp"

namespace evd {

enum class Fusion { ILevel, KLevel, JLevel };

/// Where consecutive frames are merged, and how many of them.
struct FusionSpec {
  Fusion strategy = Fusion::ILevel;
  int layer = 0;   // K-level only: frames merge after conv `layer` (1..5)
  int window = 1;  // odd

  static FusionSpec single() { return {Fusion::ILevel, 0, 1}; }
  static FusionSpec i_level(int w) { return {Fusion::ILevel, 0, w}; }
  static FusionSpec k_level(int l, int w) { return {Fusion::KLevel, l, w}; }
  static FusionSpec j_level(int w) { return {Fusion::JLevel, 0, w}; }

  void validate() const {
    if (window < 1 || window % 2 == 0) {
      throw ContractViolation("FusionSpec: window must be odd and >= 1, got " +
                              std::to_string(window));
    }
    if (strategy == Fusion::KLevel && (layer < 1 || layer > 5)) {
      throw ContractViolation("FusionSpec: K-level fusion layer must be in 1..5, got " +
                              std::to_string(layer));
    }
  }

  bool is_single() const { return strategy == Fusion::ILevel && window == 1; }

  /// Number of K-estimation layers computed separately per frame column.
  int split_depth() const {
    switch (strategy) {
      case Fusion::ILevel: return 0;
      case Fusion::KLevel: return layer;
      case Fusion::JLevel: return 5;
    }
    return 0;
  }

  int columns() const { return strategy == Fusion::ILevel ? 1 : window; }

  /// A learned 1x1 layer merges per-column outputs after conv5.
  bool has_fuse_layer() const { return split_depth() == 5; }

  /// Canonical strategy token: I_LEVEL, K_LEVEL(l), J_LEVEL.
  std::string strategy_name() const {
    switch (strategy) {
      case Fusion::ILevel: return "I_LEVEL";
      case Fusion::KLevel: return "K_LEVEL(" + std::to_string(layer) + ")";
      case Fusion::JLevel: return "J_LEVEL";
    }
    return "?";
  }

  std::string to_string() const { return strategy_name() + ",W=" + std::to_string(window); }

  /// Human-readable row label for result tables.
  std::string table_label() const {
    if (is_single()) return "Single-frame";
    const std::string frames = std::to_string(window) + " frames";
    switch (strategy) {
      case Fusion::ILevel: return "I-level fusion, " + frames;
      case Fusion::KLevel:
        return "K-level fusion, conv" + std::to_string(layer) + (layer == 5 ? "(K), " : ", ") +
               frames;
      case Fusion::JLevel: return "J-level fusion, " + frames;
    }
    return "?";
  }

  /// Accepts I, I_LEVEL, K2, K_LEVEL(2), J, J_LEVEL, SINGLE (case-insensitive).
  static FusionSpec parse(const std::string& token, int window) {
    std::string t;
    for (char ch : token) {
      if (!std::isspace(static_cast<unsigned char>(ch))) {
        t.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
      }
    }
    FusionSpec s;
    s.window = window;
    if (t == "SINGLE") {
      s = single();
    } else if (t == "I" || t == "I_LEVEL") {
      s.strategy = Fusion::ILevel;
    } else if (t == "J" || t == "J_LEVEL") {
      s.strategy = Fusion::JLevel;
    } else if (t.size() == 2 && t[0] == 'K' && std::isdigit(static_cast<unsigned char>(t[1]))) {
      s.strategy = Fusion::KLevel;
      s.layer = t[1] - '0';
    } else if (t.size() == 10 && t.rfind("K_LEVEL(", 0) == 0 && t[9] == ')' &&
               std::isdigit(static_cast<unsigned char>(t[8]))) {
      s.strategy = Fusion::KLevel;
      s.layer = t[8] - '0';
    } else {
      throw ContractViolation("FusionSpec: unrecognized strategy '" + token + "'");
    }
    s.validate();
    return s;
  }

  friend bool operator==(const FusionSpec&, const FusionSpec&) = default;
};

}  // namespace evd

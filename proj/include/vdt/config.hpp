#pragma once

// Training configuration and the line-oriented `key = value` config format
// shared by config files and checkpoint headers.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "vdt/error.hpp"
#include "vdt/model.hpp"
#include "vdt/objectives.hpp"

namespace vdt {

enum class Precision { kFloat, kDouble };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t P = 8;
  std::size_t K = 4;
  std::size_t steps_per_epoch = 0;  // 0: floor(num_train_ids / P)
  double lr_initial = 2e-3;  // 8e-3 at batch 128, scaled linearly to P*K = 32
  double lr_final = 1.6e-6;
  double momentum = 0.9;
  double lambda = 1.0;
  TripletMode triplet_mode = TripletMode::kSoft;
  double margin = 0.3;
  bool disable_orthogonal = false;
  std::uint64_t seed = 0;
  Precision precision = Precision::kFloat;
  std::size_t pad = 2;
  double erase_prob = 0.5;

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("trainer", msg); };
    if (epochs == 0) fail("epochs must be at least 1");
    if (P < 2) fail("P must be at least 2 (triplet mining needs negatives)");
    if (K < 2) fail("K must be at least 2 (triplet mining needs positives)");
    if (!(lr_final >= 0.0) || !(lr_final <= lr_initial)) fail("need 0 <= lr_final <= lr_initial");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (!(erase_prob >= 0.0 && erase_prob <= 1.0)) fail("erase_prob must lie in [0, 1]");
    loss().validate();
  }

  LossConfig loss() const {
    LossConfig l;
    l.lambda = lambda;
    l.triplet_mode = triplet_mode;
    l.margin = margin;
    l.orthogonal_enabled = !disable_orthogonal;
    return l;
  }
};

namespace detail {

template <typename V>
V parse_value(const std::string& v) {
  if constexpr (std::is_same_v<V, bool>) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("expected true or false");
  } else if constexpr (std::is_integral_v<V>) {
    V out{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("not an integer");
    return out;
  } else if constexpr (std::is_same_v<V, double>) {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } else if constexpr (std::is_same_v<V, Mode>) {
    if (v == "vdt") return Mode::kVdt;
    if (v == "baseline") return Mode::kBaselineVit;
    throw std::invalid_argument("expected vdt or baseline");
  } else if constexpr (std::is_same_v<V, TripletMode>) {
    if (v == "soft") return TripletMode::kSoft;
    if (v == "hard_margin") return TripletMode::kHardMargin;
    throw std::invalid_argument("expected soft or hard_margin");
  } else {
    static_assert(std::is_same_v<V, Precision>);
    if (v == "float") return Precision::kFloat;
    if (v == "double") return Precision::kDouble;
    throw std::invalid_argument("expected float or double");
  }
}

template <typename V>
std::string format_value(const V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_integral_v<V>) {
    return std::to_string(v);
  } else if constexpr (std::is_same_v<V, double>) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  } else if constexpr (std::is_same_v<V, Mode>) {
    return mode_name(v);
  } else if constexpr (std::is_same_v<V, TripletMode>) {
    return v == TripletMode::kSoft ? "soft" : "hard_margin";
  } else {
    return v == Precision::kFloat ? "float" : "double";
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct ConfigKey {
  const char* name;
  std::function<void(ModelConfig&, TrainConfig&, const std::string&)> set;
  std::function<std::string(const ModelConfig&, const TrainConfig&)> get;
  bool model;  // stored in checkpoint headers
};

template <typename C>
C& select(ModelConfig& m, TrainConfig& t) {
  if constexpr (std::is_same_v<C, ModelConfig>) {
    return m;
  } else {
    return t;
  }
}

template <typename C>
const C& select(const ModelConfig& m, const TrainConfig& t) {
  if constexpr (std::is_same_v<C, ModelConfig>) {
    return m;
  } else {
    return t;
  }
}

template <typename C, typename V>
ConfigKey key(const char* name, V C::*member) {
  return {name,
          [member](ModelConfig& m, TrainConfig& t, const std::string& v) { select<C>(m, t).*member = parse_value<V>(v); },
          [member](const ModelConfig& m, const TrainConfig& t) { return format_value(select<C>(m, t).*member); },
          std::is_same_v<C, ModelConfig>};
}

inline const std::vector<ConfigKey>& config_keys() {
  using M = ModelConfig;
  using T = TrainConfig;
  static const std::vector<ConfigKey> keys = {
      key("image_height", &M::image_height),
      key("image_width", &M::image_width),
      key("channels", &M::channels),
      key("patch_size", &M::patch_size),
      key("num_blocks", &M::num_blocks),
      key("embed_dim", &M::embed_dim),
      key("num_heads", &M::num_heads),
      key("mlp_ratio", &M::mlp_ratio),
      key("mode", &M::mode),
      key("disable_subtraction", &M::disable_subtraction),
      key("num_identities", &M::num_identities),
      key("layer_norm_eps", &M::layer_norm_eps),
      key("epochs", &T::epochs),
      key("P", &T::P),
      key("K", &T::K),
      key("steps_per_epoch", &T::steps_per_epoch),
      key("lr_initial", &T::lr_initial),
      key("lr_final", &T::lr_final),
      key("momentum", &T::momentum),
      key("lambda", &T::lambda),
      key("triplet_mode", &T::triplet_mode),
      key("margin", &T::margin),
      key("disable_orthogonal", &T::disable_orthogonal),
      key("seed", &T::seed),
      key("precision", &T::precision),
      key("pad", &T::pad),
      key("erase_prob", &T::erase_prob),
  };
  return keys;
}

}  // namespace detail

// Sets one key; `line` is only used in error messages (0 for flags).
inline void set_config_value(ModelConfig& m, TrainConfig& t, const std::string& key, const std::string& value,
                             std::size_t line = 0) {
  for (const auto& k : detail::config_keys()) {
    if (key != k.name) continue;
    try {
      k.set(m, t, value);
    } catch (const std::exception& e) {
      const std::string msg = "bad value '" + value + "' for " + key + ": " + e.what();
      if (line > 0) throw ParseError("config", msg, line);
      throw ConfigError("config", msg);
    }
    return;
  }
  if (line > 0) throw ParseError("config", "unknown key '" + key + "'", line);
  throw ConfigError("config", "unknown key '" + key + "'");
}

// Applies `key = value` lines on top of the given configs. Blank lines and
// lines starting with '#' are skipped.
inline void apply_config_text(const std::string& text, ModelConfig& m, TrainConfig& t) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError("config", "expected 'key = value'", lineno);
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string value = detail::trim(s.substr(eq + 1));
    if (key.empty()) throw ParseError("config", "empty key", lineno);
    set_config_value(m, t, key, value, lineno);
  }
}

inline std::string config_text(const ModelConfig& m, const TrainConfig& t, bool model_only = false) {
  std::string out;
  for (const auto& k : detail::config_keys()) {
    if (model_only && !k.model) continue;
    out += std::string(k.name) + " = " + k.get(m, t) + "\n";
  }
  return out;
}

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> out;
  for (const auto& k : detail::config_keys()) out.emplace_back(k.name);
  return out;
}

}  // namespace vdt

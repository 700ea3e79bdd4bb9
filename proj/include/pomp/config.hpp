#pragma once

// Flat `key = value` configuration with a published schema. Unknown and
// duplicate keys are hard errors; `--set` overrides win over file values.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pomp/binary_io.hpp"
#include "pomp/digest.hpp"
#include "pomp/error.hpp"

namespace pomp {

enum class ValueType { Integer, Real, Boolean, Text, IntegerList, TextList };

struct KeySpec {
  std::string_view name;
  ValueType type;
  std::optional<std::string_view> default_value;  // nullopt: required when read
  std::string_view help;
};

// clang-format off
inline constexpr KeySpec kConfigSchema[] = {
    // data generation
    {"n_classes",          ValueType::Integer, "200",     "number of synthetic classes"},
    {"d",                  ValueType::Integer, "64",      "feature dimension"},
    {"e",                  ValueType::Integer, "32",      "token embedding dimension"},
    {"tokens_per_class",   ValueType::Integer, "4",       "tokens per class name"},
    {"shots",              ValueType::Integer, "16",      "images per class"},
    {"noise_sigma",        ValueType::Real,    "0.35",    "intra-class image noise"},
    {"zipf_exponent",      ValueType::Real,    "1.0",     "class frequency long-tail exponent"},
    {"heldout_fraction",   ValueType::Real,    "0.25",    "fraction of classes held out"},
    {"token_scale",        ValueType::Real,    "0.1",     "token embedding scale"},
    {"token_offset",       ValueType::Real,    "3.0",     "shared token offset magnitude"},
    {"token_jitter",       ValueType::Real,    "3.0",     "per-token jitter"},
    {"seed",               ValueType::Integer, std::nullopt, "master seed"},
    // encoder
    {"encoder",            ValueType::Text,    "tanh",    "linear | tanh"},
    {"encoder_seed",       ValueType::Integer, "7",       "seed of the frozen encoder weights"},
    // training
    {"K",                  ValueType::Integer, "64",      "classes contrasted per step"},
    {"batch_size",         ValueType::Integer, "32",      "images per step"},
    {"epochs",             ValueType::Integer, "20",      "training epochs"},
    {"lr0",                ValueType::Real,    "0.002",   "initial SGD learning rate"},
    {"tau",                ValueType::Real,    "0.07",    "softmax temperature"},
    {"prompt_len",         ValueType::Integer, "16",      "soft prompt length M"},
    {"distribution",       ValueType::Text,    "uniform", "uniform | frequency | similarity"},
    {"similarity_tau",     ValueType::Real,    "0.07",    "temperature of the similarity proposal"},
    {"margin",             ValueType::Text,    "adaptive","adaptive | non-negative number"},
    {"per_image_sampling", ValueType::Boolean, "false",   "sample one class subset per image"},
    // paths and evaluation
    {"data_dir",           ValueType::Text,    "",        "directory holding generated data (default: --out)"},
    {"checkpoint",         ValueType::Text,    "",        "checkpoint path (default: <out>/checkpoint.bin)"},
    {"split",              ValueType::Text,    "heldout", "pretrain | heldout"},
    // grad-check
    {"grad_h",             ValueType::Real,    "1e-5",    "finite-difference step"},
    {"grad_fixtures",      ValueType::Integer, "20",      "random fixtures per (encoder, K) cell"},
    {"grad_tolerance",     ValueType::Real,    "1e-4",    "maximum relative error"},
    {"grad_inject",        ValueType::Text,    "none",    "none | flip_positive (mutation hook)"},
    // bench-memory
    {"bench_k",            ValueType::IntegerList, "64,128,256,512", "K values swept by bench-memory"},
    // ablate
    {"ablate_margins",     ValueType::TextList, "0,adaptive", "margin grid"},
    {"ablate_distributions", ValueType::TextList, "uniform,frequency,similarity", "distribution grid"},
    {"ablate_k",           ValueType::IntegerList, "64",  "K grid"},
};
// clang-format on

inline const KeySpec* find_key(std::string_view name) {
  for (const auto& key : kConfigSchema) {
    if (key.name == name) return &key;
  }
  return nullptr;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(',', start);
    if (comma == std::string_view::npos) comma = s.size();
    const auto item = trim(s.substr(start, comma - start));
    if (!item.empty()) out.emplace_back(item);
    start = comma + 1;
  }
  return out;
}

template <class T>
std::optional<T> parse_exact(std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || text.empty()) return std::nullopt;
  return value;
}

inline std::optional<double> parse_real(std::string_view text) {
  if (text.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(text), &used);
    if (used != text.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline void check_type(const KeySpec& key, std::string_view value) {
  auto fail = [&](const char* expected) {
    throw ConfigError("key '" + std::string(key.name) + "': expected " + expected + ", got '" +
                      std::string(value) + "'");
  };
  switch (key.type) {
    case ValueType::Integer:
      if (!parse_exact<std::uint64_t>(value)) fail("a non-negative integer");
      break;
    case ValueType::Real:
      if (!parse_real(value)) fail("a real number");
      break;
    case ValueType::Boolean:
      if (value != "true" && value != "false") fail("true or false");
      break;
    case ValueType::IntegerList:
      for (const auto& item : split_list(value)) {
        if (!parse_exact<std::uint64_t>(item)) fail("a comma-separated list of integers");
      }
      break;
    case ValueType::Text:
    case ValueType::TextList: break;
  }
}

}  // namespace detail

class CliConfig {
 public:
  /// Parses `key = value` lines; `#` starts a comment line.
  static CliConfig parse(std::string_view text, const std::string& origin = "config") {
    CliConfig cfg;
    std::size_t start = 0;
    std::size_t line_no = 0;
    while (start < text.size()) {
      auto stop = text.find('\n', start);
      if (stop == std::string_view::npos) stop = text.size();
      const auto raw = text.substr(start, stop - start);
      start = stop + 1;
      ++line_no;
      const auto line = detail::trim(raw);
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const auto key = detail::trim(line.substr(0, eq));
      const auto value = detail::trim(line.substr(eq + 1));
      if (cfg.file_values_.count(std::string(key)) != 0) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" +
                          std::string(key) + "'");
      }
      cfg.store(cfg.file_values_, key, value, origin + ":" + std::to_string(line_no));
    }
    return cfg;
  }

  static CliConfig load(const std::filesystem::path& path) {
    io::Bytes bytes;
    try {
      bytes = io::read_file(path);
    } catch (const IoError& err) {
      throw ConfigError(err.what());
    }
    return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                 path.string());
  }

  /// Applies one `key=value` override.
  void set(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("--set expects key=value, got '" + std::string(assignment) + "'");
    }
    store(overrides_, detail::trim(assignment.substr(0, eq)),
          detail::trim(assignment.substr(eq + 1)), "--set");
  }

  bool has(std::string_view key) const {
    const std::string k(key);
    return overrides_.count(k) != 0 || file_values_.count(k) != 0;
  }

  /// Resolved text value: override, then file, then schema default.
  std::string text(std::string_view key) const {
    const KeySpec* spec = find_key(key);
    if (spec == nullptr) throw ConfigError("unknown key '" + std::string(key) + "'");
    const std::string k(key);
    if (auto it = overrides_.find(k); it != overrides_.end()) return it->second;
    if (auto it = file_values_.find(k); it != file_values_.end()) return it->second;
    if (!spec->default_value) throw ConfigError("missing required key '" + k + "'");
    return std::string(*spec->default_value);
  }

  std::uint64_t integer(std::string_view key) const {
    return *detail::parse_exact<std::uint64_t>(text(key));
  }
  double real(std::string_view key) const { return *detail::parse_real(text(key)); }
  bool boolean(std::string_view key) const { return text(key) == "true"; }
  std::vector<std::string> list(std::string_view key) const { return detail::split_list(text(key)); }
  std::vector<std::size_t> integer_list(std::string_view key) const {
    std::vector<std::size_t> out;
    for (const auto& item : list(key)) out.push_back(*detail::parse_exact<std::uint64_t>(item));
    return out;
  }

  /// Every schema key with its resolved value, one `key=value` per line;
  /// required keys that are unset are omitted.
  std::string canonical() const {
    std::ostringstream out;
    for (const auto& key : kConfigSchema) {
      if (!key.default_value && !has(key.name)) continue;
      out << key.name << '=' << text(key.name) << '\n';
    }
    return out.str();
  }

  Digest digest() const { return sha256(canonical()); }

 private:
  void store(std::map<std::string, std::string>& into, std::string_view key,
             std::string_view value, const std::string& where) {
    const KeySpec* spec = find_key(key);
    if (spec == nullptr) throw ConfigError(where + ": unknown key '" + std::string(key) + "'");
    detail::check_type(*spec, value);
    into[std::string(key)] = std::string(value);
  }

  std::map<std::string, std::string> file_values_;
  std::map<std::string, std::string> overrides_;
};

}  // namespace pomp

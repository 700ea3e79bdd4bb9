#pragma once

// Little-endian encoding helpers shared by the binary file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pomp/error.hpp"

namespace pomp::io {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

using Bytes = std::vector<std::uint8_t>;

class Writer {
 public:
  void magic(std::string_view tag) { raw(tag.data(), tag.size()); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void bytes(std::span<const std::uint8_t> b) { raw(b.data(), b.size()); }

  const Bytes& buffer() const noexcept { return buf_; }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  Bytes buf_;
};

/// Bounds-checked cursor; every failure reports the byte offset.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data, std::string name = "payload")
      : data_(data), name_(std::move(name)) {}

  /// Reads the leading tag and throws a FormatError naming what was found.
  void expect_magic(std::string_view tag) {
    const auto found = take(tag.size(), "magic");
    if (std::memcmp(found.data(), tag.data(), tag.size()) != 0) {
      std::string seen;
      for (auto c : found) seen.push_back((c >= 0x20 && c < 0x7f) ? static_cast<char>(c) : '?');
      throw FormatError(name_ + ": bad magic '" + seen + "', expected '" + std::string(tag) + "'",
                        0);
    }
  }
  void expect_version(std::uint32_t expected) {
    const auto at = pos_;
    const auto v = u32("version");
    if (v != expected) {
      throw FormatError(name_ + ": unsupported version " + std::to_string(v), at);
    }
  }
  std::uint32_t u32(const char* what) { return read<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return read<std::uint64_t>(what); }
  float f32(const char* what) { return read<float>(what); }
  double f64(const char* what) { return read<double>(what); }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw TruncationError(name_ + ": truncated while reading " + what + " (need " +
                                std::to_string(n) + " bytes, have " +
                                std::to_string(data_.size() - pos_) + ")",
                            pos_);
    }
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  /// Checks that at least `n` more bytes exist without consuming them.
  void require(std::uint64_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw TruncationError(name_ + ": " + what + " declares " + std::to_string(n) +
                                " bytes but only " + std::to_string(data_.size() - pos_) +
                                " remain",
                            pos_);
    }
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  const std::string& name() const noexcept { return name_; }

 private:
  template <class T>
  T read(const char* what) {
    const auto raw = take(sizeof(T), what);
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string name_;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  Bytes out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace pomp::io

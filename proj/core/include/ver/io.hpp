// SPDX-License-Identifier: Apache-2.0
//
// Little-endian byte buffers and atomic file replacement.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ver/error.hpp"

namespace ver {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void text(std::string_view s) { bytes(s.data(), s.size()); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void f64s(std::span<const double> v) { bytes(v.data(), v.size_bytes()); }

  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

/// Bounds-checked reader; every failure reports the byte offset it happened at.
class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> data) : data_(data) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void bytes(void* out, std::size_t n, const char* what) {
    if (remaining() < n) throw FormatError(std::string("truncated ") + what, pos_);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string text(std::size_t n, const char* what) {
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, sizeof v, what);
    return v;
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    bytes(&v, sizeof v, what);
    return v;
  }
  std::vector<double> f64s(std::size_t count, const char* what) {
    std::vector<double> v(count);
    bytes(v.data(), count * sizeof(double), what);
    return v;
  }

 private:
  std::span<const unsigned char> data_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> data);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace ver

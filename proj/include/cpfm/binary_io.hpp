// SPDX-License-Identifier: Apache-2.0
#pragma once

// Little-endian byte encoding shared by the dataset, checkpoint and buffer files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "cpfm/errors.hpp"

namespace cpfm::io {

static_assert(std::endian::native == std::endian::little, "byte encoders assume a little-endian host");

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void bytes(std::string_view s) { raw(s.data(), s.size()); }

  void f64s(const std::vector<double>& v) { raw(v.data(), v.size() * sizeof(double)); }

  const std::vector<std::uint8_t>& data() const { return bytes_; }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }

  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  std::uint8_t u8() { return take<std::uint8_t>("u8"); }
  std::uint16_t u16() { return take<std::uint16_t>("u16"); }
  std::uint32_t u32() { return take<std::uint32_t>("u32"); }
  std::uint64_t u64() { return take<std::uint64_t>("u64"); }
  double f64() { return take<double>("f64"); }

  std::string bytes(std::size_t n) {
    need(n, "byte string");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::vector<double> f64s(std::size_t count) {
    if (count > remaining() / sizeof(double)) {
      throw FormatError("truncated: expected " + std::to_string(count) + " f64 values", pos_);
    }
    std::vector<double> v(count);
    std::memcpy(v.data(), bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return v;
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (n > remaining()) throw FormatError(std::string("truncated while reading ") + what, pos_);
  }

  template <typename T>
  T take(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace cpfm::io

#pragma once

// Little-endian binary I/O helpers for the MILE/MILA/MILF file formats.
// Byte order is explicit so the formats are bit-exact across platforms.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mil/errors.hpp"

namespace mil::io {

class Writer {
 public:
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void put_u8(std::uint8_t v) { buf_.push_back(v); }
  void put_u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void put_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }
  void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }

  const std::vector<unsigned char>& bytes() const { return buf_; }

  // Write via a temp file and rename so readers never observe partial output.
  void save(const std::filesystem::path& path) const {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot open for writing: " + tmp.string());
      out.write(reinterpret_cast<const char*>(buf_.data()),
                static_cast<std::streamsize>(buf_.size()));
      if (!out) throw DataError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open: " + path.string());
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  void get_bytes(void* p, std::size_t n) {
    if (remaining() < n) throw FormatError("truncated file", static_cast<long long>(pos_));
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t get_u8() {
    std::uint8_t v;
    get_bytes(&v, 1);
    return v;
  }
  std::uint32_t get_u32() {
    unsigned char b[4];
    get_bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t get_u64() {
    unsigned char b[8];
    get_bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  double get_f64() { return std::bit_cast<double>(get_u64()); }
  float get_f32() { return std::bit_cast<float>(get_u32()); }

  void expect_magic(const char (&magic)[7]) {
    char got[6];
    get_bytes(got, 6);
    if (std::memcmp(got, magic, 6) != 0) throw FormatError("bad magic", 0);
  }
  void expect_eof() const {
    if (pos_ != buf_.size()) throw FormatError("trailing bytes", static_cast<long long>(pos_));
  }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace mil::io

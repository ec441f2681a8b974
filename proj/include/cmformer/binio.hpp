#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cmformer/errors.hpp"

namespace cmf {

// Little-endian binary primitives with explicit byte order, independent of
// host endianness.

class BinWriter {
 public:
  explicit BinWriter(const std::string& path)
      : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw format_error("cannot open for writing: " + path);
  }

  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v & 0xff));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void magic(const char tag[5]) { bytes(tag, 4); }

  void close() {
    out_.close();
    if (!out_) throw format_error("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw format_error("cannot open for reading: " + path);
  }

  std::uint8_t u8() {
    int c = in_.get();
    if (c == EOF) throw truncated_file_error("truncated file: " + path_);
    return static_cast<std::uint8_t>(c);
  }
  std::uint16_t u16() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | (static_cast<std::uint16_t>(u8()) << 8));
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) {
      throw truncated_file_error("truncated file: " + path_);
    }
  }
  void expect_magic(const char tag[5]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, tag, 4) != 0) {
      throw bad_magic_error("bad magic in " + path_ + ": expected " +
                            std::string(tag, 4));
    }
  }
  void expect_version(std::uint32_t want) {
    const std::uint32_t got = u32();
    if (got != want) {
      throw bad_version_error("unsupported version " + std::to_string(got) +
                              " in " + path_);
    }
  }

  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace cmf

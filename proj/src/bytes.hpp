#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "hyperdys/error.hpp"

namespace hyperdys::detail {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void tag(const char (&t)[5]) { bytes(t, 4); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void i16(std::int16_t v) { bytes(&v, 2); }
  void f32(float v) { bytes(&v, 4); }

  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian reader; overruns raise FormatError.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  void seek(std::size_t pos) {
    if (pos > data_.size()) fail("seek past end");
    pos_ = pos;
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > remaining()) fail("unexpected end of data");
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  template <typename V>
  V read() {
    V v;
    auto s = take(sizeof(V));
    std::memcpy(&v, s.data(), sizeof(V));
    return v;
  }

  std::uint8_t u8() { return read<std::uint8_t>(); }
  std::uint16_t u16() { return read<std::uint16_t>(); }
  std::uint32_t u32() { return read<std::uint32_t>(); }
  std::string tag() {
    auto s = take(4);
    return std::string(reinterpret_cast<const char*>(s.data()), 4);
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " (offset " + std::to_string(pos_) + ")");
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace hyperdys::detail

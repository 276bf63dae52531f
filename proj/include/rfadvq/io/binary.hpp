#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rfadvq/error.hpp"

namespace rfadvq::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; add byte swapping for this target");

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void magic(const char (&m)[5]) { os_.write(m, 4); }
  void string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void array(std::span<const T> v) {
    os_.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(T)));
  }
  void check(const std::string& what) const {
    if (!os_) throw FormatError("write failed: " + what);
  }

 private:
  std::ostream& os_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  template <typename T>
  T get() {
    T v;
    read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }
  void expect_magic(const char (&m)[5]) {
    char buf[4];
    read(buf, 4);
    if (std::memcmp(buf, m, 4) != 0) {
      throw FormatError(what_ + ": bad magic, expected '" + std::string(m, 4) + "'");
    }
  }
  void expect_version(std::uint32_t supported) {
    const auto v = get<std::uint32_t>();
    if (v != supported) {
      throw UnsupportedVersion(what_ + ": unsupported version " + std::to_string(v) +
                               " (supported: " + std::to_string(supported) + ")");
    }
  }
  std::string string(std::uint32_t max_len = 1u << 26) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw FormatError(what_ + ": string length " + std::to_string(n) + " too large");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  template <typename T>
  void array(std::span<T> out) {
    read(reinterpret_cast<char*>(out.data()), out.size() * sizeof(T));
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
  const std::string& what() const noexcept { return what_; }

 private:
  void read(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw FormatError(what_ + ": truncated");
  }

  std::istream& is_;
  std::string what_;
};

}  // namespace rfadvq::io

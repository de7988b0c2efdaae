#pragma once

// Little-endian primitives for the checkpoint and vector-file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "grains/error.hpp"

namespace grains::io {

inline void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw IoError("write failed");
}

template <typename UInt>
void write_uint(std::ostream& os, UInt v) {
  unsigned char buf[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(os, buf, sizeof(UInt));
}

inline void write_u16(std::ostream& os, std::uint16_t v) { write_uint(os, v); }
inline void write_u32(std::ostream& os, std::uint32_t v) { write_uint(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_uint(os, v); }
inline void write_f64(std::ostream& os, double v) { write_uint(os, std::bit_cast<std::uint64_t>(v)); }

inline void read_bytes(std::istream& is, void* data, std::size_t n, std::string_view what) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError("truncated input while reading " + std::string(what));
  }
}

template <typename UInt>
UInt read_uint(std::istream& is, std::string_view what) {
  unsigned char buf[sizeof(UInt)];
  read_bytes(is, buf, sizeof(UInt), what);
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(buf[i]) << (8 * i);
  return v;
}

inline std::uint16_t read_u16(std::istream& is, std::string_view what) { return read_uint<std::uint16_t>(is, what); }
inline std::uint32_t read_u32(std::istream& is, std::string_view what) { return read_uint<std::uint32_t>(is, what); }
inline std::uint64_t read_u64(std::istream& is, std::string_view what) { return read_uint<std::uint64_t>(is, what); }
inline double read_f64(std::istream& is, std::string_view what) {
  return std::bit_cast<double>(read_uint<std::uint64_t>(is, what));
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  read_bytes(is, got.data(), got.size(), "magic");
  if (got != magic) throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
}

/// FNV-1a, 64-bit.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <typename UInt>
  void update_uint(UInt v) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      const auto b = static_cast<unsigned char>(v >> (8 * i));
      update(&b, 1);
    }
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

}  // namespace grains::io

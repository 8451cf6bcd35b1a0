// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitives shared by the checkpoint and panel cache formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tips/error.hpp"

namespace tips::binio {

template <typename U>
void write_le(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw DataError("unexpected end of binary file");
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }
inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

inline void write_f64s(std::ostream& out, std::span<const double> values) {
  for (double v : values) write_f64(out, v);
}

inline std::vector<double> read_f64s(std::istream& in, std::size_t n) {
  std::vector<double> values(n);
  for (double& v : values) v = read_f64(in);
  return values;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_le(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::size_t max_len = 1 << 20) {
  auto len = read_le<std::uint32_t>(in);
  if (len > max_len) throw DataError("string record too long: " + std::to_string(len));
  std::string s(len, '\0');
  if (len && !in.read(s.data(), len)) throw DataError("unexpected end of binary file");
  return s;
}

inline void write_magic(std::ostream& out, const char (&magic)[9]) { out.write(magic, 8); }

inline void expect_magic(std::istream& in, const char (&magic)[9], const std::string& what) {
  char buf[8];
  if (!in.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) {
    throw DataError("not a " + what + " file (bad magic)");
  }
}

}  // namespace tips::binio

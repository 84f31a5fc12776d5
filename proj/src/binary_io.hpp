#pragma once

// Little-endian primitives for the checkpoint and feature file formats.

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "capgen/errors.hpp"

namespace capgen::binary {

inline void write_u32(std::ostream& out, std::uint32_t value) {
  const std::array<char, 4> bytes{static_cast<char>(value & 0xFF), static_cast<char>((value >> 8) & 0xFF),
                                  static_cast<char>((value >> 16) & 0xFF), static_cast<char>((value >> 24) & 0xFF)};
  out.write(bytes.data(), 4);
}

inline void write_f32(std::ostream& out, float value) { write_u32(out, std::bit_cast<std::uint32_t>(value)); }

inline void write_bytes(std::ostream& out, const std::string& bytes) {
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Reads `n` bytes or throws FormatError naming `what` and the stream offset.
inline std::string read_bytes(std::istream& in, std::size_t n, const std::string& what) {
  const auto offset = static_cast<long long>(in.tellg());
  std::string bytes(n, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw FormatError("truncated input reading " + what + " at byte offset " + std::to_string(offset));
  }
  return bytes;
}

inline std::uint32_t read_u32(std::istream& in, const std::string& what) {
  const std::string b = read_bytes(in, 4, what);
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[0])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[3])) << 24);
}

inline float read_f32(std::istream& in, const std::string& what) { return std::bit_cast<float>(read_u32(in, what)); }

}  // namespace capgen::binary

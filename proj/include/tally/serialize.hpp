#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tally {

// Explicit little-endian byte IO, independent of host endianness.

inline void write_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32le(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("read_u32le: unexpected end of stream");
  }
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_u64le(std::ostream& os, std::uint64_t v) {
  write_u32le(os, static_cast<std::uint32_t>(v & 0xffffffffu));
  write_u32le(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t read_u64le(std::istream& is) {
  const std::uint64_t lo = read_u32le(is);
  const std::uint64_t hi = read_u32le(is);
  return lo | (hi << 32);
}

inline void write_f64le(std::ostream& os, double v) {
  write_u64le(os, std::bit_cast<std::uint64_t>(v));
}

inline double read_f64le(std::istream& is) {
  return std::bit_cast<double>(read_u64le(is));
}

inline void write_f32le(std::ostream& os, float v) {
  write_u32le(os, std::bit_cast<std::uint32_t>(v));
}

inline float read_f32le(std::istream& is) {
  return std::bit_cast<float>(read_u32le(is));
}

inline void write_f64_span(std::ostream& os, const std::vector<double>& v) {
  for (double x : v) write_f64le(os, x);
}

inline std::vector<double> read_f64_span(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = read_f64le(is);
  return v;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("cannot open for writing: " + p.string());
  }
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) {
    throw std::runtime_error("cannot open for reading: " + p.string());
  }
  return is;
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream is = open_in(p);
  std::string content((std::istreambuf_iterator<char>(is)),
                      std::istreambuf_iterator<char>());
  return content;
}

inline void write_text_file(const std::filesystem::path& p,
                            std::string_view content) {
  std::ofstream os = open_out(p);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) {
    throw std::runtime_error("short write: " + p.string());
  }
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace tally

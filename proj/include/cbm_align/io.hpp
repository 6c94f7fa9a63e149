#pragma once

// Little-endian binary blobs and atomic file replacement.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "cbm_align/error.hpp"

namespace cbm_align::io {

namespace fs = std::filesystem;

template <typename T>
concept Scalar = std::is_arithmetic_v<T>;

template <Scalar T>
void append_le(std::vector<char>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  static_assert(sizeof(U) == sizeof(T));
  U bits = std::bit_cast<U>(value);
  for (std::size_t b = 0; b < sizeof(T); ++b) {
    out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
  }
}

template <Scalar T>
T read_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  U bits = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) {
    bits |= static_cast<U>(static_cast<unsigned char>(p[b])) << (8 * b);
  }
  return std::bit_cast<T>(bits);
}

template <Scalar T>
std::vector<char> encode(std::span<const T> values) {
  std::vector<char> out;
  out.reserve(values.size() * sizeof(T));
  for (T v : values) append_le(out, v);
  return out;
}

template <Scalar T>
std::vector<T> decode(const std::vector<char>& bytes, const fs::path& source) {
  if (bytes.size() % sizeof(T) != 0) {
    throw Error(ErrorKind::kFormat,
                source.string() + ": size " + std::to_string(bytes.size()) +
                    " is not a multiple of " + std::to_string(sizeof(T)));
  }
  std::vector<T> out(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = read_le<T>(bytes.data() + i * sizeof(T));
  }
  return out;
}

inline std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "missing file: " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

inline std::string read_text(const fs::path& path) {
  auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

/// Writes to a sibling temp file and renames it over `path`.
inline void write_atomic(const fs::path& path, std::span<const char> bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::kIo, "write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::kIo, "rename failed: " + path.string() + ": " + ec.message());
}

inline void write_atomic(const fs::path& path, const std::string& text) {
  write_atomic(path, std::span<const char>(text.data(), text.size()));
}

template <Scalar T>
void write_blob(const fs::path& path, std::span<const T> values) {
  auto bytes = encode(values);
  write_atomic(path, std::span<const char>(bytes));
}

template <Scalar T>
std::vector<T> read_blob(const fs::path& path, std::size_t expected_count) {
  auto values = decode<T>(read_file(path), path);
  if (values.size() != expected_count) {
    throw Error(ErrorKind::kShapeMismatch,
                path.string() + ": expected " + std::to_string(expected_count) +
                    " values, found " + std::to_string(values.size()));
  }
  return values;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace cbm_align::io

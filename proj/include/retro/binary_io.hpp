#pragma once

// Little-endian serialization helpers shared by the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "retro/common.hpp"

namespace retro {

class BinaryWriter {
 public:
  void magic(std::string_view tag) { buf_.append(tag); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    const auto bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }

  template <typename T>
  void put_span(std::span<const T> values) {
    for (const T& v : values) put(v);
  }

  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }

  const std::string& bytes() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::string data, std::string what = "file") : buf_(std::move(data)), what_(std::move(what)) {}
  static BinaryReader from_file(const std::filesystem::path& path);

  void expect_magic(std::string_view tag);

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    require(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  template <typename T>
  void get_span(std::span<T> out) {
    for (T& v : out) v = get<T>();
  }

  std::string get_string();
  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void require(std::size_t n) const;

  std::string buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view data);

/// CRC-32 of a byte string, rendered as 8 lowercase hex digits.
std::string crc32_hex(std::string_view data);
std::string file_crc32_hex(const std::filesystem::path& path);

}  // namespace retro

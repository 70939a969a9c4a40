#include "retro/binary_io.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include <zlib.h>

namespace retro {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void BinaryWriter::write_file(const std::filesystem::path& path) const { retro::write_file(path, buf_); }

BinaryReader BinaryReader::from_file(const std::filesystem::path& path) {
  return BinaryReader(read_file(path), path.string());
}

void BinaryReader::require(std::size_t n) const {
  if (pos_ + n > buf_.size()) throw ParseError(what_ + ": truncated at byte " + std::to_string(pos_));
}

void BinaryReader::expect_magic(std::string_view tag) {
  require(tag.size());
  if (std::string_view(buf_).substr(pos_, tag.size()) != tag) {
    throw ParseError(what_ + ": bad magic, expected " + std::string(tag));
  }
  pos_ += tag.size();
}

std::string BinaryReader::get_string() {
  const auto n = get<std::uint32_t>();
  require(n);
  std::string s = buf_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::string crc32_hex(std::string_view data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded pieces.
  constexpr std::size_t kPiece = 1u << 30;
  for (std::size_t off = 0; off < data.size(); off += kPiece) {
    const auto n = std::min(kPiece, data.size() - off);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data() + off), static_cast<uInt>(n));
  }
  char hex[9];
  std::snprintf(hex, sizeof hex, "%08lx", static_cast<unsigned long>(crc));
  return hex;
}

std::string file_crc32_hex(const std::filesystem::path& path) { return crc32_hex(read_file(path)); }

}  // namespace retro

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flipreid::io {

/// Append-only little-endian byte sink.
class ByteWriter {
public:
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void magic(std::string_view m) { buf_.insert(buf_.end(), m.begin(), m.end()); }
  void u32(std::uint32_t v);
  void f64(double v);
  void str(std::string_view s); // u32 length prefix + bytes

  const std::vector<std::uint8_t> &data() const { return buf_; }
  std::vector<std::uint8_t> release() { return std::move(buf_); }

private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader; throws FormatError on truncation.
class ByteReader {
public:
  ByteReader(std::span<const std::uint8_t> data, std::string context)
      : data_(data), context_(std::move(context)) {}

  void expect_magic(std::string_view m);
  std::uint32_t u32();
  double f64();
  std::string str();
  std::span<const std::uint8_t> bytes(std::size_t n);

  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const;

private:
  void need(std::size_t n) const;

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path &path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path &path, std::span<const std::uint8_t> data);
void write_text_atomic(const std::filesystem::path &path, std::string_view text);

} // namespace flipreid::io

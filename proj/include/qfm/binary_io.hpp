#pragma once

// Little-endian primitives shared by the corpus, segment and checkpoint containers.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qfm::io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::span<const std::uint8_t> data);
  void magic(std::string_view m);
  /// u32 length prefix followed by raw bytes.
  void str(std::string_view s);
  void f32_array(std::span<const float> values);
  /// Bit-packed booleans, LSB first, ceil(n/8) bytes.
  void bits(const std::vector<bool>& flags);

  const std::vector<std::uint8_t>& data() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  void expect_magic(std::string_view m);
  std::string str(std::uint32_t max_len = 1u << 20);
  std::vector<float> f32_array(std::uint64_t n);
  std::vector<bool> bits(std::uint64_t n);

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  std::uint64_t remaining() const { return data_.size() - pos_; }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(std::uint64_t n);

  std::span<const std::uint8_t> data_;
  std::uint64_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> data);

}  // namespace qfm::io

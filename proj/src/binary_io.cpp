#include "qfm/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "qfm/errors.hpp"

namespace qfm::io {

static_assert(std::endian::native == std::endian::little,
              "container encoding assumes a little-endian host");

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(std::span<const std::uint8_t> data) {
  buf_.insert(buf_.end(), data.begin(), data.end());
}

void ByteWriter::magic(std::string_view m) {
  for (char c : m) buf_.push_back(static_cast<std::uint8_t>(c));
}

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  magic(s);
}

void ByteWriter::f32_array(std::span<const float> values) {
  const auto old = buf_.size();
  buf_.resize(old + values.size() * sizeof(float));
  std::memcpy(buf_.data() + old, values.data(), values.size() * sizeof(float));
}

void ByteWriter::bits(const std::vector<bool>& flags) {
  std::uint8_t acc = 0;
  std::size_t i = 0;
  for (; i < flags.size(); ++i) {
    if (flags[i]) acc |= static_cast<std::uint8_t>(1u << (i % 8));
    if (i % 8 == 7) {
      buf_.push_back(acc);
      acc = 0;
    }
  }
  if (i % 8 != 0) buf_.push_back(acc);
}

void ByteReader::need(std::uint64_t n) {
  if (remaining() < n) fail("unexpected end of data, need " + std::to_string(n) + " bytes");
}

void ByteReader::fail(const std::string& what) const { throw FormatError(what, pos_); }

std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::expect_magic(std::string_view m) {
  const auto start = pos_;
  need(m.size());
  if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) {
    pos_ = start;
    fail("bad magic, expected '" + std::string(m) + "'");
  }
  pos_ += m.size();
}

std::string ByteReader::str(std::uint32_t max_len) {
  const auto len = u32();
  if (len > max_len) fail("string length " + std::to_string(len) + " exceeds limit");
  need(len);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), len);
  pos_ += len;
  return s;
}

std::vector<float> ByteReader::f32_array(std::uint64_t n) {
  if (n > remaining() / sizeof(float)) fail("sample array of length " + std::to_string(n) + " truncated");
  std::vector<float> out(n);
  std::memcpy(out.data(), data_.data() + pos_, n * sizeof(float));
  pos_ += n * sizeof(float);
  return out;
}

std::vector<bool> ByteReader::bits(std::uint64_t n) {
  const auto nbytes = (n + 7) / 8;
  need(nbytes);
  std::vector<bool> out(n);
  for (std::uint64_t i = 0; i < n; ++i) out[i] = (data_[pos_ + i / 8] >> (i % 8)) & 1u;
  pos_ += nbytes;
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file for reading: " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace qfm::io

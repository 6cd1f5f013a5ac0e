#include "sbanet/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "sbanet/errors.hpp"

namespace sbanet {

void ByteWriter::u16(std::uint16_t v) {
  u8(static_cast<std::uint8_t>(v));
  u8(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(bits >> (8 * i)));
}

void ByteWriter::tag(std::string_view magic) {
  for (char c : magic) u8(static_cast<std::uint8_t>(c));
}

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  tag(s);
}

void ByteReader::need(std::size_t n) const {
  if (n > remaining()) {
    throw FormatError("truncated input: need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                          " left",
                      pos_);
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}

std::uint16_t ByteReader::u16() {
  need(2);
  const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

double ByteReader::f64() {
  need(8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return std::bit_cast<double>(bits);
}

std::span<const std::uint8_t> ByteReader::raw(std::size_t n) {
  need(n);
  auto out = bytes_.subspan(pos_, n);
  pos_ += n;
  return out;
}

void ByteReader::expect_tag(std::string_view magic) {
  const std::size_t at = pos_;
  need(magic.size());
  if (std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0) {
    throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", at);
  }
  pos_ += magic.size();
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  auto data = raw(n);
  return std::string(data.begin(), data.end());
}

void write_tensor(ByteWriter& out, const Tensor& t) {
  out.tag("SBTN");
  out.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) out.u32(static_cast<std::uint32_t>(d));
  for (double v : t.values()) out.f64(v);
}

Tensor read_tensor(ByteReader& in) {
  in.expect_tag("SBTN");
  const std::size_t at = in.offset();
  const std::uint32_t rank = in.u32();
  if (rank == 0 || rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), at);
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    const std::size_t dim_at = in.offset();
    d = in.u32();
    if (d == 0) throw FormatError("zero tensor dimension", dim_at);
    n *= d;
  }
  if (n > in.remaining() / 8) throw FormatError("tensor payload exceeds input", in.offset());
  std::vector<double> values(n);
  for (auto& v : values) v = in.f64();
  return Tensor::from_values(std::move(shape), std::move(values));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace sbanet

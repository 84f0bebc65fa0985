#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <zlib.h>

#include "mtl/error.hpp"
#include "mtl/tensor.hpp"

namespace mtl::io {

// Tensor block dtypes.
enum class DType : std::uint8_t { f64 = 0, i32 = 1 };

// Integer counterpart of Tensor for label maps and index tables.
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  friend bool operator==(const IntTensor&, const IntTensor&) = default;
};

using Block = std::variant<Tensor, IntTensor>;

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = ::crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Little-endian serializer.
class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v), 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }

  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

  void string(std::string_view s) {
    if (s.size() > 0xffff) throw ValueError("string too long for u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  void long_string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  // dtype u8, ndim u8, dims u32..., payload.
  void block(const Tensor& t) {
    header(DType::f64, t.shape());
    for (double v : t.data()) f64(v);
  }

  void block(const IntTensor& t) {
    if (shape_size(t.shape) != t.data.size()) throw ShapeError("IntTensor data does not match its shape");
    header(DType::i32, t.shape);
    for (auto v : t.data) i32(v);
  }

  // Appends CRC32 of everything written so far.
  void finish_with_crc() { u32(crc32_of(bytes_)); }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  void put(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void header(DType dtype, const Shape& shape) {
    if (shape.size() > 0xff) throw ShapeError("too many dimensions for tensor block");
    u8(static_cast<std::uint8_t>(dtype));
    u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) {
      if (d > 0xffffffffu) throw ShapeError("tensor extent exceeds u32");
      u32(static_cast<std::uint32_t>(d));
    }
  }

  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked little-endian deserializer; every short read throws
// TruncatedError with the failing offset.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1, "u8")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2, "u16")); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4, "u32")); }
  std::uint64_t u64() { return get(8, "u64"); }
  std::int32_t i32() { return static_cast<std::int32_t>(static_cast<std::uint32_t>(get(4, "i32"))); }
  double f64() { return std::bit_cast<double>(get(8, "f64")); }

  void expect_magic(std::string_view tag) {
    need(tag.size(), "magic");
    if (std::memcmp(bytes_.data() + offset_, tag.data(), tag.size()) != 0) {
      throw BadMagicError("bad magic: expected \"" + std::string(tag) + "\", found \"" +
                          std::string(reinterpret_cast<const char*>(bytes_.data() + offset_), tag.size()) + "\"");
    }
    offset_ += tag.size();
  }

  std::string string() {
    const auto n = u16();
    return raw_string(n);
  }

  std::string long_string() {
    const auto n = u32();
    return raw_string(n);
  }

  Block block() {
    const auto dtype = u8();
    const auto ndim = u8();
    Shape shape(ndim);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = u32();
      if (d == 0) throw DataError("zero tensor extent at offset " + std::to_string(offset_ - 4));
      count *= d;
    }
    const std::uint64_t width = dtype == static_cast<std::uint8_t>(DType::f64) ? 8 : 4;
    if (dtype > 1) throw DataError("unknown tensor dtype " + std::to_string(dtype));
    if (count > remaining() / width) throw TruncatedError(bytes_.size(), "tensor payload");
    if (dtype == static_cast<std::uint8_t>(DType::f64)) {
      std::vector<double> data(count);
      for (auto& v : data) v = f64();
      return Tensor(std::move(shape), std::move(data));
    }
    IntTensor t{std::move(shape), std::vector<std::int32_t>(count)};
    for (auto& v : t.data) v = i32();
    return t;
  }

  Tensor f64_block(const char* what) {
    auto b = block();
    if (auto* t = std::get_if<Tensor>(&b)) return std::move(*t);
    throw DataError(std::string(what) + ": expected f64 tensor block");
  }

  IntTensor i32_block(const char* what) {
    auto b = block();
    if (auto* t = std::get_if<IntTensor>(&b)) return std::move(*t);
    throw DataError(std::string(what) + ": expected i32 tensor block");
  }

  // Reads the trailing CRC32 and checks it against all preceding bytes; the
  // CRC must be the last four bytes of the buffer.
  void verify_crc() {
    const std::size_t body = offset_;
    const auto stored = u32();
    if (offset_ != bytes_.size()) {
      throw DataError("unexpected " + std::to_string(bytes_.size() - offset_) + " trailing bytes at offset " +
                      std::to_string(offset_));
    }
    if (crc32_of(bytes_.first(body)) != stored) throw ChecksumError("CRC32 mismatch");
  }

  std::size_t offset() const noexcept { return offset_; }
  std::size_t remaining() const noexcept { return bytes_.size() - offset_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) throw TruncatedError(offset_, std::string("reading ") + what);
  }

  std::uint64_t get(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[offset_ + i]) << (8 * i);
    offset_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string raw_string(std::size_t n) {
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), n);
    offset_ += n;
    return s;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t offset_ = 0;
};

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace mtl::io

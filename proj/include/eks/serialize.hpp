#pragma once

// Binary tensor container used by every checkpoint and dataset file:
//   magic "EKST", version u16, dtype tag u16, rank u16, dims as u64 list,
//   then the row-major payload. Everything little-endian.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "eks/tensor.hpp"

namespace eks {

constexpr uint16_t kTensorFormatVersion = 1;
constexpr uint16_t kDtypeF64 = 1;

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void bytes(const void* p, size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void text(const std::string& s) { bytes(s.data(), s.size()); }

  const std::string& data() const { return buf_; }
  size_t size() const { return buf_.size(); }

  void to_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail("cannot open for writing: " + path);
    os.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!os) fail("write failed: " + path);
  }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const char* data, size_t size, std::string source)
      : data_(data), size_(size), source_(std::move(source)) {}

  explicit ByteReader(const std::string& blob, std::string source = "<memory>")
      : ByteReader(blob.data(), blob.size(), std::move(source)) {}

  size_t offset() const { return pos_; }
  size_t remaining() const { return size_ - pos_; }

  uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }
  uint16_t u16() { return static_cast<uint16_t>(le(2)); }
  uint32_t u32() { return static_cast<uint32_t>(le(4)); }
  uint64_t u64() { return le(8); }
  double f64() {
    uint64_t bits = le(8);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  const char* take(size_t n) {
    if (pos_ + n > size_)
      fail("truncated file " + source_ + ": need " + std::to_string(n) + " bytes at offset " +
           std::to_string(pos_) + ", file has " + std::to_string(size_));
    const char* p = data_ + pos_;
    pos_ += n;
    return p;
  }

 private:
  uint64_t le(size_t n) {
    const char* p = take(n);
    uint64_t v = 0;
    for (size_t i = 0; i < n; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(p[i])) << (8 * i);
    return v;
  }

  const char* data_;
  size_t size_;
  size_t pos_ = 0;
  std::string source_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open: " + path);
  std::string blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return blob;
}

inline void write_tensor(ByteWriter& w, const Tensor& t) {
  w.text("EKST");
  w.u16(kTensorFormatVersion);
  w.u16(kDtypeF64);
  w.u16(static_cast<uint16_t>(t.rank()));
  for (size_t d : t.shape()) w.u64(d);
  for (double v : t.values()) w.f64(v);
}

inline Tensor read_tensor(ByteReader& r) {
  size_t start = r.offset();
  const char* magic = r.take(4);
  if (std::memcmp(magic, "EKST", 4) != 0)
    fail("bad tensor magic at offset " + std::to_string(start) + " (expected EKST)");
  uint16_t version = r.u16();
  if (version != kTensorFormatVersion)
    fail("unsupported tensor format version " + std::to_string(version) + " at offset " +
         std::to_string(start));
  uint16_t dtype = r.u16();
  if (dtype != kDtypeF64)
    fail("unsupported dtype tag " + std::to_string(dtype) + " at offset " + std::to_string(start));
  uint16_t rank = r.u16();
  if (rank == 0) fail("tensor with rank 0 at offset " + std::to_string(start));
  Shape shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    uint64_t d = r.u64();
    if (d == 0) fail("tensor with zero dimension at offset " + std::to_string(start));
    shape[i] = static_cast<size_t>(d);
  }
  size_t n = detail::numel_of(shape);
  std::vector<double> data(n);
  for (size_t i = 0; i < n; ++i) data[i] = r.f64();
  return Tensor::from_data(shape, std::move(data));
}

inline void save_tensor(const Tensor& t, const std::string& path) {
  ByteWriter w;
  write_tensor(w, t);
  w.to_file(path);
}

inline Tensor load_tensor(const std::string& path) {
  std::string blob = read_file(path);
  ByteReader r(blob, path);
  return read_tensor(r);
}

inline uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (char c : bytes) {
    h ^= static_cast<uint8_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace eks

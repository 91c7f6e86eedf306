#pragma once

// Little-endian binary helpers and the FNV-1a checksum shared by the codebook
// and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace itit {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  template <class V>
    requires std::is_arithmetic_v<V>
  void put(V v) {
    auto old = buf_.size();
    buf_.resize(old + sizeof(V));
    std::memcpy(buf_.data() + old, &v, sizeof(V));
  }
  void put_bytes(const void* p, std::size_t n) {
    auto old = buf_.size();
    buf_.resize(old + n);
    std::memcpy(buf_.data() + old, p, n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  template <class V>
  void put_span(const std::vector<V>& v) {
    put_bytes(v.data(), v.size() * sizeof(V));
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t n, std::string what) : data_(data), n_(n), what_(std::move(what)) {}

  template <class V>
    requires std::is_arithmetic_v<V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, data_ + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > n_) throw std::runtime_error(what_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                                                std::to_string(pos_) + ", have " + std::to_string(n_ - pos_) + ")");
  }
  const std::uint8_t* data_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace itit

#pragma once

// Little-endian primitives for the GAPE / GAPD / GAPC container formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "gap/common.hpp"

namespace gap::binio {

using Magic = std::array<char, 4>;

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  } else {
    return v;
  }
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void magic(const Magic& m) { os_.write(m.data(), 4); }
  void u32(uint32_t v) { raw(to_little(v)); }
  void u64(uint64_t v) { raw(to_little(v)); }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }

  template <typename Derived>
  void f32_block(const Eigen::DenseBase<Derived>& m) {
    // Row-major traversal regardless of the source storage order.
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f32(static_cast<float>(m(r, c)));
  }

  void json(const nlohmann::json& j) {
    const std::string text = j.dump();
    u32(static_cast<uint32_t>(text.size()));
    os_.write(text.data(), static_cast<std::streamsize>(text.size()));
  }

  void check() const {
    if (!os_) throw Error(ErrorKind::IoError, "write failed");
  }

 private:
  template <typename U>
  void raw(U v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  void expect_magic(const Magic& m) {
    Magic got{};
    read_bytes(got.data(), 4);
    if (got != m)
      throw Error(ErrorKind::FormatError,
                  "bad magic, expected '" + std::string(m.data(), 4) + "'");
  }
  uint32_t u32() { return to_little(raw<uint32_t>()); }
  uint64_t u64() { return to_little(raw<uint64_t>()); }
  float f32() { return std::bit_cast<float>(u32()); }

  template <typename Derived>
  void f32_block(Eigen::DenseBase<Derived>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        m(r, c) = static_cast<typename Derived::Scalar>(f32());
  }

  nlohmann::json json(uint32_t max_len = 1u << 26) {
    const uint32_t len = u32();
    if (len > max_len) throw Error(ErrorKind::FormatError, "manifest length out of range");
    std::string text(len, '\0');
    read_bytes(text.data(), len);
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::FormatError, std::string("bad manifest: ") + e.what());
    }
  }

  bool at_eof() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  void read_bytes(char* dst, size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is_.gcount()) != n) throw Error(ErrorKind::FormatError, "truncated file");
  }
  template <typename U>
  U raw() {
    U v;
    read_bytes(reinterpret_cast<char*>(&v), sizeof(U));
    return v;
  }
  std::istream& is_;
};

// Reads a manifest field, mapping json errors onto FormatError.
template <typename V>
V field(const nlohmann::json& j, std::string_view key) {
  try {
    return j.at(std::string(key)).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::FormatError, "manifest missing or bad field '" + std::string(key) + "'");
  }
}

}  // namespace gap::binio

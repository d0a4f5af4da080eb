#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace pdprune {

namespace detail {
inline const std::array<std::uint32_t, 256>& crc32_table() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}
}  // namespace detail

// CRC-32 (IEEE 802.3, reflected), same polynomial as zlib.
inline std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t crc = 0) {
  const auto* p = static_cast<const unsigned char*>(data);
  crc ^= 0xffffffffu;
  const auto& t = detail::crc32_table();
  for (std::size_t i = 0; i < len; ++i) crc = t[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

}  // namespace pdprune

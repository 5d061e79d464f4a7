#pragma once

#include <cstdint>
#include <cstring>

namespace hcache {

// IEEE binary16 conversion (round-to-nearest-even), used when persisted
// states are configured for 2-byte elements.
inline std::uint16_t float_to_half(float f) {
  std::uint32_t x;
  std::memcpy(&x, &f, 4);
  std::uint32_t sign = (x >> 16) & 0x8000u;
  std::uint32_t exp = (x >> 23) & 0xFFu;
  std::uint32_t man = x & 0x7FFFFFu;
  if (exp == 0xFF) return std::uint16_t(sign | 0x7C00u | (man ? 0x200u : 0));  // inf/nan
  int e = int(exp) - 127 + 15;
  if (e >= 31) return std::uint16_t(sign | 0x7C00u);  // overflow -> inf
  if (e <= 0) {
    if (e < -10) return std::uint16_t(sign);  // underflow -> zero
    man |= 0x800000u;
    int shift = 14 - e;
    std::uint32_t half_man = man >> shift;
    std::uint32_t rem = man & ((1u << shift) - 1);
    std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_man & 1))) ++half_man;
    return std::uint16_t(sign | half_man);
  }
  std::uint32_t half_man = man >> 13;
  std::uint32_t rem = man & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (half_man & 1))) {
    ++half_man;
    if (half_man == 0x400u) {
      half_man = 0;
      ++e;
      if (e >= 31) return std::uint16_t(sign | 0x7C00u);
    }
  }
  return std::uint16_t(sign | (std::uint32_t(e) << 10) | half_man);
}

inline float half_to_float(std::uint16_t h) {
  std::uint32_t sign = (std::uint32_t(h) & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t man = h & 0x3FFu;
  std::uint32_t x;
  if (exp == 0) {
    if (man == 0) {
      x = sign;
    } else {
      // subnormal: renormalize
      int e = -1;
      do {
        ++e;
        man <<= 1;
      } while (!(man & 0x400u));
      man &= 0x3FFu;
      x = sign | std::uint32_t(127 - 15 - e) << 23 | (man << 13);
    }
  } else if (exp == 31) {
    x = sign | 0x7F800000u | (man << 13);
  } else {
    x = sign | ((exp - 15 + 127) << 23) | (man << 13);
  }
  float f;
  std::memcpy(&f, &x, 4);
  return f;
}

}  // namespace hcache

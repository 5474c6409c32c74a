// Little-endian scalar streaming shared by the volume and checkpoint formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

namespace segsurv::detail {

template <typename T>
T byteswap_value(T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

template <typename T>
void write_le(std::ostream& os, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      T s = byteswap_value(v);
      os.write(reinterpret_cast<const char*>(&s), sizeof(T));
    }
  }
}

template <typename T>
void write_le(std::ostream& os, T value) {
  write_le<T>(os, std::span<const T>(&value, 1));
}

/// Reads exactly values.size() scalars; returns false on a short read.
template <typename T>
bool read_le(std::istream& is, std::span<T> values) {
  is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  if (static_cast<size_t>(is.gcount()) != values.size_bytes()) return false;
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : values) v = byteswap_value(v);
  }
  return true;
}

}  // namespace segsurv::detail

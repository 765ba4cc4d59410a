#include "fshpo/checksum.hpp"

#include <zlib.h>

namespace fshpo {

std::uint32_t crc32_update(std::uint32_t crc, std::span<const std::byte> bytes) {
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  constexpr std::size_t kChunk = 1u << 30;
  uLong c = crc;
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const std::size_t n = left < kChunk ? left : kChunk;
    c = ::crc32(c, p, static_cast<uInt>(n));
    p += n;
    left -= n;
  }
  return static_cast<std::uint32_t>(c);
}

std::uint32_t crc32(std::span<const std::byte> bytes) {
  return crc32_update(0, bytes);
}

std::uint32_t crc32(std::string_view bytes) {
  return crc32(std::as_bytes(std::span(bytes.data(), bytes.size())));
}

}  // namespace fshpo

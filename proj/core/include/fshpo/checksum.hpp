#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace fshpo {

// CRC-32 (IEEE), backed by zlib.
std::uint32_t crc32(std::string_view bytes);
std::uint32_t crc32(std::span<const std::byte> bytes);
std::uint32_t crc32_update(std::uint32_t crc, std::span<const std::byte> bytes);

}  // namespace fshpo

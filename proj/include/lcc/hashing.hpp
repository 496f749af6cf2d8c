#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace lcc {

using Hash256 = std::array<uint8_t, 32>;

Hash256 sha256(std::span<const uint8_t> bytes);
Hash256 sha256(const std::string& text);

uint32_t crc32_of(std::span<const uint8_t> bytes);

std::string hex(std::span<const uint8_t> bytes);
std::string hex(const Hash256& h);

} // namespace lcc

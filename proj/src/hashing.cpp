#include "lcc/hashing.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <stdexcept>

namespace lcc {

Hash256 sha256(std::span<const uint8_t> bytes) {
    Hash256 out{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != out.size()) {
        throw std::runtime_error("sha256 digest failed");
    }
    return out;
}

Hash256 sha256(const std::string& text) {
    return sha256(std::span<const uint8_t>(
        reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

uint32_t crc32_of(std::span<const uint8_t> bytes) {
    uLong c = ::crc32(0L, Z_NULL, 0);
    c = ::crc32(c, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<uint32_t>(c);
}

std::string hex(std::span<const uint8_t> bytes) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(bytes.size() * 2);
    for (uint8_t b : bytes) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xF]);
    }
    return s;
}

std::string hex(const Hash256& h) {
    return hex(std::span<const uint8_t>(h.data(), h.size()));
}

} // namespace lcc

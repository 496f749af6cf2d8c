#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "lcc/errors.hpp"

namespace lcc {

static_assert(std::endian::native == std::endian::little,
              "serializers assume a little-endian host");

// Append-only little-endian byte sink.
class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }

    void magic(const char tag[5]) { raw(tag, 4); }

    void bytes(std::span<const uint8_t> b) { raw(b.data(), b.size()); }

    void f64_span(std::span<const double> xs) {
        raw(xs.data(), xs.size() * sizeof(double));
    }
    void f32_span(std::span<const double> xs) {
        for (double x : xs) f32(static_cast<float>(x));
    }

    const std::vector<uint8_t>& data() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

private:
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<uint8_t> buf_;
};

// Cursor over a byte buffer; every read throws TruncatedError on underrun.
class ByteReader {
public:
    explicit ByteReader(std::span<const uint8_t> b) : buf_(b) {}

    uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
    uint16_t u16() { uint16_t v; raw(&v, 2); return v; }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    float f32() { float v; raw(&v, 4); return v; }
    double f64() { double v; raw(&v, 8); return v; }

    std::string magic() {
        char m[4];
        raw(m, 4);
        return std::string(m, 4);
    }

    void bytes(std::span<uint8_t> out) { raw(out.data(), out.size()); }

    void f64_span(std::span<double> out) {
        raw(out.data(), out.size() * sizeof(double));
    }
    void f32_span(std::span<double> out) {
        for (double& x : out) x = static_cast<double>(f32());
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return buf_.size() - pos_; }

private:
    void raw(void* p, size_t n) {
        if (pos_ + n > buf_.size())
            throw TruncatedError("truncated stream: need " + std::to_string(n) +
                                 " bytes at offset " + std::to_string(pos_) +
                                 ", have " + std::to_string(buf_.size() - pos_));
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::span<const uint8_t> buf_;
    size_t pos_ = 0;
};

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes);

} // namespace lcc

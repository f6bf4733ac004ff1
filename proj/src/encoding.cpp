#include "flexkd/encoding.hpp"

#include <bit>
#include <cstring>

#include "flexkd/error.hpp"

namespace flexkd {

namespace {

constexpr char kHexDigits[] = "0123456789abcdef";

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

}  // namespace

std::string hex_encode_doubles(const std::vector<double>& values) {
    std::string out;
    out.reserve(values.size() * 16);
    for (double v : values) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int shift = 60; shift >= 0; shift -= 4) {
            out.push_back(kHexDigits[(bits >> shift) & 0xF]);
        }
    }
    return out;
}

std::vector<double> hex_decode_doubles(const std::string& hex) {
    if (hex.size() % 16 != 0) {
        throw DataError("hex double blob has invalid length " + std::to_string(hex.size()));
    }
    std::vector<double> out(hex.size() / 16);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (std::size_t k = 0; k < 16; ++k) {
            const int v = hex_value(hex[i * 16 + k]);
            if (v < 0) throw DataError("hex double blob contains a non-hex character");
            bits = (bits << 4) | static_cast<std::uint64_t>(v);
        }
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

void Fnv1a::update(const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        state_ ^= bytes[i];
        state_ *= 1099511628211ULL;
    }
}

void Fnv1a::update_u64(std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    update(bytes, 8);
}

void Fnv1a::update_doubles(const std::vector<double>& values) {
    for (double v : values) update_u64(std::bit_cast<std::uint64_t>(v));
}

std::string Fnv1a::hex_digest() const {
    std::string out(16, '0');
    const std::uint64_t v = state_;
    for (int i = 0; i < 16; ++i) out[i] = kHexDigits[(v >> (60 - 4 * i)) & 0xF];
    return out;
}

}  // namespace flexkd

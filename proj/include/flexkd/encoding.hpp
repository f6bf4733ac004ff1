#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace flexkd {

// Lossless double <-> hex encoding used by checkpoint and profile files.
// Each double becomes 16 lowercase hex digits of its IEEE-754 bit pattern.
std::string hex_encode_doubles(const std::vector<double>& values);
std::vector<double> hex_decode_doubles(const std::string& hex);

// Incremental FNV-1a 64-bit checksum.
class Fnv1a {
public:
    void update(const void* data, std::size_t len);
    void update(const std::string& s) { update(s.data(), s.size()); }
    void update_u64(std::uint64_t v);
    void update_doubles(const std::vector<double>& values);
    std::uint64_t digest() const { return state_; }
    std::string hex_digest() const;

private:
    std::uint64_t state_ = 14695981039346656037ULL;
};

}  // namespace flexkd

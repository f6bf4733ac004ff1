#include "flexkd/rng.hpp"

#include <cmath>

namespace flexkd {

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller on two uniforms; u1 bounded away from 0 so log stays finite.
    double u1 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) return 0;
    // Lemire multiply-shift; bias is < 2^-64 * n, irrelevant at our scale.
    const unsigned __int128 wide =
        static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
    return static_cast<std::uint64_t>(wide >> 64);
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the combined word.
    std::uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL);
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace flexkd

#pragma once

// Seeded random streams. Every consumer derives its own stream from the
// master seed plus a list of tags, so adding a consumer never shifts the
// numbers seen by another one.

#include <cstdint>
#include <initializer_list>
#include <cmath>
#include <random>
#include <utility>
#include <string_view>

namespace durit {

using Rng = std::mt19937_64;

// FNV-1a, 64 bit.
constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags = {}) {
    std::seed_seq::result_type words[32];
    std::size_t n = 0;
    words[n++] = static_cast<std::seed_seq::result_type>(seed & 0xffffffffU);
    words[n++] = static_cast<std::seed_seq::result_type>(seed >> 32);
    for (std::uint64_t t : tags) {
        if (n + 2 > 32) {
            break;
        }
        words[n++] = static_cast<std::seed_seq::result_type>(t & 0xffffffffU);
        words[n++] = static_cast<std::seed_seq::result_type>(t >> 32);
    }
    std::seed_seq seq(words, words + n);
    return Rng{seq};
}

// Uniform double in [0, 1) built from 53 random bits; identical on every
// standard library, unlike std::uniform_real_distribution.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [lo, hi] by rejection; portable across libraries.
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) {
        return static_cast<std::int64_t>(rng());
    }
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t x = rng();
    while (x >= limit) {
        x = rng();
    }
    return lo + static_cast<std::int64_t>(x % span);
}

// Standard normal via Box-Muller on uniform01.
inline double normal01(Rng& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) {
        u1 = uniform01(rng);
    }
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <class It>
void shuffle(It first, It last, Rng& rng) {
    const auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
        const auto j = uniform_int(rng, 0, static_cast<std::int64_t>(i));
        std::swap(first[i], first[j]);
    }
}

}  // namespace durit

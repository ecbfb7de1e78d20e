#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace dala {

using Rng = std::mt19937_64;

/// Mixes a base seed with any number of stream identifiers (sample index,
/// epoch, ensemble member...) into an independent 64-bit seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> streams) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    std::uint64_t h = mix(base);
    for (auto s : streams) h = mix(h ^ mix(s + 0x632be59bd9b4e019ULL));
    return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> streams = {}) {
    return Rng(derive_seed(base, streams));
}

/// Uniform double in [0,1) built from the top 53 bits; stable across standard libraries.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace dala

#pragma once

#include <cstdint>
#include <random>

namespace iwgt {

using Rng = std::mt19937_64;

/// Fixed sub-stream identifiers. Each consumer of randomness derives its own
/// engine from (seed, stream) so that adding draws to one stream never shifts
/// another.
enum class Stream : std::uint32_t {
    Topology = 1,
    Shadowing = 2,
    Fading = 3,
    Mask = 4,
    Init = 5,
    Shuffle = 6,
    Split = 7,
    WmmseStarts = 8,
    Eval = 9,
};

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t salt = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(salt),
                      static_cast<std::uint32_t>(salt >> 32)};
    return Rng(seq);
}

/// splitmix64 finalizer; combines a seed with indices into a new seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ a) ^ b);
}

} // namespace iwgt

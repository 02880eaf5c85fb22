#pragma once

#include <cstdint>
#include <random>

namespace bilayer {

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Derives an independent stream for worker/sample `index` from a base seed.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{seed, index, std::uint64_t(0x9e3779b97f4a7c15ULL)};
    return Rng(seq);
}

inline double rand_uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double rand_normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

// Uniform integer in [lo, hi], inclusive.
inline std::int64_t rand_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

}  // namespace bilayer

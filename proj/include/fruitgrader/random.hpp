#pragma once

#include <cstdint>
#include <random>

namespace fruitgrader {

using Rng = std::mt19937_64;

/// Uniform real in [lo, hi]; returns lo exactly when lo == hi.
inline double uniform(Rng& rng, double lo, double hi) {
    const double u = std::generate_canonical<double, 53>(rng);
    return lo + (hi - lo) * u;
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline bool bernoulli(Rng& rng, double p) {
    return std::generate_canonical<double, 53>(rng) < p;
}

/// Mixes a base seed with a stream id so sub-tasks get independent streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace fruitgrader

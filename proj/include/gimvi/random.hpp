#ifndef GIMVI_RANDOM_HPP
#define GIMVI_RANDOM_HPP

#include <cstdint>
#include <random>

namespace gimvi {

/** Engine used everywhere; every stochastic entry point takes one explicitly. */
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) {
    return Rng(seed);
}

/** Derive an independent stream for a named sub-task so that one seed drives a whole run. */
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}

#endif

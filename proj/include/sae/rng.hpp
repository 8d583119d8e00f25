#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace sae {

using Rng = std::mt19937_64;

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}
} // namespace detail

/// Derive an independent stream seed from a master seed and a path of indices,
/// e.g. (seed, replicate, stream). Streams never share state, so adding draws
/// to one stream leaves the others bit-identical.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
    std::uint64_t h = detail::splitmix64(master);
    for (auto p : path) h = detail::splitmix64(h ^ detail::splitmix64(p + 0x632BE59BD9B4E019ULL));
    return h;
}

inline Rng make_rng(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
    return Rng(derive_seed(master, path));
}

/// Named streams used by the simulator.
enum class Stream : std::uint64_t {
    geography = 1,
    covariates,
    marginals,
    frame,
    individual_effects,
    cluster_effects,
    area_effects,
    outcomes,
    sample,
    draws,
};

inline Rng make_rng(std::uint64_t master, Stream s, std::uint64_t index = 0) {
    return make_rng(master, {static_cast<std::uint64_t>(s), index});
}

} // namespace sae

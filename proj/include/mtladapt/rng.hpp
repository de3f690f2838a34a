#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace mtladapt {

// Seeded random helpers. Distributions are implemented by hand so that a
// given seed produces the same stream on every platform/standard library.

inline double uniform_double(std::mt19937_64& rng, double lo, double hi) {
    // 53-bit mantissa uniform in [0, 1)
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
}

inline double gaussian_double(std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0) {
    // Box-Muller; consumes two uniforms per sample
    double u1 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    while (u1 <= 0.0) {
        u1 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    }
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    return mean + stddev * z;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
    // rejection sampling, unbiased
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = rng();
    while (v >= limit) {
        v = rng();
    }
    return static_cast<std::size_t>(v % n);
}

template <typename T>
void shuffle_indices(std::vector<T>& v, std::mt19937_64& rng) {
    // Fisher-Yates, pinned implementation (std::shuffle is not portable across libs)
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = uniform_index(rng, i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace mtladapt

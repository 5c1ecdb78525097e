#pragma once

// Deterministic random streams for reproducible experiments.
//
// Seed derivation is fixed bit-exactly so that results can be reproduced
// from a master seed alone:
//
//   mix64(z): z += 0x9E3779B97F4A7C15
//             z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//             return z ^ (z >> 31)                     (splitmix64 finalizer)
//
//   derive_stream_seed(master, index) = mix64(master + (index+1) * 0x9E3779B97F4A7C15)
//
// The map is injective in `index` for a fixed master (odd multiplier, then a
// bijective finalizer). Streams are std::mt19937_64 seeded with the derived
// value; uniforms take the top 53 bits, normals go through the inverse CDF.

#include "car/special.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace car {

constexpr std::uint64_t kSeedGolden = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z += kSeedGolden;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

constexpr std::uint64_t derive_stream_seed(std::uint64_t master, std::uint64_t index) {
    return mix64(master + (index + 1) * kSeedGolden);
}

class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform on the open interval (0,1), 53-bit resolution.
    double uniform01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal() { return special::normal_quantile(uniform01()); }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t uniform_below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

// Channel indices for the three streams every simulation replication uses.
enum RepChannel : std::uint64_t {
    kChannelCovariates = 0,
    kChannelAllocation = 1,
    kChannelErrors = 2,
};

// Auxiliary streams (criticals, draw banks) live far above any replication
// index so they never collide with per-replication seeds.
constexpr std::uint64_t kAuxIndexBase = 1ull << 40;

} // namespace car

#include "car/rng.hpp"

#include "support/oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <vector>

using car::derive_stream_seed;
using car::RngStream;

TEST_CASE("seed derivation is deterministic and master-sensitive") {
    CHECK(derive_stream_seed(42, 7) == derive_stream_seed(42, 7));
    CHECK(derive_stream_seed(42, 0) != derive_stream_seed(43, 0));
    CHECK(derive_stream_seed(42, 0) != derive_stream_seed(42, 1));
}

TEST_CASE("seed derivation has no collisions over a million indices") {
    std::vector<std::uint64_t> seeds;
    seeds.reserve(1000001);
    for (std::uint64_t i = 0; i <= 1000000; ++i) {
        seeds.push_back(derive_stream_seed(0xDEADBEEF, i));
    }
    std::sort(seeds.begin(), seeds.end());
    CHECK(std::adjacent_find(seeds.begin(), seeds.end()) == seeds.end());
}

TEST_CASE("streams with equal seeds replay bit-identically") {
    RngStream a(123), b(123);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
}

TEST_CASE("uniform01 stays inside the open unit interval") {
    RngStream s(9);
    for (int i = 0; i < 100000; ++i) {
        const double u = s.uniform01();
        CHECK(u > 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("normal draws have the right first two moments") {
    RngStream s(2024);
    std::vector<double> draws(200000);
    for (double& d : draws) d = s.normal();
    CHECK(testsupport::mean(draws) == doctest::Approx(0.0).scale(1.0).epsilon(0.01));
    CHECK(testsupport::sample_variance(draws) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("uniform_below is unbiased over small ranges") {
    RngStream s(5);
    std::vector<int> counts(5, 0);
    const int reps = 100000;
    for (int i = 0; i < reps; ++i) ++counts[s.uniform_below(5)];
    for (int c : counts) {
        CHECK(static_cast<double>(c) / reps == doctest::Approx(0.2).epsilon(0.05));
    }
}

TEST_CASE("shuffle produces each permutation of three items") {
    RngStream s(31);
    std::vector<int> hits(6, 0);
    for (int rep = 0; rep < 6000; ++rep) {
        std::vector<int> v{0, 1, 2};
        s.shuffle(v);
        const int code = v[0] * 2 + (v[1] > v[2] ? 1 : 0);
        ++hits[code];
    }
    for (int h : hits) CHECK(h > 800);
}

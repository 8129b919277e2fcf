#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace fsd {

// All stochastic choices draw from mt19937_64 through the helpers below, which
// are defined in terms of raw engine output only, so sequences are identical
// across standard library implementations.
using Rng = std::mt19937_64;

Rng make_rng(uint64_t seed);
// Independent stream derived from a base seed and a stream id.
Rng make_rng(uint64_t seed, uint64_t stream);

// Uniform integer in [0, n) by rejection sampling.
uint64_t uniform_index(Rng& rng, uint64_t n);
// Uniform double in [0, 1) with 53 random bits.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
bool bernoulli(Rng& rng, double p);
// Standard normal via Box-Muller (one draw consumes two uniforms).
double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);

// Fisher-Yates, swapping from the back.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(uniform_index(rng, i));
        std::swap(v[i - 1], v[j]);
    }
}

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& text);

// FNV-1a 64-bit, used for manifest hashes.
uint64_t fnv1a64(std::string_view bytes, uint64_t basis = 1469598103934665603ULL);
std::string hex64(uint64_t value);

} // namespace fsd

#include "fsdenoise/random.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "fsdenoise/error.hpp"

namespace fsd {

Rng make_rng(uint64_t seed) { return Rng(seed); }

Rng make_rng(uint64_t seed, uint64_t stream) {
    // splitmix64 of the pair gives well-separated engine seeds.
    uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
}

uint64_t uniform_index(Rng& rng, uint64_t n) {
    if (n <= 1) {
        return 0;
    }
    // Largest multiple of n representable; reject draws above it.
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - (std::numeric_limits<uint64_t>::max() % n);
    uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % n;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

double normal(Rng& rng, double mean, double stddev) {
    const double u1 = 1.0 - uniform01(rng); // (0, 1]
    const double u2 = uniform01(rng);
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string serialize_rng(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

Rng deserialize_rng(const std::string& text) {
    std::istringstream is(text);
    Rng rng;
    is >> rng;
    if (!is) {
        throw Error(ErrorCode::CorruptFile, "cannot parse RNG state");
    }
    return rng;
}

uint64_t fnv1a64(std::string_view bytes, uint64_t basis) {
    uint64_t h = basis;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(uint64_t value) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[value & 0xF];
        value >>= 4;
    }
    return s;
}

} // namespace fsd

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ssmt {

inline uint64_t mix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Deterministic random source. The engine state is standardized, and all
// samplers below are implemented here rather than through std distributions,
// so identical seeds produce identical streams on any platform.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    // Independent substream keyed by (seed, stream); order of use does not
    // couple substreams.
    static Rng fork(uint64_t seed, uint64_t stream) {
        return Rng(mix64(seed ^ mix64(stream)));
    }

    uint64_t next_u64() { return eng_(); }

    // Unbiased integer in [0, n) by rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = eng_();
        while (v >= limit) v = eng_();
        return v % n;
    }

    // Inclusive integer range.
    int range(int lo, int hi) {
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo) + 1));
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; u1 kept strictly positive.
    double normal() {
        const double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

  private:
    std::mt19937_64 eng_;
};

}  // namespace ssmt

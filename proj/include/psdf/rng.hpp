#pragma once

#include <cstdint>
#include <cmath>
#include <numeric>
#include <vector>

// Counter-based RNG. Streams are derived from (seed, tag...) by hashing, so a
// draw depends only on its logical position, never on thread scheduling.
// Gaussians use Box-Muller instead of std::normal_distribution to keep the
// byte stream identical across standard libraries.

namespace psdf {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

    /// Derive an independent stream: rng for (seed, a, b, c, ...).
    template <class... Tags>
    static Rng stream(uint64_t seed, Tags... tags) {
        uint64_t h = splitmix64(seed);
        ((h = splitmix64(h ^ static_cast<uint64_t>(tags))), ...);
        return Rng(h);
    }

    uint64_t next_u64() {
        state_ = splitmix64(state_);
        return state_;
    }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    /// Uniform in [0, 1), 53-bit mantissa.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    /// Standard normal via Box-Muller (deterministic, no rejection).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Partial Fisher-Yates: the first `take` entries of a shuffled [0, n).
    std::vector<uint32_t> sample_without_replacement(uint32_t n, uint32_t take) {
        std::vector<uint32_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0u);
        if (take > n) take = n;
        for (uint32_t i = 0; i < take; ++i) {
            const uint32_t j = i + static_cast<uint32_t>(below(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(take);
        return idx;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace psdf

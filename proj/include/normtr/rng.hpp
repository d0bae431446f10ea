#pragma once

#include <cmath>
#include <cstdint>

namespace normtr {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Deterministic PRNG with hand-rolled distributions. The standard library's
/// distribution objects are implementation-defined, so everything that must
/// reproduce byte-identically across runs goes through this class instead.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds
        (void)next_u64();
        (void)next_u64();
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform double in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Standard normal via Box-Muller; keeps the spare value.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Derives an independent stream from a base seed and up to three tags.
/// Used to give every (sample, split, purpose) its own reproducible stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag0, std::uint64_t tag1 = 0,
                                 std::uint64_t tag2 = 0) {
    std::uint64_t s = base;
    (void)splitmix64(s);
    s ^= 0xa0761d6478bd642fULL ^ tag0;
    (void)splitmix64(s);
    s ^= 0xe7037ed1a0b428dbULL ^ tag1;
    (void)splitmix64(s);
    s ^= 0x8ebc6af09c88c6e3ULL ^ tag2;
    return splitmix64(s);
}

}  // namespace normtr

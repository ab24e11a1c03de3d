#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>

#include "sstlm/errors.hpp"

namespace sstlm {

// Splittable deterministic generator: xoshiro256** state seeded through
// splitmix64. split(k) derives an independent child stream from the original
// seed only, so the draw history of the parent never affects children and the
// same logical stream tree is reproduced for any thread layout.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(seed) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        return finalize(z);
    }

    Rng split(uint64_t stream) const { return Rng(mix(seed_, stream)); }

    uint64_t seed() const { return seed_; }
    static constexpr std::string_view algorithm() { return "xoshiro256**"; }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [lo, hi], inclusive. Lemire rejection, bias-free.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (lo > hi) throw ValueError("uniform_int: empty range");
        const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        if (range == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
        __uint128_t m = static_cast<__uint128_t>(next_u64()) * range;
        uint64_t l = static_cast<uint64_t>(m);
        if (l < range) {
            const uint64_t t = (0 - range) % range;  // 2^64 mod range
            while (l < t) {
                m = static_cast<__uint128_t>(next_u64()) * range;
                l = static_cast<uint64_t>(m);
            }
        }
        return lo + static_cast<int64_t>(static_cast<uint64_t>(m >> 64));
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // Index into [0, n).
    size_t index(size_t n) {
        if (n == 0) throw ValueError("index: empty range");
        return static_cast<size_t>(uniform_int(0, static_cast<int64_t>(n) - 1));
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t finalize(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static uint64_t splitmix64(uint64_t& state) {
        state += 0x9e3779b97f4a7c15ULL;
        return finalize(state);
    }

    uint64_t seed_;
    uint64_t state_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace sstlm

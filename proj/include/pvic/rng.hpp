#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace pvic {

// xoshiro256** seeded through splitmix64. The algorithm is pinned here so
// that identical seeds give identical streams on any platform:
//   splitmix64:  z = s += 0x9E3779B97F4A7C15
//                z = (z ^ z>>30) * 0xBF58476D1CE4E5B9
//                z = (z ^ z>>27) * 0x94D049BB133111EB
//                return z ^ z>>31
//   xoshiro256**: result = rotl(s1 * 5, 7) * 9, state update per Blackman/Vigna.
// uniform01 uses the top 53 bits; normal() is Box-Muller with a cached spare.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
        spare_valid_ = false;
    }

    // Independent per-stream generator: mixes (seed, stream) through splitmix64.
    static Rng derive(uint64_t seed, uint64_t stream) {
        uint64_t x = seed;
        uint64_t a = splitmix64(x);
        x = stream ^ 0x6A09E667F3BCC909ULL;
        uint64_t b = splitmix64(x);
        return Rng(a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2)));
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform01(); }

    // [lo, hi] inclusive
    int randint(int lo, int hi) {
        uint64_t n = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % n);
    }

    double normal() {
        if (spare_valid_) {
            spare_valid_ = false;
            return spare_;
        }
        // Box-Muller; u clamped away from 0 so log stays finite
        double u = uniform01();
        if (u < 1e-300) u = 1e-300;
        double v = uniform01();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        spare_valid_ = true;
        return r * std::cos(a);
    }

    // normal(0, std) resampled until |z| <= 2*std
    double trunc_normal(double stddev) {
        for (;;) {
            double z = normal();
            if (z >= -2.0 && z <= 2.0) return z * stddev;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // full state for bit-exact checkpoint resume
    std::array<uint64_t, 5> save_state() const {
        return {s_[0], s_[1], s_[2], s_[3], spare_valid_ ? bits(spare_) : 0};
    }
    void restore_state(const std::array<uint64_t, 5>& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st[static_cast<size_t>(i)];
        spare_valid_ = st[4] != 0;
        spare_ = spare_valid_ ? from_bits(st[4]) : 0.0;
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    static uint64_t bits(double d) {
        uint64_t u;
        __builtin_memcpy(&u, &d, 8);
        return u;
    }
    static double from_bits(uint64_t u) {
        double d;
        __builtin_memcpy(&d, &u, 8);
        return d;
    }

    uint64_t s_[4];
    double spare_ = 0.0;
    bool spare_valid_ = false;
};

}  // namespace pvic

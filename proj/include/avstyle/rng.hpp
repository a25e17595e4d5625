#pragma once

#include <cmath>
#include <cstdint>

namespace avstyle {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic key mixing for derived streams (seed, lane, index, ...).
inline uint64_t mix_keys(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
    uint64_t s = a;
    uint64_t h = splitmix64(s);
    s ^= b * 0x9e3779b97f4a7c15ull;
    h ^= splitmix64(s);
    s ^= c * 0xc2b2ae3d27d4eb4full;
    h ^= splitmix64(s);
    s ^= d * 0x165667b19e3779f9ull;
    h ^= splitmix64(s);
    return h;
}

// xoshiro256++ seeded via splitmix64. Self-contained so that streams are
// bit-stable across platforms and standard library versions.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl_(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n), n > 0. Rejection-free modulo is fine at our scales.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    float gaussf(float stddev = 1.0f) { return static_cast<float>(gauss()) * stddev; }

    // Child stream derived from this stream's seed material plus keys.
    Rng split(uint64_t k1, uint64_t k2 = 0, uint64_t k3 = 0) const {
        return Rng(mix_keys(state_[0] ^ state_[2], k1, k2, k3));
    }

private:
    static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4]{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over bytes; pinned hash for text tokens and content digests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace avstyle

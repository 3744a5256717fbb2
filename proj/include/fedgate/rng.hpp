#pragma once

#include <cstdint>
#include <string_view>

namespace fedgate {

// FNV-1a 64-bit hash. Used for stream tags and for layout digests.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace detail {
// SplitMix64 output function (Steele/Lea/Flood). Pure 64-bit integer
// arithmetic, so sequences are identical on every platform.
inline uint64_t splitmix64_mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
} // namespace detail

// Deterministic seedable generator based on SplitMix64:
//   state += 0x9e3779b97f4a7c15; output = splitmix64_mix(state)
//
// fork(tag) derives an independent child stream from the current state and a
// tag without advancing the parent; forking twice with the same tag from the
// same state yields the same stream, so named streams are reproducible
// regardless of the order they are created in.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return detail::splitmix64_mix(state_);
    }

    // Uniform in [0,1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [0,1) with 24 random bits.
    float next_float() {
        return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0,n). Modulo bias is negligible for n << 2^64 and
    // does not affect determinism.
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    Rng fork(uint64_t tag) const {
        return Rng(detail::splitmix64_mix(state_ ^ (0x9e3779b97f4a7c15ull * (tag + 1))));
    }

    Rng fork(std::string_view tag) const { return fork(fnv1a64(tag)); }

    uint64_t state() const { return state_; }

private:
    uint64_t state_;
};

} // namespace fedgate

#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace t2i {

// Deterministic RNG (splitmix64 core). Not std::mt19937 so that streams are
// reproducible independent of the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1), 24 bits of mantissa
    float uniform() {
        return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
    }

    // uniform in [lo, hi)
    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // standard normal via Box-Muller
    float normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        float u1 = uniform();
        float u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        float r = std::sqrt(-2.0f * std::log(u1));
        float a = 6.28318530717958648f * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

private:
    uint64_t state_;
    float spare_ = 0.0f;
    bool has_spare_ = false;
};

// FNV-1a 64-bit; used for prompt digests, config digests and stream derivation.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

// Derives an independent RNG stream from a master seed and a label.
inline Rng derive_rng(uint64_t seed, std::string_view stream) {
    uint64_t h = fnv1a64(&seed, sizeof(seed));
    h = fnv1a64(stream, h);
    return Rng(h);
}

}  // namespace t2i

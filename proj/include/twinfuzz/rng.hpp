#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>

namespace twinfuzz {

// Deterministic PRNG stack. std::mt19937_64 is portable but the standard
// distributions are not; campaign artifacts must be byte-identical across
// platforms, so both the generators and the draw helpers live here.

constexpr uint64_t splitmix64_step(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Derives an independent stream seed from (root, lane).
constexpr uint64_t derive_seed(uint64_t root, uint64_t lane) {
    uint64_t s = root ^ (0xA0761D6478BD642FULL * (lane + 1));
    splitmix64_step(s);
    return splitmix64_step(s);
}

class Xoshiro256pp {
public:
    explicit Xoshiro256pp(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64_step(sm);
    }

    uint64_t next() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Unbiased integer in [0, bound) via rejection (Lemire-style threshold).
    uint64_t below(uint64_t bound) {
        if (bound <= 1) return 0;
        const uint64_t threshold = -bound % bound;
        for (;;) {
            const uint64_t r = next();
            if (r >= threshold) return r % bound;
        }
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    bool chance(double p) { return uniform() < p; }

    // Index draw proportional to non-negative weights; caller guarantees a
    // positive total.
    size_t weighted(std::span<const double> weights) {
        double total = 0;
        for (double w : weights) total += w;
        double x = uniform() * total;
        for (size_t i = 0; i + 1 < weights.size(); ++i) {
            x -= weights[i];
            if (x < 0) return i;
        }
        return weights.empty() ? 0 : weights.size() - 1;
    }

    std::array<uint64_t, 4> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::array<uint64_t, 4>& s) {
        for (int i = 0; i < 4; ++i) s_[i] = s[i];
    }

private:
    static constexpr uint64_t rotl(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    uint64_t s_[4]{};
};

// FNV-1a over bytes; used for stable content hashes in dumps and checkpoints.
class Fnv1a {
public:
    void update(const void* data, size_t n) {
        auto p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001B3ULL;
        }
    }
    void update_u64(uint64_t v) { update(&v, sizeof v); }
    void update_str(std::string_view s) { update(s.data(), s.size()); }
    uint64_t value() const { return h_; }

private:
    uint64_t h_ = 0xCBF29CE484222325ULL;
};

}  // namespace twinfuzz

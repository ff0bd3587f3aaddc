#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <string_view>

namespace ismrnn {

// Counter-based pseudo-random stream.
//
// Every draw is a pure function of (seed, stream name, counter), so any stream
// can be replayed independently of the others and independently of platform
// libraries. std::* distributions are implementation-defined and are not used
// anywhere; uniform and normal variates are produced here from raw bits.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::string_view stream)
        : key_(derive_key(seed, stream)) {}

    // splitmix64 finalizer applied to key ^ counter.
    std::uint64_t next_u64() {
        std::uint64_t z = key_ ^ (counter_++ * 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_uniform();
    }

    // Standard normal via Box-Muller; the spare value is cached.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so the log is finite.
        double u1 = 1.0 - next_uniform();
        double u2 = next_uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t counter() const { return counter_; }

private:
    static std::uint64_t derive_key(std::uint64_t seed, std::string_view stream) {
        // FNV-1a over the stream name, then mixed with the seed.
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (char c : stream) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (h | 1ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over raw bytes; used to fingerprint datasets in reports.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

} // namespace ismrnn

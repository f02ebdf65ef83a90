#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace bandfuse {

/// SplitMix64 finalizer. Used to expand seeds and derive independent streams.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Derive a sub-seed for a named purpose and index from a master seed.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t purpose,
                                    std::uint64_t index = 0) noexcept {
    return splitmix64(splitmix64(master ^ splitmix64(purpose)) + index);
}

/// xorshift64* generator. Every stochastic step in the toolkit (splits,
/// initialization, shuffling, synthetic scenes) draws from this so results
/// are identical across standard libraries.
class Xorshift64Star {
public:
    explicit Xorshift64Star(std::uint64_t seed) noexcept : state_(splitmix64(seed)) {
        if (state_ == 0) state_ = 0x9E3779B97F4A7C15ULL;
    }

    std::uint64_t next() noexcept {
        state_ ^= state_ >> 12;
        state_ ^= state_ << 25;
        state_ ^= state_ >> 27;
        return state_ * 0x2545F4914F6CDD1DULL;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, bound) by rejection; bound must be > 0.
    std::uint64_t below(std::uint64_t bound) noexcept {
        const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % bound;
        std::uint64_t r;
        do {
            r = next();
        } while (r >= limit);
        return r % bound;
    }

    /// Standard normal via Box-Muller; the second variate is discarded so the
    /// stream position depends only on the number of calls.
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t state_;
};

}  // namespace bandfuse

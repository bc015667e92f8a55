#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ntpp {

/// Counter-based generator: output i of a stream is mix(key, i), so any
/// stream can be split into independent children without shared state.
/// All distributions are computed here (not via <random>) so that draws are
/// bit-identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix(mix(seed) ^ (stream * 0xD1B54A32D192ED03ULL + 0x8BB84B93962EACC9ULL))) {}

    std::uint64_t next_u64() { return mix(key_ + (counter_++) * kGamma); }

    /// Uniform on the open interval (0, 1).
    double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double exponential(double rate) { return -std::log(uniform()) / rate; }

    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Index in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Lemire's multiply-shift; the bias for n << 2^64 is negligible and
        // we keep the draw count fixed at one for reproducibility.
        __extension__ using u128 = unsigned __int128;
        return static_cast<std::uint64_t>((static_cast<u128>(next_u64()) * n) >> 64);
    }

    /// Child stream, independent of this one and of siblings with other ids.
    [[nodiscard]] Rng split(std::uint64_t stream_id) const {
        Rng child(0);
        child.key_ = mix(key_ ^ mix(stream_id + 0x632BE59BD9B4E019ULL));
        return child;
    }

    std::uint64_t counter() const { return counter_; }

private:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_{0};
    std::uint64_t counter_{0};
};

} // namespace ntpp

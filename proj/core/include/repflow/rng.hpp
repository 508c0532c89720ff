#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace repflow {

/// Counter-based generator. Output i of a stream with key K is
///   mix(K + (i + 1) * 0x9E3779B97F4A7C15)
/// where mix is the SplitMix64 finalizer. A stream is fully described by
/// (key, counter), so any stage can be replayed from its position without
/// running earlier stages. Named substreams derive their key as
///   mix(parent_key ^ fnv1a64(name)).
/// The bit-level algorithm is part of the reproducibility contract; do not
/// replace it with std:: distributions, whose outputs are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : key_(mix(seed)) {}

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001B3ULL;
        }
        return h;
    }

    /// Independent stream named `name`, rooted at this stream's key (not its position).
    Rng substream(std::string_view name) const noexcept {
        Rng r;
        r.key_ = mix(key_ ^ fnv1a64(name));
        r.counter_ = 0;
        return r;
    }

    /// Independent stream indexed by an integer (e.g. epoch or sentence id).
    Rng substream(std::uint64_t index) const noexcept {
        Rng r;
        r.key_ = mix(key_ ^ mix(index + 0x632BE59BD9B4E019ULL));
        r.counter_ = 0;
        return r;
    }

    std::uint64_t next_u64() noexcept { return mix(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n); n must be > 0 (Lemire's multiply-and-reject).
    std::uint64_t uniform_int(std::uint64_t n) noexcept {
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                m = static_cast<unsigned __int128>(next_u64()) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    /// Standard normal via Box-Muller; consumes two draws per call.
    double normal() noexcept {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    template <class It>
    void shuffle(It first, It last) noexcept {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = uniform_int(i);
            using std::swap;
            swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace repflow

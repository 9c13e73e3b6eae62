#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace mft {

// Counter-based generator: output i of a stream is a pure function of
// (seed, i), so streams replay identically across runs and can be forked
// into independent substreams without shared state. The mixer is the
// splitmix64 finalizer.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + counter_ * 0x9e3779b97f4a7c15ULL + 0x9e3779b97f4a7c15ULL;
        ++counter_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1) with 53 random mantissa bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [0, n)
    std::uint64_t next_below(std::uint64_t n) {
        // Multiply-shift range reduction; bias is < 2^-64 per draw, irrelevant
        // here, and the mapping is platform-stable.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller; one fresh pair of draws per sample keeps the stream position
    // independent of call history.
    double normal(double mean, double stddev) {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Derives an independent stream keyed by up to three indices.
    Rng fork(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        std::uint64_t z = seed_;
        for (std::uint64_t k : {a, b, c}) {
            z ^= k + 0x9e3779b97f4a7c15ULL + (z << 6) + (z >> 2);
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            z ^= z >> 31;
        }
        return Rng(z);
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

// Fisher-Yates; the draw count depends only on v.size(), keeping stream
// positions reproducible.
template <typename T>
void fisher_yates(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(v[i - 1], v[j]);
    }
}

// Stream ids used to fork the master seed; fixed so that runs replay.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kDropout = 3;
inline constexpr std::uint64_t kSplit = 4;
inline constexpr std::uint64_t kSynthLabels = 5;
inline constexpr std::uint64_t kSynthHsi = 6;
inline constexpr std::uint64_t kSynthAux = 7;
} // namespace streams

} // namespace mft

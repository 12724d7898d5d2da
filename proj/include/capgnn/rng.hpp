#pragma once

#include <cstdint>
#include <random>

namespace capgnn {

/// splitmix64 finalizer; used to derive independent substream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic random stream identified by (seed, stream_id).
///
/// Identical (seed, stream_id, call sequence) always yields identical draws; the
/// engine is mt19937_64, whose output sequence is fixed by the standard, and
/// doubles are built from the top 53 bits so results do not depend on the
/// standard library's distribution implementations.
class SeededRng {
public:
    SeededRng(std::uint64_t seed, std::uint64_t stream_id)
        : seed_(seed), stream_id_(stream_id), engine_(mix64(seed ^ mix64(stream_id))) {}

    /// Substream for (epoch, view) style coordinates.
    static SeededRng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        return SeededRng(seed, mix64(a * 0x100000001b3ULL + mix64(b)));
    }

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_id_; }

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }
    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::mt19937_64 engine_;
};

}  // namespace capgnn

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace pacfl {

/// 64-bit FNV-1a over a byte string. Used for stable seed derivation and
/// for content hashes in run manifests.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Stable seed derivation: hash(global_seed, stage, client_id). Adding a new
/// stage or client never shifts the stream of an existing one.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stage,
                                 std::string_view key = {}) {
    std::uint64_t h = splitmix64(base ^ fnv1a64(stage));
    if (!key.empty()) h = splitmix64(h ^ fnv1a64(key));
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stage,
                                 std::uint64_t index) {
    return splitmix64(splitmix64(base ^ fnv1a64(stage)) ^ index);
}

/// Deterministic random generator with value semantics: cloneable, seedable,
/// safe to move between threads. The engine (mt19937_64) is fully specified
/// by the standard; all distributions are hand-rolled on top so that output
/// streams are identical across platforms and library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on the open interval (0, 1); never returns 0 or 1.
    double uniform_open01() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Uniform on the open interval (-1/2, 1/2).
    double uniform_symmetric_half() { return uniform_open01() - 0.5; }

    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Unbiased integer in [0, bound).
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    /// Standard normal via Box-Muller (one value per call, no cached state).
    double normal() {
        const double u1 = uniform_open01();
        const double u2 = uniform_open01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Fisher-Yates shuffle, deterministic given the stream state.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace pacfl

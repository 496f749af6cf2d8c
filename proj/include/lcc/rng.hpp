#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace lcc {

namespace detail {
// splitmix64 finalizer
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
} // namespace detail

// Counter-based generator: the draw at (seed, counter) is a pure function of
// both, so identical states replay identical sequences. Kernels never own one
// of these; callers pass them in.
struct RngState {
    uint64_t seed = 0;
    uint64_t counter = 0;

    explicit RngState(uint64_t s = 0, uint64_t c = 0) : seed(s), counter(c) {}

    uint64_t next_u64() {
        ++counter;
        return detail::mix64(seed + counter * 0x9E3779B97F4A7C15ULL);
    }

    // [0, 1)
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // standard normal, Box-Muller; consumes two draws
    double next_normal() {
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; // (0, 1]
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    // [0, n)
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // independent child stream; advancing the child never touches the parent
    RngState derive(uint64_t tag) const {
        return RngState(detail::mix64(seed ^ detail::mix64(tag ^ 0xA0761D6478BD642FULL)), 0);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }
};

} // namespace lcc

#pragma once

#include <cmath>
#include <cstdint>

namespace pointdg {

// Counter-based generator: output i is a hash of (key, i), so streams can be
// forked without sharing state and a run is reproducible from its seed alone.
class Rng {
public:
    Rng() = default;
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc908ull)) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Derive an independent stream; forking does not advance this stream.
    Rng fork(std::uint64_t tag) const {
        Rng r;
        r.key_ = mix(key_ ^ mix(tag + 0x517cc1b727220a95ull));
        return r;
    }
    Rng fork(std::uint64_t a, std::uint64_t b) const { return fork(mix(a) ^ b); }
    Rng fork(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
        return fork(mix(mix(a) ^ b) ^ c);
    }

    // Uniform in [0, 1): 53 mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; safe to pass through log().
    double uniform_pos() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes two draws per call.
    double gauss() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double gumbel() { return -std::log(-std::log(uniform_pos())); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    template <typename T>
    void shuffle(T* v, std::size_t n) {
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            T tmp = v[i - 1];
            v[i - 1] = v[j];
            v[j] = tmp;
        }
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace pointdg

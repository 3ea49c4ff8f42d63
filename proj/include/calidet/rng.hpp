#ifndef CALIDET_RNG_HPP
#define CALIDET_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace calidet {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Mix a base seed with a stream name and index into a child seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stream,
                                 std::uint64_t index = 0) {
    std::uint64_t s = base ^ fnv1a64(stream);
    std::uint64_t first = splitmix64(s);
    s ^= index * 0x9e3779b97f4a7c15ULL;
    return first ^ splitmix64(s);
}

/// Deterministic random source. The engine (std::mt19937_64) is fully
/// specified by the standard, and all distributions below are implemented
/// here rather than via std:: distribution objects, so sequences are
/// identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed), base_(seed) {}

    std::uint64_t u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform in (0, 1]; safe as a log() argument.
    double uniform01_open() {
        return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_int(std::uint64_t n) { return engine_() % n; }

    /// Standard normal via Box-Muller (one value per pair of uniforms,
    /// nothing cached, so replay is position-independent).
    double normal() {
        double u1 = uniform01_open();
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Poisson sample by inversion of the exponential waiting times
    /// (Knuth). Fine for the small rates used here.
    int poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        const double limit = std::exp(-lambda);
        double p = 1.0;
        int n = 0;
        do {
            p *= uniform01_open();
            ++n;
        } while (p > limit);
        return n - 1;
    }

    /// Fisher-Yates shuffle with explicit draws (std::shuffle is not
    /// specified bit-for-bit across implementations).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Child generator for a named sub-stream, derived from this
    /// generator's seed. Draws from one stream do not perturb any other.
    Rng child(std::string_view stream, std::uint64_t index = 0) const {
        return Rng(derive_seed(base_, stream, index));
    }

    std::uint64_t seed() const { return base_; }

private:
    std::mt19937_64 engine_;
    std::uint64_t base_;
};

} // namespace calidet

#endif // CALIDET_RNG_HPP

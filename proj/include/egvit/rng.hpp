#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace egvit {

// Counter-free splittable PRNG (splitmix64 core). Every random decision
// in the project flows through this so results do not depend on the
// platform's std::distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one value per call, the twin is discarded to keep
    // substream consumption independent of call patterns.
    double normal() {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // resample until within [-2s, 2s]
    double truncated_normal(double stddev) {
        for (;;) {
            const double x = normal() * stddev;
            if (std::abs(x) <= 2.0 * stddev) return x;
        }
    }

    // Fisher-Yates
    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

// Derive an independent substream key from a master seed, a domain label
// and an index. Parallel per-record generation seeded this way matches
// serial generation byte for byte.
inline std::uint64_t substream(std::uint64_t seed, std::string_view domain, std::uint64_t index = 0) {
    std::uint64_t h = 0xCBF29CE484222325ull ^ seed;
    for (char c : domain) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    h ^= index + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    // one splitmix round to decorrelate adjacent indices
    h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ull;
    h = (h ^ (h >> 27)) * 0x94D049BB133111EBull;
    return h ^ (h >> 31);
}

}  // namespace egvit

#pragma once

#include <cstdint>
#include <random>

namespace cpqlab::numerics {

/// The single generator used everywhere: 64-bit Mersenne Twister. Runs are
/// reproducible given (seed, config) with the same standard library; the
/// normal/uniform distributions are libstdc++'s, so cross-toolchain streams
/// may differ.
class Rng {
public:
    using engine_type = std::mt19937_64;

    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    double normal(double mean, double stddev) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    /// Draw an index from a discrete distribution given by `probs` (need not be normalized).
    template <class Range>
    std::size_t categorical(const Range& probs) {
        double total = 0.0;
        for (double p : probs) total += p;
        double u = uniform() * total;
        std::size_t i = 0, last = 0;
        for (double p : probs) {
            if (p > 0.0) last = i;
            if (u < p) return i;
            u -= p;
            ++i;
        }
        return last;
    }

    /// Independent child stream, derived deterministically from this one.
    Rng split() { return Rng(engine_()); }

    engine_type& engine() { return engine_; }

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    engine_type engine_;
};

}  // namespace cpqlab::numerics

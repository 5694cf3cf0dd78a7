#pragma once

#include <cmath>
#include <cstdint>

#include "capsroute/errors.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

/// Deterministic seeded generator: xoshiro256++ with splitmix64 seeding.
/// The integer stream is pure 64-bit integer arithmetic, so a given seed
/// yields the same sequence on every platform. Single-owner: parallel code
/// must derive child generators with split(), never share one instance.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
        // xoshiro must not start from the all-zero state.
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 0x9e3779b97f4a7c15ULL;
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Standard normal via the polar (Marsaglia) method; pairs are cached so
    /// draw order is well defined.
    double normal(double mean, double stddev) {
        if (stddev < 0.0) throw ContractError("normal: stddev must be >= 0");
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double r = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * r;
        has_spare_ = true;
        return mean + stddev * u * r;
    }

    /// Child generator for an independent stream. Deterministic in (seed, stream).
    SeededRng split(std::uint64_t stream) const {
        std::uint64_t x = seed_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
        return SeededRng(splitmix64(x));
    }

    /// Fisher-Yates index shuffle.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_u64() % i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t state_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline Tensor random_normal(SeededRng& rng, Shape shape, double mean, double stddev) {
    Tensor t = Tensor::uninitialized(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(mean, stddev);
    return t;
}

inline Tensor random_uniform(SeededRng& rng, Shape shape, double lo, double hi) {
    Tensor t = Tensor::uninitialized(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

} // namespace capsroute

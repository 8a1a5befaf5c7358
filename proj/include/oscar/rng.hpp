#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>

namespace oscar {

/// Counter-based 64-bit generator. Output i is a bijective mix of (key, i), so
/// a stream can be forked or replayed without hidden state beyond the counter.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
        : key_(mix(seed ^ mix(stream + 0x632BE59BD9B4E019ULL))) {}

    std::uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::size_t below(std::size_t n) {
        // Lemire's multiply-shift; bias is < 2^-64 * n, irrelevant here.
        return static_cast<std::size_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Independent child stream; does not advance this generator.
    Rng fork(std::uint64_t stream) const {
        Rng child;
        child.key_ = mix(key_ ^ mix(stream + 0xD1B54A32D192ED03ULL));
        return child;
    }

    std::uint64_t counter() const { return counter_; }

   private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace oscar

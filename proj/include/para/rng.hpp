#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace para {

// Deterministic random stream. All randomness in the library goes through
// this wrapper so that a fixed seed reproduces a run bit-for-bit on one
// platform. Distributions are hand-rolled to avoid depending on the
// standard library's unspecified distribution algorithms.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, no cached spare
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(gen_() % span);
    }

    // Independent per-item stream derived from a master seed, so that
    // parallel schedules over items stay reproducible regardless of
    // execution order.
    static Rng derive(uint64_t master, std::string_view tag) {
        uint64_t h = 1469598103934665603ull ^ master;
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return Rng(h);
    }

    static Rng derive(uint64_t master, uint64_t index) {
        uint64_t h = 1469598103934665603ull ^ master;
        for (int i = 0; i < 8; ++i) {
            h ^= (index >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
        return Rng(h);
    }

  private:
    std::mt19937_64 gen_;
};

}  // namespace para

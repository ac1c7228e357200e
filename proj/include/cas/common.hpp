#pragma once

#include <cstdint>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cas {

// Error taxonomy. CLI maps data_error -> exit 2, numeric_error -> exit 3.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct shape_error : error { using error::error; };
struct index_error : error { using error::error; };
struct arg_error : error { using error::error; };
struct contract_error : error { using error::error; };
struct numeric_error : error { using error::error; };
struct data_error : error { using error::error; };

inline void warn(const std::string& msg) {
    std::cerr << "[warn] " << msg << "\n";
}

// Deterministic RNG. Distribution transforms are implemented here so the
// stream is pinned to this code, not to the standard library's
// implementation-defined distribution objects.
class rng {
public:
    explicit rng(uint64_t seed = 0) : eng_(seed) {}

    void seed(uint64_t s) {
        eng_.seed(s);
        has_spare_ = false;
    }

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() {
        return (next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw arg_error("rng::uniform_int: empty range");
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // Rejection sampling to avoid modulo bias.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return lo + static_cast<int64_t>(r % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 1.0 - uniform();
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Reserved vocabulary ids, fixed across checkpoints.
constexpr int PAD_ID = 0;
constexpr int BOS_ID = 1;
constexpr int EOS_ID = 2;
constexpr int NUM_RESERVED_IDS = 3;

}  // namespace cas

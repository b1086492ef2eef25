#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tnx {

// Contract violations surface as typed exceptions so the CLI can map them
// to distinct exit codes (shape/config/domain -> 2, I/O -> 3).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline int thread_count() {
    static const int n = [] {
        if (const char* env = std::getenv("TNX_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }();
    return n;
}

// Splits [0, n) into contiguous per-worker ranges. Every index is owned by
// exactly one worker, so per-element reduction order never depends on the
// worker count.
template <typename F>
void parallel_for(std::size_t n, F&& body, std::size_t grain = 1) {
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(thread_count()),
                              grain == 0 ? n : n / std::max<std::size_t>(grain, 1) + 1);
    if (workers <= 1 || n <= grain) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

// Global multiply counter used by the complexity tests. Ops report their
// multiply counts in bulk, so the instrumentation costs one atomic add per
// kernel invocation and the totals stay exact.
inline std::atomic<std::uint64_t>& mul_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}
inline void count_muls(std::uint64_t n) {
    mul_counter().fetch_add(n, std::memory_order_relaxed);
}
inline std::uint64_t mul_count() { return mul_counter().load(std::memory_order_relaxed); }
inline void reset_mul_count() { mul_counter().store(0, std::memory_order_relaxed); }

// Deterministic RNG: splitmix-seeded xoshiro-style generator plus explicit
// Box-Muller, so streams do not depend on libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        // splitmix64 expansion of the seed
        std::uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            s = z ^ (z >> 31);
        }
    }

    std::uint64_t next_u64() {
        // xoshiro256**
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // normal(0, std) truncated to +/- 2 std by rejection
    double truncated_normal(double stddev) {
        for (;;) {
            const double z = normal();
            if (z >= -2.0 && z <= 2.0) return z * stddev;
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }
    std::uint64_t state_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace tnx

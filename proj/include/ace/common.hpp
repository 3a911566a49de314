#pragma once

// Shared error types, deterministic random source, and small utilities.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ace {

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UnknownElement : std::runtime_error {
    explicit UnknownElement(const std::string& name)
        : std::runtime_error("unknown element: " + name) {}
};

struct GenerationInfeasible : std::runtime_error {
    explicit GenerationInfeasible(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic random source. All sampling goes through the helpers below
// rather than std:: distributions, whose outputs vary across standard library
// implementations for a fixed engine seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1). 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Rejection-sampled, bias free.
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw DomainError("uniform_index: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return static_cast<std::size_t>(x % span);
    }

    // Uniform integer in [lo, hi] inclusive.
    long uniform_int(long lo, long hi) {
        if (hi < lo) throw DomainError("uniform_int: empty range");
        return lo + static_cast<long>(uniform_index(static_cast<std::size_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller. One cached value per pair.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

    // k distinct indices drawn uniformly from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw DomainError("sample_without_replacement: k > n");
        // Floyd's algorithm keeps this O(k) in memory for large n.
        std::vector<std::size_t> picked;
        picked.reserve(k);
        for (std::size_t j = n - k; j < n; ++j) {
            std::size_t t = uniform_index(j + 1);
            bool seen = false;
            for (std::size_t p : picked) {
                if (p == t) {
                    seen = true;
                    break;
                }
            }
            picked.push_back(seen ? j : t);
        }
        return picked;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ace

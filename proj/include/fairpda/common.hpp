#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairpda {

// Error taxonomy maps onto CLI exit codes: validation 1, io 2, numeric 3.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG. All distribution transforms are implemented here so
// streams are reproducible across standard libraries, not just across runs
// of the same build.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        // splitmix64 expansion of the seed into xoshiro256** state
        uint64_t x = seed;
        for (auto& si : s_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            si = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        // rejection to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    // Box-Muller without spare caching: the four state words capture the
    // full generator state, which keeps checkpoint resume exact.
    double normal(double mean = 0.0, double sd = 1.0) {
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + sd * r * std::cos(2.0 * M_PI * u2);
    }

    // Marsaglia-Tsang, with the alpha<1 boost gamma(a) = gamma(a+1) * U^(1/a)
    double gamma(double alpha) {
        if (alpha < 1.0) {
            const double u = std::max(uniform(), 1e-300);
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double beta(double a, double b) {
        const double x = gamma(a);
        const double y = gamma(b);
        return x / (x + y);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Stable derived stream for per-entity seeding (patient ids etc.)
    static uint64_t derive(uint64_t seed, const std::string& tag) {
        uint64_t h = 1469598103934665603ULL ^ seed;
        for (char c : tag) {
            h ^= static_cast<uint8_t>(c);
            h *= 1099511628211ULL;
        }
        return h;
    }

    std::vector<uint64_t> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::vector<uint64_t>& st) {
        if (st.size() != 4) throw ValidationError("rng state must have 4 words");
        for (int i = 0; i < 4; ++i) s_[i] = st[static_cast<size_t>(i)];
    }

private:
    uint64_t s_[4] = {};
};

inline double db_to_amp(double db) { return std::pow(10.0, db / 20.0); }
inline double amp_to_db(double amp) { return 20.0 * std::log10(amp); }

}  // namespace fairpda

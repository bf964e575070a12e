// Shared plumbing: error types, deterministic RNG, hashing, portable trig.
//
// Everything stochastic in this library draws from Rng so that a fixed seed
// reproduces byte-identical corpora, training logs and checkpoints. Scene
// synthesis additionally avoids libm sin/cos (det_sin/det_cos below) so that
// corpus content hashes do not depend on the host's math library.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace reo {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes (config 2, data 3, numeric 4).
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit, used for corpus manifests and stream derivation.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

// ---------------------------------------------------------------------------
// Deterministic RNG: splitmix64 seeding into xoshiro256**.
//
// std::mt19937_64 would be portable but the standard distributions are not;
// uniform/normal here are fully specified. normal() is the 12-uniform sum,
// which has exactly unit variance and is close enough to Gaussian for noise
// injection and weight jitter at this scale.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        if (n == 0) throw UsageError("Rng::index: n must be positive");
        const std::uint64_t lim = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
        std::uint64_t x;
        do { x = next_u64(); } while (x >= lim);
        return x % n;
    }

    // Irwin-Hall(12) - 6: mean 0, variance exactly 1.
    double normal() {
        double acc = 0.0;
        for (int i = 0; i < 12; ++i) acc += uniform();
        return acc - 6.0;
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Fisher-Yates prefix: first n entries of a permutation of [0, count).
    std::vector<std::int64_t> sample_without_replacement(std::int64_t count, std::int64_t n) {
        if (n > count) n = count;
        std::vector<std::int64_t> ids(static_cast<std::size_t>(count));
        for (std::int64_t i = 0; i < count; ++i) ids[static_cast<std::size_t>(i)] = i;
        for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t j = i + static_cast<std::int64_t>(index(static_cast<std::uint64_t>(count - i)));
            std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
        }
        ids.resize(static_cast<std::size_t>(n));
        return ids;
    }

    std::array<std::uint64_t, 4> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::array<std::uint64_t, 4>& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st[static_cast<std::size_t>(i)];
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t s_[4] = {};
};

// Derive an independent stream from (seed, tags...). Used for counter-based
// randomness: epoch shuffles, per-step query sampling, per-scene generation.
// Resume from a checkpoint only needs the master seed plus the counters.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = 0x9e3779b97f4a7c15ull ^ seed;
    for (std::uint64_t w : {a, b, c}) {
        h ^= w + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        h = splitmix64(h);
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    return derive_seed(seed ^ fnv1a64(tag), a, b);
}

// ---------------------------------------------------------------------------
// Portable sin/cos. Range-reduce with fmod (exactly rounded), then a degree-13
// odd polynomial on [-pi/4, pi/4] with quadrant dispatch. Max abs error is
// ~2e-11, and the result depends only on IEEE arithmetic, not on libm.
// ---------------------------------------------------------------------------

namespace detail {

inline double sin_poly(double x) {
    const double x2 = x * x;
    double p = 1.58962301576546568060e-10;
    p = p * x2 + -2.50507477628578072866e-8;
    p = p * x2 + 2.75573136213857245213e-6;
    p = p * x2 + -1.98412698295895385996e-4;
    p = p * x2 + 8.33333333332211858878e-3;
    p = p * x2 + -1.66666666666666307295e-1;
    return x + x * x2 * p;
}

inline double cos_poly(double x) {
    const double x2 = x * x;
    double p = -1.13585365213876817300e-11;
    p = p * x2 + 2.08757008419747316778e-9;
    p = p * x2 + -2.75573141792967388112e-7;
    p = p * x2 + 2.48015872888517179954e-5;
    p = p * x2 + -1.38888888888730564116e-3;
    p = p * x2 + 4.16666666666665929218e-2;
    return 1.0 - 0.5 * x2 + x2 * x2 * p;
}

} // namespace detail

inline void det_sincos(double x, double& s, double& c) {
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    constexpr double kPiOver2 = 1.5707963267948966192313216916398;
    double r = std::fmod(x, kTwoPi);
    if (r < 0.0) r += kTwoPi;
    // quadrant index and residual in [-pi/4, pi/4]
    int q = static_cast<int>(std::floor(r / kPiOver2 + 0.5)) & 3;
    double t = r - static_cast<double>(q) * kPiOver2;
    // guard the q==4 wraparound from floor at r close to 2*pi
    if (t > kPiOver2) { t -= kPiOver2; q = (q + 1) & 3; }
    const double sp = detail::sin_poly(t);
    const double cp = detail::cos_poly(t);
    switch (q) {
        case 0: s = sp; c = cp; break;
        case 1: s = cp; c = -sp; break;
        case 2: s = -sp; c = -cp; break;
        default: s = -cp; c = sp; break;
    }
}

inline double det_sin(double x) { double s, c; det_sincos(x, s, c); return s; }
inline double det_cos(double x) { double s, c; det_sincos(x, s, c); return c; }

} // namespace reo

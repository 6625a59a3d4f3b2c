#pragma once

// Shared primitives: error taxonomy, flat tensors, deterministic RNG,
// and a small thread fan-out helper.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tssc {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Error categories map 1:1 onto CLI exit codes (usage=2, io=3, numeric=4).
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw UsageError(msg);
}

// ---------------------------------------------------------------------------
// Tensor: shape + flat row-major storage. No views, no strides; the math in
// this library is written directly against flat indices.
// ---------------------------------------------------------------------------

template <typename Real>
struct Tensor {
    std::vector<i64> shape;
    std::vector<Real> v;

    Tensor() = default;
    explicit Tensor(std::vector<i64> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), Real(0));
    }

    static i64 numel_of(const std::vector<i64>& s) {
        i64 n = 1;
        for (i64 d : s) n *= d;
        return n;
    }
    i64 numel() const { return static_cast<i64>(v.size()); }

    Real* data() { return v.data(); }
    const Real* data() const { return v.data(); }
    Real& operator[](size_t i) { return v[i]; }
    const Real& operator[](size_t i) const { return v[i]; }

    void fill(Real x) { std::fill(v.begin(), v.end(), x); }

    Tensor zeros_like() const {
        Tensor t;
        t.shape = shape;
        t.v.assign(v.size(), Real(0));
        return t;
    }
};

template <typename Real>
bool all_finite(std::span<const Real> xs) {
    for (Real x : xs)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

// Residual add that is exactly the identity when the increment is zero.
// Plain `x + 0.0f` rewrites -0 to +0, which would break the bit-exact
// identity-at-init contracts.
template <typename Real>
inline Real add_residual(Real base, Real delta) {
    return delta == Real(0) ? base : base + delta;
}

// ---------------------------------------------------------------------------
// Rng: mt19937_64 + Box-Muller. std::normal_distribution is implementation
// defined; this keeps sampled streams reproducible and serializable.
// ---------------------------------------------------------------------------

inline u64 splitmix64(u64 x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stable derivation of independent seed streams from a root seed.
inline u64 derive_seed(u64 root, u64 stream) {
    return splitmix64(splitmix64(root) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1));
}

class Rng {
public:
    explicit Rng(u64 seed = 0) : gen_(seed) {}

    u64 next_u64() { return gen_(); }

    // Uniform on (0, 1]: never returns 0, so log() below is safe.
    double uniform() {
        return (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
    }

    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename Real>
    void fill_normal(std::span<Real> out, double stddev = 1.0) {
        for (Real& x : out) x = static_cast<Real>(normal() * stddev);
    }

    i64 uniform_int(i64 lo, i64 hi) {  // inclusive range [lo, hi]
        const u64 span = static_cast<u64>(hi - lo) + 1;
        return lo + static_cast<i64>(gen_() % span);
    }

    std::string state() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }
    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        if (!is) throw IoError("invalid rng state string");
    }

private:
    std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// parallel_for: contiguous range split across `jobs` threads. The same index
// always performs the same arithmetic, so results do not depend on `jobs`.
// ---------------------------------------------------------------------------

template <typename Fn>
void parallel_for(i64 n, int jobs, Fn&& fn) {
    if (n <= 0) return;
    if (jobs <= 1 || n == 1) {
        for (i64 i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = static_cast<int>(std::min<i64>(jobs, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    const i64 chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const i64 lo = w * chunk;
        const i64 hi = std::min<i64>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (i64 i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace tssc

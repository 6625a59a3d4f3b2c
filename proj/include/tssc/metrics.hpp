#pragma once

// Evaluation metrics: MAE, PSNR, slice-wise Gaussian SSIM, and mean +/-
// population-std aggregation with fixed 3-decimal formatting.

#include <array>
#include <cstdio>
#include <span>
#include <string>

#include "tssc/core.hpp"

namespace tssc {

template <typename Real>
double mae(std::span<const Real> a, std::span<const Real> b) {
    require(a.size() == b.size(), "mae: shape mismatch");
    require(!a.empty(), "mae: empty input");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    return s / static_cast<double>(a.size());
}

// 10 log10(max^2 / MSE). Identical inputs (MSE = 0) return the 100 dB
// sentinel; finite MSE values are reported uncapped so the metric stays
// strictly monotone in noise power.
template <typename Real>
double psnr(std::span<const Real> a, std::span<const Real> b, double max_val) {
    require(a.size() == b.size(), "psnr: shape mismatch");
    require(!a.empty(), "psnr: empty input");
    require(max_val > 0.0, "psnr: max_val must be positive");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    const double mse = s / static_cast<double>(a.size());
    if (mse == 0.0) return 100.0;
    return 10.0 * std::log10(max_val * max_val / mse);
}

namespace detail {

inline constexpr int kSsimWindow = 11;

inline std::array<double, kSsimWindow> ssim_window() {
    std::array<double, kSsimWindow> w{};
    const double sigma = 1.5;
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - (kSsimWindow - 1) / 2;
        w[static_cast<size_t>(i)] = std::exp(-(d * d) / (2.0 * sigma * sigma));
        sum += w[static_cast<size_t>(i)];
    }
    for (double& x : w) x /= sum;
    return w;
}

// valid-mode separable smoothing of a (Y, X) field
inline void gauss_valid(const std::vector<double>& in, i64 Y, i64 X,
                        const std::array<double, kSsimWindow>& w, std::vector<double>& tmp,
                        std::vector<double>& out) {
    const i64 K = kSsimWindow;
    const i64 Xv = X - K + 1, Yv = Y - K + 1;
    tmp.assign(static_cast<size_t>(Y * Xv), 0.0);
    for (i64 y = 0; y < Y; ++y)
        for (i64 x = 0; x < Xv; ++x) {
            double s = 0.0;
            for (i64 k = 0; k < K; ++k)
                s += w[static_cast<size_t>(k)] * in[static_cast<size_t>(y * X + x + k)];
            tmp[static_cast<size_t>(y * Xv + x)] = s;
        }
    out.assign(static_cast<size_t>(Yv * Xv), 0.0);
    for (i64 y = 0; y < Yv; ++y)
        for (i64 x = 0; x < Xv; ++x) {
            double s = 0.0;
            for (i64 k = 0; k < K; ++k)
                s += w[static_cast<size_t>(k)] * tmp[static_cast<size_t>((y + k) * Xv + x)];
            out[static_cast<size_t>(y * Xv + x)] = s;
        }
}

}  // namespace detail

// Mean local SSIM, 11-point Gaussian window (sigma 1.5) applied slice-wise
// over (y, x) and averaged across slices. C1 = (0.01 max)^2, C2 = (0.03 max)^2.
// The shape is (slices, Y, X); callers with 4D data fold t into the slice axis.
template <typename Real>
double ssim(std::span<const Real> a, std::span<const Real> b, std::array<i64, 3> shape,
            double max_val) {
    const i64 S = shape[0], Y = shape[1], X = shape[2];
    require(S >= 1, "ssim: need at least one slice");
    require(Y >= detail::kSsimWindow && X >= detail::kSsimWindow,
            "ssim: slice smaller than the 11-point window");
    require(static_cast<i64>(a.size()) == S * Y * X, "ssim: payload/shape mismatch");
    require(a.size() == b.size(), "ssim: shape mismatch");
    require(max_val > 0.0, "ssim: max_val must be positive");

    const auto w = detail::ssim_window();
    const double C1 = (0.01 * max_val) * (0.01 * max_val);
    const double C2 = (0.03 * max_val) * (0.03 * max_val);

    const size_t hw = static_cast<size_t>(Y * X);
    std::vector<double> pa(hw), pb(hw), paa(hw), pbb(hw), pab(hw);
    std::vector<double> tmp, mu_a, mu_b, m_aa, m_bb, m_ab;
    double total = 0.0;
    i64 count = 0;
    for (i64 s = 0; s < S; ++s) {
        const Real* va = a.data() + static_cast<size_t>(s) * hw;
        const Real* vb = b.data() + static_cast<size_t>(s) * hw;
        for (size_t i = 0; i < hw; ++i) {
            const double xa = static_cast<double>(va[i]);
            const double xb = static_cast<double>(vb[i]);
            pa[i] = xa;
            pb[i] = xb;
            paa[i] = xa * xa;
            pbb[i] = xb * xb;
            pab[i] = xa * xb;
        }
        detail::gauss_valid(pa, Y, X, w, tmp, mu_a);
        detail::gauss_valid(pb, Y, X, w, tmp, mu_b);
        detail::gauss_valid(paa, Y, X, w, tmp, m_aa);
        detail::gauss_valid(pbb, Y, X, w, tmp, m_bb);
        detail::gauss_valid(pab, Y, X, w, tmp, m_ab);
        for (size_t i = 0; i < mu_a.size(); ++i) {
            const double ma = mu_a[i], mb = mu_b[i];
            const double var_a = m_aa[i] - ma * ma;
            const double var_b = m_bb[i] - mb * mb;
            const double cov = m_ab[i] - ma * mb;
            const double num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
            const double den = (ma * ma + mb * mb + C1) * (var_a + var_b + C2);
            total += num / den;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct MetricCase {
    std::string id;
    double mae = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct MetricStats {
    double mean = 0.0;
    double stddev = 0.0;  // population
};

struct MetricReport {
    std::vector<MetricCase> cases;
    MetricStats mae;
    MetricStats psnr;
    MetricStats ssim;
};

inline MetricStats mean_std(std::span<const double> xs) {
    require(!xs.empty(), "aggregate: no cases");
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    return {mean, std::sqrt(var)};
}

inline MetricReport aggregate(std::vector<MetricCase> cases) {
    require(!cases.empty(), "aggregate: no cases");
    std::vector<double> a, p, s;
    for (const auto& c : cases) {
        a.push_back(c.mae);
        p.push_back(c.psnr);
        s.push_back(c.ssim);
    }
    MetricReport r;
    r.cases = std::move(cases);
    r.mae = mean_std(a);
    r.psnr = mean_std(p);
    r.ssim = mean_std(s);
    return r;
}

inline std::string format_mean_std(const MetricStats& st) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f±%.3f", st.mean, st.stddev);
    return buf;
}

}  // namespace tssc

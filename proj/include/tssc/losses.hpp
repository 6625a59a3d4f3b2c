#pragma once

// Training objectives: eps-prediction MSE for stage 1, and the composite
// stage-2 loss (MSE + wavelet-coefficient L1 + anisotropic TV). Analytic
// gradients live next to each loss; the wavelet gradient relies on the
// transform being orthonormal (W^T = W^{-1}).

#include <array>
#include <span>

#include "tssc/core.hpp"

namespace tssc {

struct LossWeights {
    double lambda_mse = 1.0;
    double lambda_wt = 1.0;
    double lambda_tv = 1.0;
};

// ---------------------------------------------------------------------------
// Mean squared error
// ---------------------------------------------------------------------------

template <typename Real>
double mse_loss(std::span<const Real> a, std::span<const Real> b) {
    require(a.size() == b.size(), "mse_loss: shape mismatch");
    require(!a.empty(), "mse_loss: empty input");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

// d/da mean (a-b)^2 = 2 (a-b) / M
template <typename Real>
void mse_loss_grad(std::span<const Real> a, std::span<const Real> b, std::span<Real> out) {
    require(a.size() == b.size() && a.size() == out.size(), "mse_loss_grad: shape mismatch");
    const Real c = static_cast<Real>(2.0 / static_cast<double>(a.size()));
    for (size_t i = 0; i < a.size(); ++i) out[i] = c * (a[i] - b[i]);
}

// Stage-1 objective is the same mean-square form applied to noise stacks.
template <typename Real>
double eps_loss(std::span<const Real> eps_hat, std::span<const Real> eps_true) {
    return mse_loss(eps_hat, eps_true);
}

template <typename Real>
void eps_loss_grad(std::span<const Real> eps_hat, std::span<const Real> eps_true,
                   std::span<Real> out) {
    mse_loss_grad(eps_hat, eps_true, out);
}

// ---------------------------------------------------------------------------
// Orthonormal 3D Haar transform, Mallat in-place layout
// ---------------------------------------------------------------------------

namespace detail {

// In-place pair transform along one axis: first half approximations,
// second half details, both scaled by 1/sqrt(2).
template <typename Real>
void haar1d_fwd(Real* base, i64 m, i64 stride, std::vector<Real>& tmp) {
    const Real r = static_cast<Real>(M_SQRT1_2);
    tmp.resize(static_cast<size_t>(m));
    for (i64 k = 0; k < m / 2; ++k) {
        const Real a = base[2 * k * stride];
        const Real b = base[(2 * k + 1) * stride];
        tmp[static_cast<size_t>(k)] = (a + b) * r;
        tmp[static_cast<size_t>(m / 2 + k)] = (a - b) * r;
    }
    for (i64 i = 0; i < m; ++i) base[i * stride] = tmp[static_cast<size_t>(i)];
}

template <typename Real>
void haar1d_inv(Real* base, i64 m, i64 stride, std::vector<Real>& tmp) {
    const Real r = static_cast<Real>(M_SQRT1_2);
    tmp.resize(static_cast<size_t>(m));
    for (i64 k = 0; k < m / 2; ++k) {
        const Real a = base[k * stride];
        const Real d = base[(m / 2 + k) * stride];
        tmp[static_cast<size_t>(2 * k)] = (a + d) * r;
        tmp[static_cast<size_t>(2 * k + 1)] = (a - d) * r;
    }
    for (i64 i = 0; i < m; ++i) base[i * stride] = tmp[static_cast<size_t>(i)];
}

inline void check_dwt_shape(std::array<i64, 3> s, int levels, size_t n) {
    require(levels >= 0, "haar_dwt3: negative level count");
    const i64 div = i64(1) << levels;
    require(s[0] > 0 && s[1] > 0 && s[2] > 0, "haar_dwt3: dims must be positive");
    require(s[0] % div == 0 && s[1] % div == 0 && s[2] % div == 0,
            "haar_dwt3: every dim must be divisible by 2^levels");
    require(static_cast<i64>(n) == s[0] * s[1] * s[2], "haar_dwt3: payload/shape mismatch");
}

}  // namespace detail

// In-place multilevel analysis on a (Z, Y, X) grid. Level l transforms the
// approximation block (Z/2^l, Y/2^l, X/2^l) along z, y, then x, leaving the
// standard Mallat layout: low half first along each axis.
template <typename Real>
void haar_dwt3(std::span<Real> v, std::array<i64, 3> shape, int levels) {
    detail::check_dwt_shape(shape, levels, v.size());
    const i64 Z = shape[0], Y = shape[1], X = shape[2];
    std::vector<Real> tmp;
    for (int l = 0; l < levels; ++l) {
        const i64 zr = Z >> l, yr = Y >> l, xr = X >> l;
        for (i64 y = 0; y < yr; ++y)
            for (i64 x = 0; x < xr; ++x)
                detail::haar1d_fwd(v.data() + y * X + x, zr, Y * X, tmp);
        for (i64 z = 0; z < zr; ++z)
            for (i64 x = 0; x < xr; ++x)
                detail::haar1d_fwd(v.data() + z * Y * X + x, yr, X, tmp);
        for (i64 z = 0; z < zr; ++z)
            for (i64 y = 0; y < yr; ++y)
                detail::haar1d_fwd(v.data() + (z * Y + y) * X, xr, 1, tmp);
    }
}

template <typename Real>
void haar_idwt3(std::span<Real> v, std::array<i64, 3> shape, int levels) {
    detail::check_dwt_shape(shape, levels, v.size());
    const i64 Z = shape[0], Y = shape[1], X = shape[2];
    std::vector<Real> tmp;
    for (int l = levels - 1; l >= 0; --l) {
        const i64 zr = Z >> l, yr = Y >> l, xr = X >> l;
        for (i64 z = 0; z < zr; ++z)
            for (i64 y = 0; y < yr; ++y)
                detail::haar1d_inv(v.data() + (z * Y + y) * X, xr, 1, tmp);
        for (i64 z = 0; z < zr; ++z)
            for (i64 x = 0; x < xr; ++x)
                detail::haar1d_inv(v.data() + z * Y * X + x, yr, X, tmp);
        for (i64 y = 0; y < yr; ++y)
            for (i64 x = 0; x < xr; ++x)
                detail::haar1d_inv(v.data() + y * X + x, zr, Y * X, tmp);
    }
}

// Mean absolute difference of wavelet coefficients. In the Mallat layout
// every array element is a coefficient, so the mean runs over Z*Y*X values.
template <typename Real>
double wavelet_loss(std::span<const Real> a, std::span<const Real> b,
                    std::array<i64, 3> shape, int levels) {
    require(a.size() == b.size(), "wavelet_loss: shape mismatch");
    std::vector<Real> wa(a.begin(), a.end()), wb(b.begin(), b.end());
    haar_dwt3<Real>(wa, shape, levels);
    haar_dwt3<Real>(wb, shape, levels);
    double s = 0.0;
    for (size_t i = 0; i < wa.size(); ++i)
        s += std::abs(static_cast<double>(wa[i]) - static_cast<double>(wb[i]));
    return s / static_cast<double>(wa.size());
}

// d/da mean |W a - W b| = W^T sign(...) / M = W^{-1} sign(...) / M.
template <typename Real>
void wavelet_loss_grad(std::span<const Real> a, std::span<const Real> b,
                       std::array<i64, 3> shape, int levels, std::span<Real> out) {
    require(a.size() == b.size() && a.size() == out.size(),
            "wavelet_loss_grad: shape mismatch");
    std::vector<Real> wa(a.begin(), a.end()), wb(b.begin(), b.end());
    haar_dwt3<Real>(wa, shape, levels);
    haar_dwt3<Real>(wb, shape, levels);
    const Real inv_m = static_cast<Real>(1.0 / static_cast<double>(a.size()));
    for (size_t i = 0; i < out.size(); ++i) {
        const Real d = wa[i] - wb[i];
        out[i] = d > Real(0) ? inv_m : (d < Real(0) ? -inv_m : Real(0));
    }
    haar_idwt3<Real>(out, shape, levels);
}

// ---------------------------------------------------------------------------
// Anisotropic total variation
// ---------------------------------------------------------------------------

namespace detail {

inline i64 tv_pair_count(std::array<i64, 3> s) {
    return (s[0] - 1) * s[1] * s[2] + s[0] * (s[1] - 1) * s[2] + s[0] * s[1] * (s[2] - 1);
}

}  // namespace detail

// Mean |forward difference| over all axis-aligned neighbor pairs.
template <typename Real>
double tv_loss(std::span<const Real> v, std::array<i64, 3> shape) {
    const i64 Z = shape[0], Y = shape[1], X = shape[2];
    require(Z >= 1 && Y >= 1 && X >= 1, "tv_loss: dims must be >= 1");
    require(static_cast<i64>(v.size()) == Z * Y * X, "tv_loss: payload/shape mismatch");
    const i64 pairs = detail::tv_pair_count(shape);
    if (pairs == 0) return 0.0;
    auto at = [&](i64 z, i64 y, i64 x) {
        return static_cast<double>(v[static_cast<size_t>((z * Y + y) * X + x)]);
    };
    double s = 0.0;
    for (i64 z = 0; z + 1 < Z; ++z)
        for (i64 y = 0; y < Y; ++y)
            for (i64 x = 0; x < X; ++x) s += std::abs(at(z + 1, y, x) - at(z, y, x));
    for (i64 z = 0; z < Z; ++z)
        for (i64 y = 0; y + 1 < Y; ++y)
            for (i64 x = 0; x < X; ++x) s += std::abs(at(z, y + 1, x) - at(z, y, x));
    for (i64 z = 0; z < Z; ++z)
        for (i64 y = 0; y < Y; ++y)
            for (i64 x = 0; x + 1 < X; ++x) s += std::abs(at(z, y, x + 1) - at(z, y, x));
    return s / static_cast<double>(pairs);
}

template <typename Real>
void tv_loss_grad(std::span<const Real> v, std::array<i64, 3> shape, std::span<Real> out) {
    const i64 Z = shape[0], Y = shape[1], X = shape[2];
    require(v.size() == out.size(), "tv_loss_grad: shape mismatch");
    require(static_cast<i64>(v.size()) == Z * Y * X, "tv_loss_grad: payload/shape mismatch");
    std::fill(out.begin(), out.end(), Real(0));
    const i64 pairs = detail::tv_pair_count(shape);
    if (pairs == 0) return;
    const Real w = static_cast<Real>(1.0 / static_cast<double>(pairs));
    auto idx = [&](i64 z, i64 y, i64 x) { return static_cast<size_t>((z * Y + y) * X + x); };
    auto accum = [&](size_t hi, size_t lo) {
        const Real d = v[hi] - v[lo];
        if (d > Real(0)) {
            out[hi] += w;
            out[lo] -= w;
        } else if (d < Real(0)) {
            out[hi] -= w;
            out[lo] += w;
        }
    };
    for (i64 z = 0; z + 1 < Z; ++z)
        for (i64 y = 0; y < Y; ++y)
            for (i64 x = 0; x < X; ++x) accum(idx(z + 1, y, x), idx(z, y, x));
    for (i64 z = 0; z < Z; ++z)
        for (i64 y = 0; y + 1 < Y; ++y)
            for (i64 x = 0; x < X; ++x) accum(idx(z, y + 1, x), idx(z, y, x));
    for (i64 z = 0; z < Z; ++z)
        for (i64 y = 0; y < Y; ++y)
            for (i64 x = 0; x + 1 < X; ++x) accum(idx(z, y, x + 1), idx(z, y, x));
}

// ---------------------------------------------------------------------------
// Composite stage-2 loss
// ---------------------------------------------------------------------------

struct ScLossBreakdown {
    double mse = 0.0;
    double wavelet = 0.0;
    double tv = 0.0;
    double total = 0.0;
};

// L = lambda_mse * MSE(pred, target) + lambda_wt * WT(pred, target)
//   + lambda_tv * TV(pred). TV regularizes the prediction itself.
template <typename Real>
ScLossBreakdown composite_sc_loss(std::span<const Real> pred, std::span<const Real> target,
                                  std::array<i64, 3> shape, const LossWeights& w,
                                  int levels) {
    require(w.lambda_mse >= 0.0 && w.lambda_wt >= 0.0 && w.lambda_tv >= 0.0,
            "composite_sc_loss: weights must be non-negative");
    ScLossBreakdown r;
    r.mse = mse_loss(pred, target);
    r.wavelet = wavelet_loss(pred, target, shape, levels);
    r.tv = tv_loss(pred, shape);
    r.total = w.lambda_mse * r.mse + w.lambda_wt * r.wavelet + w.lambda_tv * r.tv;
    return r;
}

template <typename Real>
void composite_sc_loss_grad(std::span<const Real> pred, std::span<const Real> target,
                            std::array<i64, 3> shape, const LossWeights& w, int levels,
                            std::span<Real> out) {
    require(pred.size() == out.size(), "composite_sc_loss_grad: shape mismatch");
    std::vector<Real> g(pred.size());
    mse_loss_grad(pred, target, std::span<Real>(g));
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<Real>(w.lambda_mse) * g[i];
    wavelet_loss_grad(pred, target, shape, levels, std::span<Real>(g));
    for (size_t i = 0; i < out.size(); ++i)
        out[i] += static_cast<Real>(w.lambda_wt) * g[i];
    tv_loss_grad(pred, shape, std::span<Real>(g));
    for (size_t i = 0; i < out.size(); ++i)
        out[i] += static_cast<Real>(w.lambda_tv) * g[i];
}

}  // namespace tssc

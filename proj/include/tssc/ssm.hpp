#pragma once

// Selective state-space machinery: diagonal linear recurrences evaluated
// sequentially or via a work-efficient parallel scan, the three voxel scan
// orders, and the residual tri-directional blocks built from them. The
// backward pass of a scan is itself a scan running in the opposite
// direction; docs/scan_gradients.md derives the adjoint recurrence used here.

#include <array>
#include <span>
#include <string>
#include <vector>

#include "tssc/core.hpp"

namespace tssc {

// ---------------------------------------------------------------------------
// Raw per-step scans: parameters given explicitly per step, state dim n.
// h_t = abar_t * h_{t-1} + bbar_t * x_t (elementwise), y_t = <c_t, h_t>.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_scan_args(size_t a, size_t b, size_t c, size_t x, size_t y, i64 L, i64 n) {
    require(L >= 1 && n >= 1, "ssm_scan: need L >= 1 and n >= 1");
    const size_t ln = static_cast<size_t>(L * n);
    require(a == ln && b == ln && c == ln, "ssm_scan: parameter sequence length mismatch");
    require(x == static_cast<size_t>(L) && y == static_cast<size_t>(L),
            "ssm_scan: input/output length mismatch");
}

}  // namespace detail

template <typename Real>
void ssm_scan_sequential(std::span<const Real> abar, std::span<const Real> bbar,
                         std::span<const Real> cs, std::span<const Real> x, i64 L, i64 n,
                         std::span<Real> y) {
    detail::check_scan_args(abar.size(), bbar.size(), cs.size(), x.size(), y.size(), L, n);
    std::vector<Real> h(static_cast<size_t>(n), Real(0));
    for (i64 t = 0; t < L; ++t) {
        const Real* at = abar.data() + t * n;
        const Real* bt = bbar.data() + t * n;
        const Real* ct = cs.data() + t * n;
        Real acc = Real(0);
        for (i64 j = 0; j < n; ++j) {
            h[static_cast<size_t>(j)] = at[j] * h[static_cast<size_t>(j)] + bt[j] * x[static_cast<size_t>(t)];
            acc += ct[j] * h[static_cast<size_t>(j)];
        }
        y[static_cast<size_t>(t)] = acc;
    }
}

// Blelloch two-sweep scan over affine maps (A, b), op(x, y) = "x then y"
// = (A_y A_x, A_y b_x + b_y), identity (1, 0); non-power-of-two lengths are
// padded with identities. The down-sweep leaves exclusive prefixes, so
// h_t = A_t * prefix.b + b_t.
template <typename Real>
void ssm_scan_parallel(std::span<const Real> abar, std::span<const Real> bbar,
                       std::span<const Real> cs, std::span<const Real> x, i64 L, i64 n,
                       std::span<Real> y) {
    detail::check_scan_args(abar.size(), bbar.size(), cs.size(), x.size(), y.size(), L, n);
    i64 P = 1;
    while (P < L) P <<= 1;
    std::vector<Real> A(static_cast<size_t>(P)), B(static_cast<size_t>(P));
    std::fill(y.begin(), y.end(), Real(0));
    for (i64 j = 0; j < n; ++j) {
        for (i64 t = 0; t < L; ++t) {
            A[static_cast<size_t>(t)] = abar[static_cast<size_t>(t * n + j)];
            B[static_cast<size_t>(t)] =
                bbar[static_cast<size_t>(t * n + j)] * x[static_cast<size_t>(t)];
        }
        for (i64 t = L; t < P; ++t) {
            A[static_cast<size_t>(t)] = Real(1);
            B[static_cast<size_t>(t)] = Real(0);
        }
        for (i64 s = 1; s < P; s <<= 1)
            for (i64 i = 2 * s - 1; i < P; i += 2 * s) {
                // (A,b)[i] = op((A,b)[i-s], (A,b)[i])
                B[static_cast<size_t>(i)] =
                    A[static_cast<size_t>(i)] * B[static_cast<size_t>(i - s)] +
                    B[static_cast<size_t>(i)];
                A[static_cast<size_t>(i)] *= A[static_cast<size_t>(i - s)];
            }
        A[static_cast<size_t>(P - 1)] = Real(1);
        B[static_cast<size_t>(P - 1)] = Real(0);
        for (i64 s = P / 2; s >= 1; s >>= 1)
            for (i64 i = 2 * s - 1; i < P; i += 2 * s) {
                const Real ta = A[static_cast<size_t>(i - s)];
                const Real tb = B[static_cast<size_t>(i - s)];
                A[static_cast<size_t>(i - s)] = A[static_cast<size_t>(i)];
                B[static_cast<size_t>(i - s)] = B[static_cast<size_t>(i)];
                // right child = op(parent-prefix, left-subtree-total)
                B[static_cast<size_t>(i)] =
                    ta * B[static_cast<size_t>(i)] + tb;
                A[static_cast<size_t>(i)] *= ta;
            }
        for (i64 t = 0; t < L; ++t) {
            const Real h = abar[static_cast<size_t>(t * n + j)] * B[static_cast<size_t>(t)] +
                           bbar[static_cast<size_t>(t * n + j)] * x[static_cast<size_t>(t)];
            y[static_cast<size_t>(t)] += cs[static_cast<size_t>(t * n + j)] * h;
        }
    }
}

// y = forward-scan(x) + reverse(backward-scan(reverse(x))); the backward
// parameter sequences are given in the reversed domain.
template <typename Real>
void bidirectional_scan(std::span<const Real> abar_f, std::span<const Real> bbar_f,
                        std::span<const Real> cs_f, std::span<const Real> abar_b,
                        std::span<const Real> bbar_b, std::span<const Real> cs_b,
                        std::span<const Real> x, i64 L, i64 n, std::span<Real> y) {
    ssm_scan_sequential(abar_f, bbar_f, cs_f, x, L, n, y);
    std::vector<Real> xr(x.rbegin(), x.rend()), yr(static_cast<size_t>(L));
    ssm_scan_sequential(abar_b, bbar_b, cs_b, std::span<const Real>(xr), L, n,
                        std::span<Real>(yr));
    for (i64 t = 0; t < L; ++t) y[static_cast<size_t>(t)] += yr[static_cast<size_t>(L - 1 - t)];
}

// ---------------------------------------------------------------------------
// Scan orders (fastest axis first: xyz iterates x fastest, then y, then z)
// ---------------------------------------------------------------------------

enum class ScanOrder { xyz, yzx, zxy };

inline const char* scan_order_name(ScanOrder o) {
    switch (o) {
        case ScanOrder::xyz: return "xyz";
        case ScanOrder::yzx: return "yzx";
        case ScanOrder::zxy: return "zxy";
    }
    throw UsageError("unknown scan order tag");
}

// perm[k] = memory index (z*Y+y)*X+x of the voxel visited at sequence step k.
inline std::vector<i64> scan_order_permutation(ScanOrder o, i64 Z, i64 Y, i64 X) {
    require(Z > 0 && Y > 0 && X > 0, "scan_order_permutation: dims must be positive");
    std::vector<i64> perm(static_cast<size_t>(Z * Y * X));
    size_t k = 0;
    switch (o) {
        case ScanOrder::xyz:
            for (i64 z = 0; z < Z; ++z)
                for (i64 y = 0; y < Y; ++y)
                    for (i64 x = 0; x < X; ++x) perm[k++] = (z * Y + y) * X + x;
            break;
        case ScanOrder::yzx:
            for (i64 x = 0; x < X; ++x)
                for (i64 z = 0; z < Z; ++z)
                    for (i64 y = 0; y < Y; ++y) perm[k++] = (z * Y + y) * X + x;
            break;
        case ScanOrder::zxy:
            for (i64 y = 0; y < Y; ++y)
                for (i64 x = 0; x < X; ++x)
                    for (i64 z = 0; z < Z; ++z) perm[k++] = (z * Y + y) * X + x;
            break;
    }
    return perm;
}

// vol is (Z, Y, X, C) row-major with channels fastest; seq is [L, C].
template <typename Real>
void scan_order_gather(std::span<const Real> vol, std::span<const i64> perm, i64 C,
                       std::span<Real> seq) {
    require(vol.size() == seq.size(), "scan_order_gather: size mismatch");
    require(vol.size() == perm.size() * static_cast<size_t>(C),
            "scan_order_gather: permutation/volume mismatch");
    for (size_t k = 0; k < perm.size(); ++k)
        for (i64 c = 0; c < C; ++c)
            seq[k * static_cast<size_t>(C) + static_cast<size_t>(c)] =
                vol[static_cast<size_t>(perm[k] * C + c)];
}

// exact inverse of scan_order_gather
template <typename Real>
void scan_order_scatter(std::span<const Real> seq, std::span<const i64> perm, i64 C,
                        std::span<Real> vol) {
    require(vol.size() == seq.size(), "scan_order_scatter: size mismatch");
    require(vol.size() == perm.size() * static_cast<size_t>(C),
            "scan_order_scatter: permutation/volume mismatch");
    for (size_t k = 0; k < perm.size(); ++k)
        for (i64 c = 0; c < C; ++c)
            vol[static_cast<size_t>(perm[k] * C + c)] =
                seq[k * static_cast<size_t>(C) + static_cast<size_t>(c)];
}

// ---------------------------------------------------------------------------
// Selective parameterization (input-dependent delta/B/C, stable decay)
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
Real softplus(Real x) {
    if (static_cast<double>(x) > 30.0) return x;
    return static_cast<Real>(std::log1p(std::exp(static_cast<double>(x))));
}

template <typename Real>
Real sigmoid(Real x) {
    return static_cast<Real>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
}

}  // namespace detail

struct TriDirConfig {
    i64 channels = 8;   // C
    i64 state_dim = 8;  // n
    i64 blocks = 2;     // R

    void validate() const {
        require(channels >= 1 && state_dim >= 1, "tridir: channels/state_dim must be >= 1");
        require(blocks >= 0, "tridir: negative block count");
    }
};

// One scan orientation of one direction: delta = softplus(w_delta u + b_delta),
// B = w_B u + b_B, C = w_C u + b_C, abar[c,j] = exp(-softplus(a[c,j]) delta[c]).
template <typename Real>
struct SsmDirParams {
    Tensor<Real> a;                   // [C, n]
    Tensor<Real> w_delta, b_delta;    // [C, C], [C]
    Tensor<Real> w_B, b_B;            // [n, C], [n]
    Tensor<Real> w_C, b_C;            // [n, C], [n]
};

template <typename Real>
struct TriDirBlockParams {
    Tensor<Real> norm_g;  // [C] rms pre-normalization scale
    struct Direction {
        Tensor<Real> in_w, in_b;    // [C, C], [C]
        SsmDirParams<Real> fwd, bwd;
        Tensor<Real> out_w, out_b;  // [C, C], [C]
    };
    std::array<Direction, 3> dirs;  // xyz, yzx, zxy
    Tensor<Real> fuse_w, fuse_b;    // [C, 3C], [C]
};

template <typename Real>
struct TriDirNetParams {
    TriDirConfig cfg;
    Tensor<Real> lift_w, lift_b;  // [C, 1], [C]
    std::vector<TriDirBlockParams<Real>> blocks;
    Tensor<Real> out_w, out_b;    // [1, C], [1], zero at init

    template <typename Self, typename Fn>
    static void visit_impl(Self& self, Fn&& fn) {
        fn("lift.w", self.lift_w);
        fn("lift.b", self.lift_b);
        for (size_t b = 0; b < self.blocks.size(); ++b) {
            auto& blk = self.blocks[b];
            const std::string bp = "block." + std::to_string(b) + ".";
            fn(bp + "norm.g", blk.norm_g);
            static const char* dn[3] = {"xyz", "yzx", "zxy"};
            for (int d = 0; d < 3; ++d) {
                auto& dir = blk.dirs[static_cast<size_t>(d)];
                const std::string dp = bp + "dir." + dn[d] + ".";
                fn(dp + "in.w", dir.in_w);
                fn(dp + "in.b", dir.in_b);
                for (int o = 0; o < 2; ++o) {
                    auto& sp = o == 0 ? dir.fwd : dir.bwd;
                    const std::string op = dp + (o == 0 ? "fwd." : "bwd.");
                    fn(op + "a", sp.a);
                    fn(op + "delta.w", sp.w_delta);
                    fn(op + "delta.b", sp.b_delta);
                    fn(op + "B.w", sp.w_B);
                    fn(op + "B.b", sp.b_B);
                    fn(op + "C.w", sp.w_C);
                    fn(op + "C.b", sp.b_C);
                }
                fn(dp + "out.w", dir.out_w);
                fn(dp + "out.b", dir.out_b);
            }
            fn(bp + "fuse.w", blk.fuse_w);
            fn(bp + "fuse.b", blk.fuse_b);
        }
        fn("out.w", self.out_w);
        fn("out.b", self.out_b);
    }
    template <typename Fn>
    void visit_tensors(Fn&& fn) {
        visit_impl(*this, fn);
    }
    template <typename Fn>
    void visit_tensors(Fn&& fn) const {
        visit_impl(*this, fn);
    }

    i64 param_count() const {
        i64 n = 0;
        visit_tensors([&](const std::string&, const Tensor<Real>& t) { n += t.numel(); });
        return n;
    }
};

template <typename Real>
TriDirNetParams<Real> make_tridir_params(const TriDirConfig& cfg) {
    cfg.validate();
    const i64 C = cfg.channels, n = cfg.state_dim;
    TriDirNetParams<Real> p;
    p.cfg = cfg;
    p.lift_w = Tensor<Real>({C, 1});
    p.lift_b = Tensor<Real>({C});
    p.blocks.resize(static_cast<size_t>(cfg.blocks));
    for (auto& blk : p.blocks) {
        blk.norm_g = Tensor<Real>({C});
        for (auto& dir : blk.dirs) {
            dir.in_w = Tensor<Real>({C, C});
            dir.in_b = Tensor<Real>({C});
            for (auto* sp : {&dir.fwd, &dir.bwd}) {
                sp->a = Tensor<Real>({C, n});
                sp->w_delta = Tensor<Real>({C, C});
                sp->b_delta = Tensor<Real>({C});
                sp->w_B = Tensor<Real>({n, C});
                sp->b_B = Tensor<Real>({n});
                sp->w_C = Tensor<Real>({n, C});
                sp->b_C = Tensor<Real>({n});
            }
            dir.out_w = Tensor<Real>({C, C});
            dir.out_b = Tensor<Real>({C});
        }
        blk.fuse_w = Tensor<Real>({C, 3 * C});
        blk.fuse_b = Tensor<Real>({C});
    }
    p.out_w = Tensor<Real>({1, C});
    p.out_b = Tensor<Real>({1});
    return p;
}

template <typename Real>
TriDirNetParams<Real> init_tridir_params(const TriDirConfig& cfg, Rng& rng,
                                         double scale = 0.05) {
    auto p = make_tridir_params<Real>(cfg);
    rng.fill_normal<Real>(std::span<Real>(p.lift_w.v), scale);
    for (auto& blk : p.blocks) {
        blk.norm_g.fill(Real(1));
        for (auto& dir : blk.dirs) {
            rng.fill_normal<Real>(std::span<Real>(dir.in_w.v), scale);
            for (auto* sp : {&dir.fwd, &dir.bwd}) {
                rng.fill_normal<Real>(std::span<Real>(sp->a.v), 1.0);
                rng.fill_normal<Real>(std::span<Real>(sp->w_delta.v), scale);
                rng.fill_normal<Real>(std::span<Real>(sp->w_B.v), scale);
                rng.fill_normal<Real>(std::span<Real>(sp->w_C.v), scale);
            }
            rng.fill_normal<Real>(std::span<Real>(dir.out_w.v), scale);
        }
        rng.fill_normal<Real>(std::span<Real>(blk.fuse_w.v), scale);
    }
    return p;  // out_w/out_b stay zero: fresh net is the identity map
}

// ---------------------------------------------------------------------------
// Selective scan over a token sequence (one orientation)
// ---------------------------------------------------------------------------

template <typename Real>
struct SelScanCtx {
    std::vector<Real> pd;     // [L, C] pre-softplus step sizes
    std::vector<Real> delta;  // [L, C]
    std::vector<Real> Bsel;   // [L, n]
    std::vector<Real> Csel;   // [L, n]
    std::vector<Real> abar;   // [L, C, n]
    std::vector<Real> h;      // [L, C, n]
};

namespace detail {

// w: [L, C] tokens in sequence order; adds the scan output into y ([L, C]).
// `reverse` walks the sequence from the far end. Context arrays are indexed
// by logical scan step, not sequence position.
template <typename Real>
void selective_scan(const SsmDirParams<Real>& sp, const Real* w, i64 L, i64 C, i64 n,
                    bool reverse, Real* y, SelScanCtx<Real>* ctx) {
    if (ctx) {
        ctx->pd.resize(static_cast<size_t>(L * C));
        ctx->delta.resize(static_cast<size_t>(L * C));
        ctx->Bsel.resize(static_cast<size_t>(L * n));
        ctx->Csel.resize(static_cast<size_t>(L * n));
        ctx->abar.resize(static_cast<size_t>(L * C * n));
        ctx->h.resize(static_cast<size_t>(L * C * n));
    }
    std::vector<Real> sp_a(static_cast<size_t>(C * n));
    for (i64 i = 0; i < C * n; ++i) sp_a[static_cast<size_t>(i)] = softplus(sp.a.v[static_cast<size_t>(i)]);

    std::vector<Real> h(static_cast<size_t>(C * n), Real(0));
    std::vector<Real> pd(static_cast<size_t>(C)), delta(static_cast<size_t>(C)),
        Bs(static_cast<size_t>(n)), Cs(static_cast<size_t>(n));
    for (i64 t = 0; t < L; ++t) {
        const i64 pos = reverse ? L - 1 - t : t;
        const Real* wt = w + pos * C;
        for (i64 c = 0; c < C; ++c) {
            Real acc = sp.b_delta.v[static_cast<size_t>(c)];
            const Real* row = sp.w_delta.data() + c * C;
            for (i64 i = 0; i < C; ++i) acc += row[i] * wt[i];
            pd[static_cast<size_t>(c)] = acc;
            delta[static_cast<size_t>(c)] = softplus(acc);
        }
        for (i64 j = 0; j < n; ++j) {
            Real ab = sp.b_B.v[static_cast<size_t>(j)], ac = sp.b_C.v[static_cast<size_t>(j)];
            const Real* rb = sp.w_B.data() + j * C;
            const Real* rc = sp.w_C.data() + j * C;
            for (i64 i = 0; i < C; ++i) {
                ab += rb[i] * wt[i];
                ac += rc[i] * wt[i];
            }
            Bs[static_cast<size_t>(j)] = ab;
            Cs[static_cast<size_t>(j)] = ac;
        }
        Real* yt = y + pos * C;
        for (i64 c = 0; c < C; ++c) {
            const Real dl = delta[static_cast<size_t>(c)];
            const Real xc = wt[c];
            Real acc = Real(0);
            Real* hc = h.data() + c * n;
            for (i64 j = 0; j < n; ++j) {
                const Real ab = static_cast<Real>(
                    std::exp(-static_cast<double>(sp_a[static_cast<size_t>(c * n + j)]) *
                             static_cast<double>(dl)));
                hc[j] = ab * hc[j] + dl * Bs[static_cast<size_t>(j)] * xc;
                acc += Cs[static_cast<size_t>(j)] * hc[j];
                if (ctx) ctx->abar[static_cast<size_t>((t * C + c) * n + j)] = ab;
            }
            yt[c] += acc;
        }
        if (ctx) {
            std::copy(pd.begin(), pd.end(), ctx->pd.begin() + t * C);
            std::copy(delta.begin(), delta.end(), ctx->delta.begin() + t * C);
            std::copy(Bs.begin(), Bs.end(), ctx->Bsel.begin() + t * n);
            std::copy(Cs.begin(), Cs.end(), ctx->Csel.begin() + t * n);
            std::copy(h.begin(), h.end(), ctx->h.begin() + t * C * n);
        }
    }
}

// Adjoint of selective_scan: lambda_t = C_t dy_t + abar_{t+1} o lambda_{t+1},
// walked in the reverse logical order. Accumulates parameter gradients and
// adds the token gradient into dw.
template <typename Real>
void selective_scan_bwd(const SsmDirParams<Real>& sp, const Real* w, i64 L, i64 C, i64 n,
                        bool reverse, const SelScanCtx<Real>& ctx, const Real* dy,
                        SsmDirParams<Real>& g, Real* dw) {
    std::vector<Real> sp_a(static_cast<size_t>(C * n)), sig_a(static_cast<size_t>(C * n));
    for (i64 i = 0; i < C * n; ++i) {
        sp_a[static_cast<size_t>(i)] = softplus(sp.a.v[static_cast<size_t>(i)]);
        sig_a[static_cast<size_t>(i)] = sigmoid(sp.a.v[static_cast<size_t>(i)]);
    }
    std::vector<Real> lam(static_cast<size_t>(C * n), Real(0));
    std::vector<Real> dB(static_cast<size_t>(n)), dC(static_cast<size_t>(n)),
        dDelta(static_cast<size_t>(C)), dpd(static_cast<size_t>(C));
    for (i64 t = L - 1; t >= 0; --t) {
        const i64 pos = reverse ? L - 1 - t : t;
        const Real* wt = w + pos * C;
        const Real* dyt = dy + pos * C;
        const Real* ht = ctx.h.data() + t * C * n;
        const Real* hprev = t > 0 ? ctx.h.data() + (t - 1) * C * n : nullptr;
        const Real* at = ctx.abar.data() + t * C * n;
        const Real* Bt = ctx.Bsel.data() + t * n;
        const Real* Ct = ctx.Csel.data() + t * n;
        const Real* dt = ctx.delta.data() + t * C;

        std::fill(dB.begin(), dB.end(), Real(0));
        std::fill(dC.begin(), dC.end(), Real(0));
        // lambda picks up the direct y_t = <C_t, h_t> contribution
        for (i64 c = 0; c < C; ++c) {
            const Real g_y = dyt[c];
            Real* lc = lam.data() + c * n;
            const Real* hc = ht + c * n;
            for (i64 j = 0; j < n; ++j) {
                lc[j] += g_y * Ct[j];
                dC[static_cast<size_t>(j)] += g_y * hc[j];
            }
        }
        // h_t = abar h_{t-1} + delta B x: split lambda into the three factors
        for (i64 c = 0; c < C; ++c) {
            const Real xc = wt[c];
            const Real dl = dt[c];
            Real* lc = lam.data() + c * n;
            const Real* ac = at + c * n;
            Real dDl = Real(0);
            Real dxc = Real(0);
            for (i64 j = 0; j < n; ++j) {
                const Real hp = hprev ? hprev[(c * n) + j] : Real(0);
                const Real dab = lc[j] * hp;
                // abar = exp(-softplus(a) delta)
                dDl += dab * (-sp_a[static_cast<size_t>(c * n + j)]) * ac[j];
                g.a.v[static_cast<size_t>(c * n + j)] +=
                    dab * (-dl) * ac[j] * sig_a[static_cast<size_t>(c * n + j)];
                dDl += lc[j] * Bt[j] * xc;
                dB[static_cast<size_t>(j)] += lc[j] * dl * xc;
                dxc += lc[j] * dl * Bt[j];
            }
            dDelta[static_cast<size_t>(c)] = dDl;
            dw[pos * C + c] += dxc;
            // adjoint recurrence for step t-1
            for (i64 j = 0; j < n; ++j) lc[j] *= ac[j];
        }
        for (i64 c = 0; c < C; ++c)
            dpd[static_cast<size_t>(c)] =
                dDelta[static_cast<size_t>(c)] *
                sigmoid(ctx.pd[static_cast<size_t>(t * C + c)]);
        for (i64 c = 0; c < C; ++c) {
            const Real gpd = dpd[static_cast<size_t>(c)];
            g.b_delta.v[static_cast<size_t>(c)] += gpd;
            Real* grow = g.w_delta.data() + c * C;
            const Real* row = sp.w_delta.data() + c * C;
            for (i64 i = 0; i < C; ++i) {
                grow[i] += gpd * wt[i];
                dw[pos * C + i] += gpd * row[i];
            }
        }
        for (i64 j = 0; j < n; ++j) {
            const Real gb = dB[static_cast<size_t>(j)], gc = dC[static_cast<size_t>(j)];
            g.b_B.v[static_cast<size_t>(j)] += gb;
            g.b_C.v[static_cast<size_t>(j)] += gc;
            Real* gwb = g.w_B.data() + j * C;
            Real* gwc = g.w_C.data() + j * C;
            const Real* rb = sp.w_B.data() + j * C;
            const Real* rc = sp.w_C.data() + j * C;
            for (i64 i = 0; i < C; ++i) {
                gwb[i] += gb * wt[i];
                gwc[i] += gc * wt[i];
                dw[pos * C + i] += gb * rb[i] + gc * rc[i];
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tri-directional residual blocks and the enhancement net
// ---------------------------------------------------------------------------

template <typename Real>
struct TriDirContext {
    TriDirConfig cfg;
    std::array<i64, 3> shape{0, 0, 0};
    std::vector<Real> vin;  // [V]
    struct BlockCtx {
        std::vector<Real> x;     // [V, C] block input
        std::vector<Real> rinv;  // [V] rms reciprocals
        std::vector<Real> u;     // [V, C] normalized tokens
        struct DirCtx {
            std::vector<Real> w;        // [L, C] in-projected tokens, sequence order
            SelScanCtx<Real> fwd, bwd;
            std::vector<Real> ybidir;   // [L, C]
        };
        std::array<DirCtx, 3> dirs;
        std::vector<Real> concat;  // [V, 3C]
    };
    std::vector<BlockCtx> blocks;
    std::vector<Real> feat_out;  // [V, C] features entering the output head
    bool valid = false;
};

namespace detail {

inline constexpr double kRmsEps = 1e-5;

}  // namespace detail

// out = v + head(blocks(lift(v))); zero-init head makes this the identity,
// and the guarded residual add keeps it bit-exact (including -0 samples).
template <typename Real>
void tridir_net_forward(const TriDirNetParams<Real>& net, std::span<const Real> v,
                        std::array<i64, 3> shape, std::span<Real> out,
                        TriDirContext<Real>* ctx = nullptr) {
    net.cfg.validate();
    const i64 Z = shape[0], Y = shape[1], X = shape[2];
    const i64 V = Z * Y * X, C = net.cfg.channels, n = net.cfg.state_dim;
    require(Z > 0 && Y > 0 && X > 0, "tridir: dims must be positive");
    require(static_cast<i64>(v.size()) == V, "tridir: payload/shape mismatch");
    require(out.size() == v.size(), "tridir: output size mismatch");

    if (ctx) {
        ctx->cfg = net.cfg;
        ctx->shape = shape;
        ctx->vin.assign(v.begin(), v.end());
        ctx->blocks.assign(static_cast<size_t>(net.cfg.blocks), {});
        ctx->valid = false;
    }

    std::array<std::vector<i64>, 3> perms = {
        scan_order_permutation(ScanOrder::xyz, Z, Y, X),
        scan_order_permutation(ScanOrder::yzx, Z, Y, X),
        scan_order_permutation(ScanOrder::zxy, Z, Y, X)};

    std::vector<Real> x(static_cast<size_t>(V * C));
    for (i64 i = 0; i < V; ++i)
        for (i64 c = 0; c < C; ++c)
            x[static_cast<size_t>(i * C + c)] =
                net.lift_w.v[static_cast<size_t>(c)] * v[static_cast<size_t>(i)] +
                net.lift_b.v[static_cast<size_t>(c)];

    std::vector<Real> u(static_cast<size_t>(V * C)), useq(static_cast<size_t>(V * C)),
        w(static_cast<size_t>(V * C)), ybidir(static_cast<size_t>(V * C)),
        yproj(static_cast<size_t>(V * C)), concat(static_cast<size_t>(V * 3 * C)),
        rinv(static_cast<size_t>(V));

    for (i64 b = 0; b < net.cfg.blocks; ++b) {
        const auto& blk = net.blocks[static_cast<size_t>(b)];
        auto* bc = ctx ? &ctx->blocks[static_cast<size_t>(b)] : nullptr;
        if (bc) bc->x = x;
        for (i64 i = 0; i < V; ++i) {
            Real ms = Real(0);
            const Real* xi = x.data() + i * C;
            for (i64 c = 0; c < C; ++c) ms += xi[c] * xi[c];
            const Real r = Real(1) / static_cast<Real>(std::sqrt(
                                static_cast<double>(ms) / static_cast<double>(C) +
                                detail::kRmsEps));
            rinv[static_cast<size_t>(i)] = r;
            for (i64 c = 0; c < C; ++c)
                u[static_cast<size_t>(i * C + c)] =
                    blk.norm_g.v[static_cast<size_t>(c)] * xi[c] * r;
        }
        if (bc) {
            bc->rinv = rinv;
            bc->u = u;
        }
        for (int d = 0; d < 3; ++d) {
            const auto& dir = blk.dirs[static_cast<size_t>(d)];
            const auto& perm = perms[static_cast<size_t>(d)];
            scan_order_gather<Real>(u, perm, C, useq);
            for (i64 t = 0; t < V; ++t) {
                const Real* ut = useq.data() + t * C;
                Real* wt = w.data() + t * C;
                for (i64 c = 0; c < C; ++c) {
                    Real acc = dir.in_b.v[static_cast<size_t>(c)];
                    const Real* row = dir.in_w.data() + c * C;
                    for (i64 i = 0; i < C; ++i) acc += row[i] * ut[i];
                    wt[c] = acc;
                }
            }
            std::fill(ybidir.begin(), ybidir.end(), Real(0));
            detail::selective_scan(dir.fwd, w.data(), V, C, n, false, ybidir.data(),
                                   bc ? &bc->dirs[static_cast<size_t>(d)].fwd : nullptr);
            detail::selective_scan(dir.bwd, w.data(), V, C, n, true, ybidir.data(),
                                   bc ? &bc->dirs[static_cast<size_t>(d)].bwd : nullptr);
            for (i64 t = 0; t < V; ++t) {
                const Real* yt = ybidir.data() + t * C;
                Real* pt = yproj.data() + t * C;
                for (i64 c = 0; c < C; ++c) {
                    Real acc = dir.out_b.v[static_cast<size_t>(c)];
                    const Real* row = dir.out_w.data() + c * C;
                    for (i64 i = 0; i < C; ++i) acc += row[i] * yt[i];
                    pt[c] = acc;
                }
            }
            for (i64 t = 0; t < V; ++t) {
                const i64 vi = perm[static_cast<size_t>(t)];
                for (i64 c = 0; c < C; ++c)
                    concat[static_cast<size_t>(vi * 3 * C + d * C + c)] =
                        yproj[static_cast<size_t>(t * C + c)];
            }
            if (bc) {
                auto& dc = bc->dirs[static_cast<size_t>(d)];
                dc.w = w;
                dc.ybidir = ybidir;
            }
        }
        if (bc) bc->concat = concat;
        for (i64 i = 0; i < V; ++i) {
            Real* xi = x.data() + i * C;
            const Real* ci = concat.data() + i * 3 * C;
            for (i64 c = 0; c < C; ++c) {
                Real acc = blk.fuse_b.v[static_cast<size_t>(c)];
                const Real* row = blk.fuse_w.data() + c * 3 * C;
                for (i64 k = 0; k < 3 * C; ++k) acc += row[k] * ci[k];
                xi[c] = add_residual(xi[c], acc);
            }
        }
    }
    if (ctx) ctx->feat_out = x;

    for (i64 i = 0; i < V; ++i) {
        Real acc = net.out_b.v[0];
        const Real* xi = x.data() + i * C;
        for (i64 c = 0; c < C; ++c) acc += net.out_w.v[static_cast<size_t>(c)] * xi[c];
        out[static_cast<size_t>(i)] = add_residual(v[static_cast<size_t>(i)], acc);
    }
    if (ctx) ctx->valid = true;
}

// Standalone wrapper for a single block application.
template <typename Real>
void tridir_block_forward(const TriDirBlockParams<Real>& blk, const TriDirConfig& cfg,
                          std::span<const Real> vol, std::array<i64, 3> shape,
                          std::span<Real> out) {
    cfg.validate();
    const i64 Z = shape[0], Y = shape[1], X = shape[2], C = cfg.channels;
    const i64 V = Z * Y * X;
    require(static_cast<i64>(vol.size()) == V * C, "tridir_block_forward: size mismatch");
    require(out.size() == vol.size(), "tridir_block_forward: output size mismatch");

    // run the block body directly: norm, three directions, fuse, residual
    std::array<std::vector<i64>, 3> perms = {
        scan_order_permutation(ScanOrder::xyz, Z, Y, X),
        scan_order_permutation(ScanOrder::yzx, Z, Y, X),
        scan_order_permutation(ScanOrder::zxy, Z, Y, X)};
    const i64 n = cfg.state_dim;
    std::vector<Real> u(static_cast<size_t>(V * C)), useq(u.size()), w(u.size()),
        ybidir(u.size()), yproj(u.size()), concat(static_cast<size_t>(V * 3 * C));
    for (i64 i = 0; i < V; ++i) {
        Real ms = Real(0);
        const Real* xi = vol.data() + i * C;
        for (i64 c = 0; c < C; ++c) ms += xi[c] * xi[c];
        const Real r = Real(1) / static_cast<Real>(std::sqrt(
                            static_cast<double>(ms) / static_cast<double>(C) +
                            detail::kRmsEps));
        for (i64 c = 0; c < C; ++c)
            u[static_cast<size_t>(i * C + c)] = blk.norm_g.v[static_cast<size_t>(c)] * xi[c] * r;
    }
    for (int d = 0; d < 3; ++d) {
        const auto& dir = blk.dirs[static_cast<size_t>(d)];
        const auto& perm = perms[static_cast<size_t>(d)];
        scan_order_gather<Real>(u, perm, C, useq);
        for (i64 t = 0; t < V; ++t) {
            const Real* ut = useq.data() + t * C;
            Real* wt = w.data() + t * C;
            for (i64 c = 0; c < C; ++c) {
                Real acc = dir.in_b.v[static_cast<size_t>(c)];
                const Real* row = dir.in_w.data() + c * C;
                for (i64 i = 0; i < C; ++i) acc += row[i] * ut[i];
                wt[c] = acc;
            }
        }
        std::fill(ybidir.begin(), ybidir.end(), Real(0));
        detail::selective_scan<Real>(dir.fwd, w.data(), V, C, n, false, ybidir.data(), nullptr);
        detail::selective_scan<Real>(dir.bwd, w.data(), V, C, n, true, ybidir.data(), nullptr);
        for (i64 t = 0; t < V; ++t) {
            const Real* yt = ybidir.data() + t * C;
            Real* pt = yproj.data() + t * C;
            for (i64 c = 0; c < C; ++c) {
                Real acc = dir.out_b.v[static_cast<size_t>(c)];
                const Real* row = dir.out_w.data() + c * C;
                for (i64 i = 0; i < C; ++i) acc += row[i] * yt[i];
                pt[c] = acc;
            }
        }
        for (i64 t = 0; t < V; ++t) {
            const i64 vi = perm[static_cast<size_t>(t)];
            for (i64 c = 0; c < C; ++c)
                concat[static_cast<size_t>(vi * 3 * C + d * C + c)] =
                    yproj[static_cast<size_t>(t * C + c)];
        }
    }
    for (i64 i = 0; i < V; ++i) {
        const Real* ci = concat.data() + i * 3 * C;
        for (i64 c = 0; c < C; ++c) {
            Real acc = blk.fuse_b.v[static_cast<size_t>(c)];
            const Real* row = blk.fuse_w.data() + c * 3 * C;
            for (i64 k = 0; k < 3 * C; ++k) acc += row[k] * ci[k];
            out[static_cast<size_t>(i * C + c)] =
                add_residual(vol[static_cast<size_t>(i * C + c)], acc);
        }
    }
}

// Normalized scalar volume in, same shape out; fresh nets return v bit-exactly.
template <typename Real>
void enhance_volume(const TriDirNetParams<Real>& net, std::span<const Real> v,
                    std::array<i64, 3> shape, std::span<Real> out,
                    TriDirContext<Real>* ctx = nullptr) {
    for (Real s : v)
        if (!(s >= Real(-1) && s <= Real(1)))
            throw UsageError("enhance_volume: input volume is not normalized to [-1, 1]");
    tridir_net_forward(net, v, shape, out, ctx);
}

// Parameter gradients for the whole net; upstream is d(loss)/d(output volume).
template <typename Real>
void tridir_backward(const TriDirNetParams<Real>& net, const TriDirContext<Real>& ctx,
                     std::span<const Real> upstream, TriDirNetParams<Real>& G) {
    require(ctx.valid, "tridir_backward: missing forward context");
    const i64 Z = ctx.shape[0], Y = ctx.shape[1], X = ctx.shape[2];
    const i64 V = Z * Y * X, C = net.cfg.channels, n = net.cfg.state_dim;
    require(static_cast<i64>(upstream.size()) == V, "tridir_backward: upstream size");

    std::array<std::vector<i64>, 3> perms = {
        scan_order_permutation(ScanOrder::xyz, Z, Y, X),
        scan_order_permutation(ScanOrder::yzx, Z, Y, X),
        scan_order_permutation(ScanOrder::zxy, Z, Y, X)};

    // output head
    std::vector<Real> dx(static_cast<size_t>(V * C));
    for (i64 i = 0; i < V; ++i) {
        const Real g = upstream[static_cast<size_t>(i)];
        G.out_b.v[0] += g;
        const Real* fi = ctx.feat_out.data() + i * C;
        Real* dxi = dx.data() + i * C;
        for (i64 c = 0; c < C; ++c) {
            G.out_w.v[static_cast<size_t>(c)] += g * fi[c];
            dxi[c] = g * net.out_w.v[static_cast<size_t>(c)];
        }
    }

    std::vector<Real> dconcat(static_cast<size_t>(V * 3 * C)), du(static_cast<size_t>(V * C)),
        duseq(static_cast<size_t>(V * C)), dw(static_cast<size_t>(V * C)),
        dyb(static_cast<size_t>(V * C)), dyproj(static_cast<size_t>(V * C));

    for (i64 b = net.cfg.blocks - 1; b >= 0; --b) {
        const auto& blk = net.blocks[static_cast<size_t>(b)];
        auto& gb = G.blocks[static_cast<size_t>(b)];
        const auto& bc = ctx.blocks[static_cast<size_t>(b)];

        // fusion: x_out = x_in + fuse(concat)
        std::fill(dconcat.begin(), dconcat.end(), Real(0));
        for (i64 i = 0; i < V; ++i) {
            const Real* dxi = dx.data() + i * C;
            const Real* ci = bc.concat.data() + i * 3 * C;
            Real* dci = dconcat.data() + i * 3 * C;
            for (i64 c = 0; c < C; ++c) {
                const Real g = dxi[c];
                gb.fuse_b.v[static_cast<size_t>(c)] += g;
                Real* grow = gb.fuse_w.data() + c * 3 * C;
                const Real* row = blk.fuse_w.data() + c * 3 * C;
                for (i64 k = 0; k < 3 * C; ++k) {
                    grow[k] += g * ci[k];
                    dci[k] += g * row[k];
                }
            }
        }

        std::fill(du.begin(), du.end(), Real(0));
        for (int d = 0; d < 3; ++d) {
            const auto& dir = blk.dirs[static_cast<size_t>(d)];
            auto& gd = gb.dirs[static_cast<size_t>(d)];
            const auto& dc = bc.dirs[static_cast<size_t>(d)];
            const auto& perm = perms[static_cast<size_t>(d)];
            // scatter transpose: sequence-order gradient of the projected output
            for (i64 t = 0; t < V; ++t) {
                const i64 vi = perm[static_cast<size_t>(t)];
                for (i64 c = 0; c < C; ++c)
                    dyproj[static_cast<size_t>(t * C + c)] =
                        dconcat[static_cast<size_t>(vi * 3 * C + d * C + c)];
            }
            // out projection
            std::fill(dyb.begin(), dyb.end(), Real(0));
            for (i64 t = 0; t < V; ++t) {
                const Real* yt = dc.ybidir.data() + t * C;
                const Real* dpt = dyproj.data() + t * C;
                Real* dyt = dyb.data() + t * C;
                for (i64 c = 0; c < C; ++c) {
                    const Real g = dpt[c];
                    gd.out_b.v[static_cast<size_t>(c)] += g;
                    Real* grow = gd.out_w.data() + c * C;
                    const Real* row = dir.out_w.data() + c * C;
                    for (i64 i = 0; i < C; ++i) {
                        grow[i] += g * yt[i];
                        dyt[i] += g * row[i];
                    }
                }
            }
            // both scan orientations
            std::fill(dw.begin(), dw.end(), Real(0));
            detail::selective_scan_bwd(dir.fwd, dc.w.data(), V, C, n, false, dc.fwd,
                                       dyb.data(), gd.fwd, dw.data());
            detail::selective_scan_bwd(dir.bwd, dc.w.data(), V, C, n, true, dc.bwd,
                                       dyb.data(), gd.bwd, dw.data());
            // in projection, then scatter-add back to voxel order
            scan_order_gather<Real>(bc.u, perm, C, duseq);  // reuse buffer: u in seq order
            for (i64 t = 0; t < V; ++t) {
                const Real* ut = duseq.data() + t * C;
                const Real* dwt = dw.data() + t * C;
                const i64 vi = perm[static_cast<size_t>(t)];
                Real* dui = du.data() + vi * C;
                for (i64 c = 0; c < C; ++c) {
                    const Real g = dwt[c];
                    gd.in_b.v[static_cast<size_t>(c)] += g;
                    Real* grow = gd.in_w.data() + c * C;
                    const Real* row = dir.in_w.data() + c * C;
                    for (i64 i = 0; i < C; ++i) {
                        grow[i] += g * ut[i];
                        dui[i] += g * row[i];
                    }
                }
            }
        }

        // rms norm: u = g * x * rinv, rinv = 1/sqrt(mean(x^2)+eps)
        for (i64 i = 0; i < V; ++i) {
            const Real* xi = bc.x.data() + i * C;
            const Real* dui = du.data() + i * C;
            Real* dxi = dx.data() + i * C;
            const Real r = bc.rinv[static_cast<size_t>(i)];
            Real dot = Real(0);
            for (i64 c = 0; c < C; ++c) {
                gb.norm_g.v[static_cast<size_t>(c)] += dui[c] * xi[c] * r;
                dot += dui[c] * blk.norm_g.v[static_cast<size_t>(c)] * xi[c];
            }
            const Real k = dot * r * r * r / static_cast<Real>(C);
            for (i64 c = 0; c < C; ++c)
                dxi[c] += blk.norm_g.v[static_cast<size_t>(c)] * r * dui[c] - k * xi[c];
        }
    }

    // lift
    for (i64 i = 0; i < V; ++i) {
        const Real* dxi = dx.data() + i * C;
        const Real vi = ctx.vin[static_cast<size_t>(i)];
        for (i64 c = 0; c < C; ++c) {
            G.lift_w.v[static_cast<size_t>(c)] += dxi[c] * vi;
            G.lift_b.v[static_cast<size_t>(c)] += dxi[c];
        }
    }
}

}  // namespace tssc

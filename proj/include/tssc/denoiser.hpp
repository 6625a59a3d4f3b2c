#pragma once

// Token-transformer eps-predictor. A stack of N noisy intermediate frames is
// patchified together with the two clean boundary frames, every token attends
// jointly over space and time, and the output projection maps intermediate
// tokens back to per-patch noise estimates. The output projection starts at
// zero so a fresh model predicts eps = 0 exactly.
//
// Reverse-mode gradients are implemented by hand; the context captured during
// the forward pass holds every intermediate the backward pass needs.

#include <span>
#include <string>
#include <vector>

#include "tssc/core.hpp"

namespace tssc {

struct DenoiserConfig {
    i64 height = 16;
    i64 width = 16;
    i64 patch = 4;
    i64 embed_dim = 32;
    i64 heads = 4;
    i64 depth = 2;
    i64 n_intermediate = 10;
    i64 max_t = 1000;

    i64 grid_h() const { return height / patch; }
    i64 grid_w() const { return width / patch; }
    i64 tokens_per_frame() const { return grid_h() * grid_w(); }
    i64 n_frames() const { return n_intermediate + 2; }
    i64 n_tokens() const { return n_frames() * tokens_per_frame(); }
    i64 head_dim() const { return embed_dim / heads; }
    i64 patch_dim() const { return patch * patch; }
    i64 frame_pixels() const { return height * width; }

    void validate() const {
        require(height > 0 && width > 0 && patch > 0, "denoiser: dims must be positive");
        require(height % patch == 0 && width % patch == 0,
                "denoiser: patch size must divide frame dims");
        require(embed_dim > 0 && heads > 0 && embed_dim % heads == 0,
                "denoiser: embed_dim must be a positive multiple of heads");
        require(embed_dim % 2 == 0, "denoiser: embed_dim must be even");
        require(depth >= 0, "denoiser: negative depth");
        require(n_intermediate >= 1, "denoiser: need at least one intermediate frame");
        require(max_t >= 1, "denoiser: max_t must be >= 1");
    }
};

template <typename Real>
struct DenoiserParams {
    DenoiserConfig cfg;
    Tensor<Real> patch_w, patch_b;          // [d, p^2], [d]
    Tensor<Real> pos_spatial, pos_temporal; // [S, d], [N+2, d]
    Tensor<Real> t_w, t_b;                  // [d, d], [d]
    struct Block {
        Tensor<Real> ln1_g, ln1_b;  // [d]
        Tensor<Real> qkv_w, qkv_b;  // [3d, d], [3d]
        Tensor<Real> ao_w, ao_b;    // [d, d], [d]
        Tensor<Real> ln2_g, ln2_b;  // [d]
        Tensor<Real> f1_w, f1_b;    // [4d, d], [4d]
        Tensor<Real> f2_w, f2_b;    // [d, 4d], [d]
    };
    std::vector<Block> blocks;
    Tensor<Real> lnf_g, lnf_b;  // [d]
    Tensor<Real> out_w, out_b;  // [p^2, d], [p^2]  (zero at init)

    template <typename Self, typename Fn>
    static void visit_impl(Self& self, Fn&& fn) {
        fn("patch_embed.w", self.patch_w);
        fn("patch_embed.b", self.patch_b);
        fn("pos.spatial", self.pos_spatial);
        fn("pos.temporal", self.pos_temporal);
        fn("t_proj.w", self.t_w);
        fn("t_proj.b", self.t_b);
        for (size_t b = 0; b < self.blocks.size(); ++b) {
            const std::string p = "block." + std::to_string(b) + ".";
            auto& blk = self.blocks[b];
            fn(p + "ln1.g", blk.ln1_g);
            fn(p + "ln1.b", blk.ln1_b);
            fn(p + "qkv.w", blk.qkv_w);
            fn(p + "qkv.b", blk.qkv_b);
            fn(p + "attn_out.w", blk.ao_w);
            fn(p + "attn_out.b", blk.ao_b);
            fn(p + "ln2.g", blk.ln2_g);
            fn(p + "ln2.b", blk.ln2_b);
            fn(p + "ffn1.w", blk.f1_w);
            fn(p + "ffn1.b", blk.f1_b);
            fn(p + "ffn2.w", blk.f2_w);
            fn(p + "ffn2.b", blk.f2_b);
        }
        fn("ln_final.g", self.lnf_g);
        fn("ln_final.b", self.lnf_b);
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

// All-zero parameter container with the right shapes (gradient buffers).
template <typename Real>
DenoiserParams<Real> make_denoiser_params(const DenoiserConfig& cfg) {
    cfg.validate();
    DenoiserParams<Real> p;
    p.cfg = cfg;
    const i64 d = cfg.embed_dim;
    p.patch_w = Tensor<Real>({d, cfg.patch_dim()});
    p.patch_b = Tensor<Real>({d});
    p.pos_spatial = Tensor<Real>({cfg.tokens_per_frame(), d});
    p.pos_temporal = Tensor<Real>({cfg.n_frames(), d});
    p.t_w = Tensor<Real>({d, d});
    p.t_b = Tensor<Real>({d});
    p.blocks.resize(static_cast<size_t>(cfg.depth));
    for (auto& b : p.blocks) {
        b.ln1_g = Tensor<Real>({d});
        b.ln1_b = Tensor<Real>({d});
        b.qkv_w = Tensor<Real>({3 * d, d});
        b.qkv_b = Tensor<Real>({3 * d});
        b.ao_w = Tensor<Real>({d, d});
        b.ao_b = Tensor<Real>({d});
        b.ln2_g = Tensor<Real>({d});
        b.ln2_b = Tensor<Real>({d});
        b.f1_w = Tensor<Real>({4 * d, d});
        b.f1_b = Tensor<Real>({4 * d});
        b.f2_w = Tensor<Real>({d, 4 * d});
        b.f2_b = Tensor<Real>({d});
    }
    p.lnf_g = Tensor<Real>({d});
    p.lnf_b = Tensor<Real>({d});
    p.out_w = Tensor<Real>({cfg.patch_dim(), d});
    p.out_b = Tensor<Real>({cfg.patch_dim()});
    return p;
}

// Random init, zero output projection, unit LayerNorm scales.
template <typename Real>
DenoiserParams<Real> init_denoiser_params(const DenoiserConfig& cfg, Rng& rng,
                                          double scale = 0.02) {
    auto p = make_denoiser_params<Real>(cfg);
    rng.fill_normal<Real>(std::span<Real>(p.patch_w.v), scale);
    rng.fill_normal<Real>(std::span<Real>(p.pos_spatial.v), scale);
    rng.fill_normal<Real>(std::span<Real>(p.pos_temporal.v), scale);
    rng.fill_normal<Real>(std::span<Real>(p.t_w.v), scale);
    for (auto& b : p.blocks) {
        b.ln1_g.fill(Real(1));
        b.ln2_g.fill(Real(1));
        rng.fill_normal<Real>(std::span<Real>(b.qkv_w.v), scale);
        rng.fill_normal<Real>(std::span<Real>(b.ao_w.v), scale);
        rng.fill_normal<Real>(std::span<Real>(b.f1_w.v), scale);
        rng.fill_normal<Real>(std::span<Real>(b.f2_w.v), scale);
    }
    p.lnf_g.fill(Real(1));
    return p;  // out_w/out_b stay zero
}

// ---------------------------------------------------------------------------
// Primitive layers
// ---------------------------------------------------------------------------

// Row-major patch grid: token s = gy*(W/p)+gx, pixel (py,px) at py*p+px.
template <typename Real>
void patchify(std::span<const Real> frame, i64 H, i64 W, i64 p, std::span<Real> tokens) {
    require(p > 0 && H % p == 0 && W % p == 0, "patchify: patch must divide dims");
    require(static_cast<i64>(frame.size()) == H * W, "patchify: frame size mismatch");
    require(tokens.size() == frame.size(), "patchify: token buffer size mismatch");
    const i64 gw = W / p;
    for (i64 gy = 0; gy < H / p; ++gy)
        for (i64 gx = 0; gx < gw; ++gx) {
            Real* tok = tokens.data() + (gy * gw + gx) * p * p;
            for (i64 py = 0; py < p; ++py)
                for (i64 px = 0; px < p; ++px)
                    tok[py * p + px] = frame[static_cast<size_t>((gy * p + py) * W + gx * p + px)];
        }
}

template <typename Real>
void unpatchify(std::span<const Real> tokens, i64 H, i64 W, i64 p, std::span<Real> frame) {
    require(p > 0 && H % p == 0 && W % p == 0, "unpatchify: patch must divide dims");
    require(static_cast<i64>(frame.size()) == H * W, "unpatchify: frame size mismatch");
    require(tokens.size() == frame.size(), "unpatchify: token buffer size mismatch");
    const i64 gw = W / p;
    for (i64 gy = 0; gy < H / p; ++gy)
        for (i64 gx = 0; gx < gw; ++gx) {
            const Real* tok = tokens.data() + (gy * gw + gx) * p * p;
            for (i64 py = 0; py < p; ++py)
                for (i64 px = 0; px < p; ++px)
                    frame[static_cast<size_t>((gy * p + py) * W + gx * p + px)] = tok[py * p + px];
        }
}

// Sinusoidal step embedding: sin(t w_i) | cos(t w_i), w_i = 10000^(-i/(dim/2)).
template <typename Real>
std::vector<Real> timestep_embedding(i64 t, i64 dim, i64 max_t) {
    require(t >= 1 && t <= max_t, "timestep_embedding: t outside 1..max_t");
    require(dim >= 2 && dim % 2 == 0, "timestep_embedding: dim must be even and >= 2");
    const i64 half = dim / 2;
    std::vector<Real> e(static_cast<size_t>(dim));
    for (i64 i = 0; i < half; ++i) {
        const double w = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                  static_cast<double>(half));
        e[static_cast<size_t>(i)] = static_cast<Real>(std::sin(static_cast<double>(t) * w));
        e[static_cast<size_t>(half + i)] =
            static_cast<Real>(std::cos(static_cast<double>(t) * w));
    }
    return e;
}

namespace detail {

// y[m] = W x[m] + b for M row-major feature rows; W is [O, I].
template <typename Real>
void linear_fwd(const Real* x, i64 M, i64 I, const Real* W, const Real* b, i64 O, Real* y) {
    for (i64 m = 0; m < M; ++m) {
        const Real* xm = x + m * I;
        Real* ym = y + m * O;
        for (i64 o = 0; o < O; ++o) {
            Real acc = b ? b[o] : Real(0);
            const Real* wo = W + o * I;
            for (i64 i = 0; i < I; ++i) acc += wo[i] * xm[i];
            ym[o] = acc;
        }
    }
}

// dW/db accumulate; dx assigned when non-null.
template <typename Real>
void linear_bwd(const Real* x, const Real* dy, i64 M, i64 I, i64 O, const Real* W, Real* dW,
                Real* db, Real* dx) {
    for (i64 m = 0; m < M; ++m) {
        const Real* xm = x + m * I;
        const Real* dym = dy + m * O;
        for (i64 o = 0; o < O; ++o) {
            const Real g = dym[o];
            if (db) db[o] += g;
            Real* dwo = dW + o * I;
            for (i64 i = 0; i < I; ++i) dwo[i] += g * xm[i];
        }
        if (dx) {
            Real* dxm = dx + m * I;
            for (i64 i = 0; i < I; ++i) dxm[i] = Real(0);
            for (i64 o = 0; o < O; ++o) {
                const Real g = dym[o];
                const Real* wo = W + o * I;
                for (i64 i = 0; i < I; ++i) dxm[i] += g * wo[i];
            }
        }
    }
}

inline constexpr double kLnEps = 1e-5;

template <typename Real>
void layernorm_fwd(const Real* x, i64 M, i64 D, const Real* g, const Real* b, Real* xhat,
                   Real* rstd, Real* y) {
    for (i64 m = 0; m < M; ++m) {
        const Real* xm = x + m * D;
        Real mean = Real(0);
        for (i64 i = 0; i < D; ++i) mean += xm[i];
        mean /= static_cast<Real>(D);
        Real var = Real(0);
        for (i64 i = 0; i < D; ++i) var += (xm[i] - mean) * (xm[i] - mean);
        var /= static_cast<Real>(D);
        const Real r = Real(1) / std::sqrt(var + static_cast<Real>(kLnEps));
        rstd[m] = r;
        Real* xh = xhat + m * D;
        Real* ym = y + m * D;
        for (i64 i = 0; i < D; ++i) {
            xh[i] = (xm[i] - mean) * r;
            ym[i] = g[i] * xh[i] + b[i];
        }
    }
}

// dx = r (dyg - mean(dyg) - xhat mean(dyg*xhat)), dyg = dy*gamma.
template <typename Real>
void layernorm_bwd(const Real* dy, const Real* xhat, const Real* rstd, i64 M, i64 D,
                   const Real* g, Real* dgamma, Real* dbeta, Real* dx) {
    std::vector<Real> dyg(static_cast<size_t>(D));
    for (i64 m = 0; m < M; ++m) {
        const Real* dym = dy + m * D;
        const Real* xh = xhat + m * D;
        Real s1 = Real(0), s2 = Real(0);
        for (i64 i = 0; i < D; ++i) {
            dgamma[i] += dym[i] * xh[i];
            dbeta[i] += dym[i];
            dyg[static_cast<size_t>(i)] = dym[i] * g[i];
            s1 += dyg[static_cast<size_t>(i)];
            s2 += dyg[static_cast<size_t>(i)] * xh[i];
        }
        s1 /= static_cast<Real>(D);
        s2 /= static_cast<Real>(D);
        Real* dxm = dx + m * D;
        for (i64 i = 0; i < D; ++i)
            dxm[i] = rstd[m] * (dyg[static_cast<size_t>(i)] - s1 - xh[i] * s2);
    }
}

// exact erf GELU
template <typename Real>
Real gelu(Real x) {
    const double xd = static_cast<double>(x);
    return static_cast<Real>(xd * 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0))));
}

template <typename Real>
Real gelu_grad(Real x) {
    const double xd = static_cast<double>(x);
    const double phi = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
    const double Phi = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
    return static_cast<Real>(Phi + xd * phi);
}

// softmax over the last axis of an [M, M] score block, in place
template <typename Real>
void softmax_rows(Real* s, i64 rows, i64 cols) {
    for (i64 r = 0; r < rows; ++r) {
        Real* row = s + r * cols;
        Real mx = row[0];
        for (i64 c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        Real sum = Real(0);
        for (i64 c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        const Real inv = Real(1) / sum;
        for (i64 c = 0; c < cols; ++c) row[c] *= inv;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename Real>
struct DenoiserContext {
    DenoiserConfig cfg;
    i64 t = 0;
    std::vector<Real> pix;    // [M, p^2]
    std::vector<Real> t_sin;  // [d]
    struct BlockCtx {
        std::vector<Real> xhat1, u1;   // [M, d]
        std::vector<Real> rstd1;       // [M]
        std::vector<Real> qkv;         // [M, 3d]
        std::vector<Real> probs;       // [heads, M, M]
        std::vector<Real> attn_ctx;    // [M, d]
        std::vector<Real> xhat2, u2;   // [M, d]
        std::vector<Real> rstd2;       // [M]
        std::vector<Real> h, g;        // [M, 4d]
    };
    std::vector<BlockCtx> blocks;
    std::vector<Real> xhatf, uf;  // [M, d]
    std::vector<Real> rstdf;      // [M]
    bool valid = false;
};

// x_noisy: N stacked (H, W) frames; eps_out same layout. Boundary-frame
// tokens join the attention sequence at temporal positions 0 and N+1 but
// produce no output. Pass ctx to retain intermediates for the backward pass.
template <typename Real>
void predict_eps(const DenoiserParams<Real>& P, std::span<const Real> x_noisy, i64 t,
                 std::span<const Real> I0, std::span<const Real> I1, std::span<Real> eps_out,
                 DenoiserContext<Real>* ctx = nullptr) {
    const DenoiserConfig& cfg = P.cfg;
    cfg.validate();
    const i64 d = cfg.embed_dim, S = cfg.tokens_per_frame(), M = cfg.n_tokens();
    const i64 pd = cfg.patch_dim(), F = cfg.n_frames(), N = cfg.n_intermediate;
    const i64 px = cfg.frame_pixels();
    require(static_cast<i64>(x_noisy.size()) == N * px, "predict_eps: x_noisy shape mismatch");
    require(static_cast<i64>(I0.size()) == px && static_cast<i64>(I1.size()) == px,
            "predict_eps: boundary frame shape mismatch");
    require(eps_out.size() == x_noisy.size(), "predict_eps: output shape mismatch");
    require(t >= 1 && t <= cfg.max_t, "predict_eps: t outside 1..max_t");

    std::vector<Real> pix(static_cast<size_t>(M * pd));
    for (i64 f = 0; f < F; ++f) {
        std::span<const Real> frame =
            f == 0 ? I0
                   : (f == F - 1 ? I1
                                 : x_noisy.subspan(static_cast<size_t>((f - 1) * px),
                                                   static_cast<size_t>(px)));
        patchify<Real>(frame, cfg.height, cfg.width, cfg.patch,
                       std::span<Real>(pix).subspan(static_cast<size_t>(f * S * pd),
                                                    static_cast<size_t>(S * pd)));
    }

    auto t_sin = timestep_embedding<Real>(t, d, cfg.max_t);
    std::vector<Real> t_emb(static_cast<size_t>(d));
    detail::linear_fwd(t_sin.data(), 1, d, P.t_w.data(), P.t_b.data(), d, t_emb.data());

    std::vector<Real> x(static_cast<size_t>(M * d));
    detail::linear_fwd(pix.data(), M, pd, P.patch_w.data(), P.patch_b.data(), d, x.data());
    for (i64 m = 0; m < M; ++m) {
        const i64 f = m / S, s = m % S;
        Real* xm = x.data() + m * d;
        const Real* ps = P.pos_spatial.data() + s * d;
        const Real* pt = P.pos_temporal.data() + f * d;
        for (i64 i = 0; i < d; ++i) xm[i] += ps[i] + pt[i] + t_emb[static_cast<size_t>(i)];
    }

    if (ctx) {
        ctx->cfg = cfg;
        ctx->t = t;
        ctx->pix = pix;
        ctx->t_sin = t_sin;
        ctx->blocks.assign(static_cast<size_t>(cfg.depth), {});
        ctx->valid = false;
    }

    const i64 dh = cfg.head_dim();
    const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Real> xhat(static_cast<size_t>(M * d)), u(static_cast<size_t>(M * d)),
        rstd(static_cast<size_t>(M)), qkv(static_cast<size_t>(M * 3 * d)),
        scores(static_cast<size_t>(M * M)), attn_ctx(static_cast<size_t>(M * d)),
        proj(static_cast<size_t>(M * d)), h(static_cast<size_t>(M * 4 * d)),
        g(static_cast<size_t>(M * 4 * d));

    for (i64 b = 0; b < cfg.depth; ++b) {
        const auto& blk = P.blocks[static_cast<size_t>(b)];
        detail::layernorm_fwd(x.data(), M, d, blk.ln1_g.data(), blk.ln1_b.data(), xhat.data(),
                              rstd.data(), u.data());
        detail::linear_fwd(u.data(), M, d, blk.qkv_w.data(), blk.qkv_b.data(), 3 * d,
                           qkv.data());
        if (ctx) {
            auto& bc = ctx->blocks[static_cast<size_t>(b)];
            bc.xhat1 = xhat;
            bc.u1 = u;
            bc.rstd1 = rstd;
            bc.qkv = qkv;
            bc.probs.resize(static_cast<size_t>(cfg.heads * M * M));
        }
        std::fill(attn_ctx.begin(), attn_ctx.end(), Real(0));
        for (i64 hd = 0; hd < cfg.heads; ++hd) {
            const i64 qo = hd * dh, ko = d + hd * dh, vo = 2 * d + hd * dh;
            for (i64 i = 0; i < M; ++i) {
                const Real* qi = qkv.data() + i * 3 * d + qo;
                for (i64 j = 0; j < M; ++j) {
                    const Real* kj = qkv.data() + j * 3 * d + ko;
                    Real acc = Real(0);
                    for (i64 c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    scores[static_cast<size_t>(i * M + j)] = acc * scale;
                }
            }
            detail::softmax_rows(scores.data(), M, M);
            if (ctx)
                std::copy(scores.begin(), scores.end(),
                          ctx->blocks[static_cast<size_t>(b)].probs.begin() + hd * M * M);
            for (i64 i = 0; i < M; ++i) {
                Real* out = attn_ctx.data() + i * d + qo;
                for (i64 j = 0; j < M; ++j) {
                    const Real p = scores[static_cast<size_t>(i * M + j)];
                    const Real* vj = qkv.data() + j * 3 * d + vo;
                    for (i64 c = 0; c < dh; ++c) out[c] += p * vj[c];
                }
            }
        }
        detail::linear_fwd(attn_ctx.data(), M, d, blk.ao_w.data(), blk.ao_b.data(), d,
                           proj.data());
        for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
        if (ctx) ctx->blocks[static_cast<size_t>(b)].attn_ctx = attn_ctx;

        detail::layernorm_fwd(x.data(), M, d, blk.ln2_g.data(), blk.ln2_b.data(), xhat.data(),
                              rstd.data(), u.data());
        detail::linear_fwd(u.data(), M, d, blk.f1_w.data(), blk.f1_b.data(), 4 * d, h.data());
        for (size_t i = 0; i < h.size(); ++i) g[i] = detail::gelu(h[i]);
        detail::linear_fwd(g.data(), M, 4 * d, blk.f2_w.data(), blk.f2_b.data(), d,
                           proj.data());
        for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
        if (ctx) {
            auto& bc = ctx->blocks[static_cast<size_t>(b)];
            bc.xhat2 = xhat;
            bc.u2 = u;
            bc.rstd2 = rstd;
            bc.h = h;
            bc.g = g;
        }
    }

    detail::layernorm_fwd(x.data(), M, d, P.lnf_g.data(), P.lnf_b.data(), xhat.data(),
                          rstd.data(), u.data());
    if (ctx) {
        ctx->xhatf = xhat;
        ctx->uf = u;
        ctx->rstdf = rstd;
    }

    std::vector<Real> tok_out(static_cast<size_t>(S * pd));
    for (i64 f = 1; f <= N; ++f) {
        detail::linear_fwd(u.data() + f * S * d, S, d, P.out_w.data(), P.out_b.data(), pd,
                           tok_out.data());
        unpatchify<Real>(tok_out, cfg.height, cfg.width, cfg.patch,
                         eps_out.subspan(static_cast<size_t>((f - 1) * px),
                                         static_cast<size_t>(px)));
    }
    if (ctx) ctx->valid = true;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Accumulates parameter gradients into `G` (caller zeroes between uses) and
// writes the gradient w.r.t. x_noisy into dx_noisy (assigned, not summed).
template <typename Real>
void denoiser_backward(const DenoiserParams<Real>& P, const DenoiserContext<Real>& C,
                       std::span<const Real> d_eps, DenoiserParams<Real>& G,
                       std::span<Real> dx_noisy) {
    require(C.valid, "denoiser_backward: missing forward context");
    const DenoiserConfig& cfg = C.cfg;
    const i64 d = cfg.embed_dim, S = cfg.tokens_per_frame(), M = cfg.n_tokens();
    const i64 pd = cfg.patch_dim(), N = cfg.n_intermediate, px = cfg.frame_pixels();
    require(static_cast<i64>(d_eps.size()) == N * px, "denoiser_backward: d_eps shape");
    require(dx_noisy.size() == d_eps.size(), "denoiser_backward: dx_noisy shape");

    // output projection
    std::vector<Real> dtok(static_cast<size_t>(S * pd));
    std::vector<Real> du(static_cast<size_t>(M * d), Real(0));
    for (i64 f = 1; f <= N; ++f) {
        patchify<Real>(d_eps.subspan(static_cast<size_t>((f - 1) * px),
                                     static_cast<size_t>(px)),
                       cfg.height, cfg.width, cfg.patch, dtok);
        detail::linear_bwd(C.uf.data() + f * S * d, dtok.data(), S, d, pd, P.out_w.data(),
                           G.out_w.data(), G.out_b.data(), du.data() + f * S * d);
    }

    // final LN
    std::vector<Real> dx(static_cast<size_t>(M * d));
    detail::layernorm_bwd(du.data(), C.xhatf.data(), C.rstdf.data(), M, d, P.lnf_g.data(),
                          G.lnf_g.data(), G.lnf_b.data(), dx.data());

    const i64 dh = cfg.head_dim();
    const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Real> dg(static_cast<size_t>(M * 4 * d)), dhh(static_cast<size_t>(M * 4 * d)),
        du2(static_cast<size_t>(M * d)), dres(static_cast<size_t>(M * d)),
        dctxv(static_cast<size_t>(M * d)), dqkv(static_cast<size_t>(M * 3 * d)),
        dp(static_cast<size_t>(M * M)), ds(static_cast<size_t>(M * M)),
        du1(static_cast<size_t>(M * d));

    for (i64 b = cfg.depth - 1; b >= 0; --b) {
        const auto& blk = P.blocks[static_cast<size_t>(b)];
        auto& gb = G.blocks[static_cast<size_t>(b)];
        const auto& bc = C.blocks[static_cast<size_t>(b)];

        // FFN branch: x += f2(gelu(f1(ln2(x))))
        detail::linear_bwd(bc.g.data(), dx.data(), M, 4 * d, d, blk.f2_w.data(),
                           gb.f2_w.data(), gb.f2_b.data(), dg.data());
        for (size_t i = 0; i < dg.size(); ++i)
            dhh[i] = dg[i] * detail::gelu_grad(bc.h[i]);
        detail::linear_bwd(bc.u2.data(), dhh.data(), M, d, 4 * d, blk.f1_w.data(),
                           gb.f1_w.data(), gb.f1_b.data(), du2.data());
        detail::layernorm_bwd(du2.data(), bc.xhat2.data(), bc.rstd2.data(), M, d,
                              blk.ln2_g.data(), gb.ln2_g.data(), gb.ln2_b.data(), dres.data());
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += dres[i];

        // attention branch: x += ao(attn(qkv(ln1(x))))
        detail::linear_bwd(bc.attn_ctx.data(), dx.data(), M, d, d, blk.ao_w.data(),
                           gb.ao_w.data(), gb.ao_b.data(), dctxv.data());
        std::fill(dqkv.begin(), dqkv.end(), Real(0));
        for (i64 hd = 0; hd < cfg.heads; ++hd) {
            const i64 qo = hd * dh, ko = d + hd * dh, vo = 2 * d + hd * dh;
            const Real* probs = bc.probs.data() + hd * M * M;
            // dP = dctx v^T ; dv = P^T dctx
            for (i64 i = 0; i < M; ++i) {
                const Real* dci = dctxv.data() + i * d + qo;
                for (i64 j = 0; j < M; ++j) {
                    const Real* vj = bc.qkv.data() + j * 3 * d + vo;
                    Real acc = Real(0);
                    for (i64 c = 0; c < dh; ++c) acc += dci[c] * vj[c];
                    dp[static_cast<size_t>(i * M + j)] = acc;
                }
            }
            for (i64 j = 0; j < M; ++j) {
                Real* dvj = dqkv.data() + j * 3 * d + vo;
                for (i64 i = 0; i < M; ++i) {
                    const Real p = probs[i * M + j];
                    const Real* dci = dctxv.data() + i * d + qo;
                    for (i64 c = 0; c < dh; ++c) dvj[c] += p * dci[c];
                }
            }
            // softmax rows: ds = P o (dP - rowsum(dP o P))
            for (i64 i = 0; i < M; ++i) {
                Real rs = Real(0);
                for (i64 j = 0; j < M; ++j)
                    rs += dp[static_cast<size_t>(i * M + j)] * probs[i * M + j];
                for (i64 j = 0; j < M; ++j)
                    ds[static_cast<size_t>(i * M + j)] =
                        probs[i * M + j] * (dp[static_cast<size_t>(i * M + j)] - rs);
            }
            // dq = scale ds K ; dk = scale ds^T Q
            for (i64 i = 0; i < M; ++i) {
                Real* dqi = dqkv.data() + i * 3 * d + qo;
                for (i64 j = 0; j < M; ++j) {
                    const Real sij = ds[static_cast<size_t>(i * M + j)] * scale;
                    const Real* kj = bc.qkv.data() + j * 3 * d + ko;
                    for (i64 c = 0; c < dh; ++c) dqi[c] += sij * kj[c];
                }
            }
            for (i64 j = 0; j < M; ++j) {
                Real* dkj = dqkv.data() + j * 3 * d + ko;
                for (i64 i = 0; i < M; ++i) {
                    const Real sij = ds[static_cast<size_t>(i * M + j)] * scale;
                    const Real* qi = bc.qkv.data() + i * 3 * d + qo;
                    for (i64 c = 0; c < dh; ++c) dkj[c] += sij * qi[c];
                }
            }
        }
        detail::linear_bwd(bc.u1.data(), dqkv.data(), M, d, 3 * d, blk.qkv_w.data(),
                           gb.qkv_w.data(), gb.qkv_b.data(), du1.data());
        detail::layernorm_bwd(du1.data(), bc.xhat1.data(), bc.rstd1.data(), M, d,
                              blk.ln1_g.data(), gb.ln1_g.data(), gb.ln1_b.data(), dres.data());
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += dres[i];
    }

    // embedding
    std::vector<Real> dtemb(static_cast<size_t>(d), Real(0));
    for (i64 m = 0; m < M; ++m) {
        const i64 f = m / S, s = m % S;
        const Real* dxm = dx.data() + m * d;
        Real* gps = G.pos_spatial.data() + s * d;
        Real* gpt = G.pos_temporal.data() + f * d;
        for (i64 i = 0; i < d; ++i) {
            gps[i] += dxm[i];
            gpt[i] += dxm[i];
            dtemb[static_cast<size_t>(i)] += dxm[i];
        }
    }
    detail::linear_bwd<Real>(C.t_sin.data(), dtemb.data(), 1, d, d, P.t_w.data(),
                             G.t_w.data(), G.t_b.data(), nullptr);

    std::vector<Real> dpix(static_cast<size_t>(M * pd));
    detail::linear_bwd(C.pix.data(), dx.data(), M, pd, d, P.patch_w.data(), G.patch_w.data(),
                       G.patch_b.data(), dpix.data());
    for (i64 f = 1; f <= N; ++f)
        unpatchify<Real>(std::span<const Real>(dpix).subspan(static_cast<size_t>(f * S * pd),
                                                             static_cast<size_t>(S * pd)),
                         cfg.height, cfg.width, cfg.patch,
                         dx_noisy.subspan(static_cast<size_t>((f - 1) * px),
                                          static_cast<size_t>(px)));
}

}  // namespace tssc

#include <catch2/catch_amalgamated.hpp>

#include "tssc/denoiser.hpp"

using namespace tssc;

namespace {

std::vector<double> randn(u64 seed, size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    Rng rng(seed);
    for (double& x : v) x = rng.normal() * scale;
    return v;
}

// Randomize every tensor including the output projection (tests that need a
// non-degenerate model).
template <typename Real>
DenoiserParams<Real> dense_params(const DenoiserConfig& cfg, u64 seed) {
    Rng rng(seed);
    auto p = init_denoiser_params<Real>(cfg, rng, 0.05);
    rng.fill_normal<Real>(std::span<Real>(p.out_w.v), 0.05);
    rng.fill_normal<Real>(std::span<Real>(p.out_b.v), 0.05);
    return p;
}

// Floor sits above central-difference noise (~eps*|L|/h): directions with a
// structurally zero gradient (e.g. the k-projection bias, which softmax row
// shift-invariance cancels exactly) would otherwise compare FD rounding noise
// against analytic zeros.
double max_rel_err(std::span<const double> got, std::span<const double> want,
                   double floor = 3e-5) {
    double m = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        const double denom = std::max({std::abs(got[i]), std::abs(want[i]), floor});
        m = std::max(m, std::abs(got[i] - want[i]) / denom);
    }
    return m;
}

}  // namespace

TEST_CASE("patchify shapes and round trip") {
    // 4x4 frame, p=2: 4 tokens of length 4
    std::vector<double> frame(16);
    for (size_t i = 0; i < 16; ++i) frame[i] = static_cast<double>(i);
    std::vector<double> tok(16);
    patchify<double>(frame, 4, 4, 2, tok);
    CHECK(tok[0] == 0.0);  // token 0 = rows 0-1, cols 0-1
    CHECK(tok[1] == 1.0);
    CHECK(tok[2] == 4.0);
    CHECK(tok[3] == 5.0);
    CHECK(tok[4] == 2.0);  // token 1 = rows 0-1, cols 2-3

    // p = H = W: one token equal to the flattened frame
    std::vector<double> one(16);
    patchify<double>(frame, 4, 4, 4, one);
    CHECK(one == frame);

    auto rnd = randn(5, 8 * 12);
    std::vector<double> t2(rnd.size()), back(rnd.size());
    patchify<double>(rnd, 8, 12, 4, t2);
    unpatchify<double>(t2, 8, 12, 4, back);
    CHECK(back == rnd);

    CHECK_THROWS_AS(patchify<double>(frame, 4, 4, 3, tok), UsageError);
}

TEST_CASE("timestep embedding is deterministic, separating, bounded") {
    auto a = timestep_embedding<double>(5, 16, 100);
    auto b = timestep_embedding<double>(5, 16, 100);
    CHECK(a == b);

    auto c = timestep_embedding<double>(1, 16, 100);
    auto e = timestep_embedding<double>(2, 16, 100);
    bool differ = false;
    for (size_t i = 0; i < c.size(); ++i) differ = differ || c[i] != e[i];
    CHECK(differ);

    double norm = 0.0;
    for (double x : a) norm += x * x;
    CHECK(std::sqrt(norm) <= std::sqrt(16.0) + 1e-12);

    CHECK_THROWS_AS(timestep_embedding<double>(0, 16, 100), UsageError);
    CHECK_THROWS_AS(timestep_embedding<double>(101, 16, 100), UsageError);
    CHECK_THROWS_AS(timestep_embedding<double>(5, 15, 100), UsageError);
}

TEST_CASE("fresh denoiser predicts exactly zero noise") {
    DenoiserConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.patch = 4;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.depth = 2;
    cfg.n_intermediate = 3;
    cfg.max_t = 100;
    Rng rng(1);
    auto p = init_denoiser_params<float>(cfg, rng);

    auto x = randn(2, static_cast<size_t>(cfg.n_intermediate * cfg.frame_pixels()));
    auto i0 = randn(3, static_cast<size_t>(cfg.frame_pixels()));
    auto i1 = randn(4, static_cast<size_t>(cfg.frame_pixels()));
    std::vector<float> xf(x.begin(), x.end()), i0f(i0.begin(), i0.end()),
        i1f(i1.begin(), i1.end());
    std::vector<float> out(xf.size(), 7.0f);
    predict_eps<float>(p, xf, 42, i0f, i1f, out);
    for (float v : out) CHECK(v == 0.0f);
}

TEST_CASE("forward pass is deterministic and shape-stable under width changes") {
    DenoiserConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.patch = 4;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.n_intermediate = 2;
    cfg.max_t = 50;

    auto x = randn(11, static_cast<size_t>(cfg.n_intermediate * cfg.frame_pixels()));
    auto i0 = randn(12, static_cast<size_t>(cfg.frame_pixels()));
    auto i1 = randn(13, static_cast<size_t>(cfg.frame_pixels()));

    auto p8 = dense_params<double>(cfg, 21);
    std::vector<double> a(x.size()), b(x.size());
    predict_eps<double>(p8, x, 7, i0, i1, a);
    predict_eps<double>(p8, x, 7, i0, i1, b);
    CHECK(a == b);

    auto wide = cfg;
    wide.embed_dim = 16;
    auto p16 = dense_params<double>(wide, 21);
    std::vector<double> c(x.size());
    predict_eps<double>(p16, x, 7, i0, i1, c);
    REQUIRE(c.size() == a.size());
    bool differ = false;
    for (size_t i = 0; i < c.size(); ++i) differ = differ || c[i] != a[i];
    CHECK(differ);
}

TEST_CASE("attention rows are stochastic") {
    DenoiserConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.patch = 4;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.depth = 2;
    cfg.n_intermediate = 2;
    cfg.max_t = 50;
    auto p = dense_params<double>(cfg, 31);

    auto x = randn(32, static_cast<size_t>(cfg.n_intermediate * cfg.frame_pixels()));
    auto i0 = randn(33, static_cast<size_t>(cfg.frame_pixels()));
    auto i1 = randn(34, static_cast<size_t>(cfg.frame_pixels()));
    std::vector<double> out(x.size());
    DenoiserContext<double> ctx;
    predict_eps<double>(p, x, 9, i0, i1, out, &ctx);

    const i64 M = cfg.n_tokens();
    for (const auto& bc : ctx.blocks)
        for (i64 h = 0; h < cfg.heads; ++h)
            for (i64 i = 0; i < M; ++i) {
                double row = 0.0;
                for (i64 j = 0; j < M; ++j) {
                    const double pr = bc.probs[static_cast<size_t>((h * M + i) * M + j)];
                    CHECK(pr >= 0.0);
                    row += pr;
                }
                CHECK(row == Catch::Approx(1.0).margin(1e-6));
            }
}

TEST_CASE("three-token config matches a hand-rolled attention oracle") {
    DenoiserConfig cfg;
    cfg.height = cfg.width = 2;
    cfg.patch = 2;  // one token per frame
    cfg.embed_dim = 4;
    cfg.heads = 1;
    cfg.depth = 1;
    cfg.n_intermediate = 1;
    cfg.max_t = 10;
    auto P = dense_params<double>(cfg, 77);

    auto xf = randn(71, 4), i0 = randn(72, 4), i1 = randn(73, 4);
    const i64 t = 3;
    std::vector<double> got(4);
    predict_eps<double>(P, xf, t, i0, i1, got);

    // oracle: direct evaluation with explicit loops, no shared helpers
    const i64 d = 4, M = 3;
    auto mat = [&](const Tensor<double>& W, const std::vector<double>& v, i64 O, i64 I) {
        std::vector<double> r(static_cast<size_t>(O), 0.0);
        for (i64 o = 0; o < O; ++o)
            for (i64 i = 0; i < I; ++i) r[static_cast<size_t>(o)] += W.v[static_cast<size_t>(o * I + i)] * v[static_cast<size_t>(i)];
        return r;
    };
    auto layernorm = [&](const std::vector<double>& v, const Tensor<double>& g,
                         const Tensor<double>& b) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size());
        const double r = 1.0 / std::sqrt(var + 1e-5);
        std::vector<double> o(v.size());
        for (size_t i = 0; i < v.size(); ++i)
            o[i] = g.v[i] * ((v[i] - mean) * r) + b.v[i];
        return o;
    };

    std::vector<double> tsin{std::sin(static_cast<double>(t)), std::sin(0.01 * t),
                             std::cos(static_cast<double>(t)), std::cos(0.01 * t)};
    auto temb = mat(P.t_w, tsin, d, d);
    for (i64 i = 0; i < d; ++i) temb[static_cast<size_t>(i)] += P.t_b.v[static_cast<size_t>(i)];

    std::vector<std::vector<double>> tok(3);
    const std::vector<double>* frames[3] = {&i0, &xf, &i1};
    for (int f = 0; f < 3; ++f) {
        tok[static_cast<size_t>(f)] = mat(P.patch_w, *frames[f], d, 4);
        for (i64 i = 0; i < d; ++i)
            tok[static_cast<size_t>(f)][static_cast<size_t>(i)] +=
                P.patch_b.v[static_cast<size_t>(i)] + P.pos_spatial.v[static_cast<size_t>(i)] +
                P.pos_temporal.v[static_cast<size_t>(f * d + i)] + temb[static_cast<size_t>(i)];
    }

    const auto& blk = P.blocks[0];
    std::vector<std::vector<double>> q(3), k(3), v(3);
    for (int f = 0; f < 3; ++f) {
        auto u = layernorm(tok[static_cast<size_t>(f)], blk.ln1_g, blk.ln1_b);
        auto qkv = mat(blk.qkv_w, u, 3 * d, d);
        for (i64 i = 0; i < 3 * d; ++i) qkv[static_cast<size_t>(i)] += blk.qkv_b.v[static_cast<size_t>(i)];
        q[static_cast<size_t>(f)] = {qkv.begin(), qkv.begin() + d};
        k[static_cast<size_t>(f)] = {qkv.begin() + d, qkv.begin() + 2 * d};
        v[static_cast<size_t>(f)] = {qkv.begin() + 2 * d, qkv.end()};
    }
    for (int i = 0; i < M; ++i) {
        double sc[3];
        double mx = -1e300;
        for (int j = 0; j < M; ++j) {
            double s = 0.0;
            for (i64 c = 0; c < d; ++c)
                s += q[static_cast<size_t>(i)][static_cast<size_t>(c)] *
                     k[static_cast<size_t>(j)][static_cast<size_t>(c)];
            sc[j] = s / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, sc[j]);
        }
        double Z = 0.0;
        for (int j = 0; j < M; ++j) {
            sc[j] = std::exp(sc[j] - mx);
            Z += sc[j];
        }
        std::vector<double> ctxv(static_cast<size_t>(d), 0.0);
        for (int j = 0; j < M; ++j)
            for (i64 c = 0; c < d; ++c)
                ctxv[static_cast<size_t>(c)] +=
                    (sc[j] / Z) * v[static_cast<size_t>(j)][static_cast<size_t>(c)];
        auto proj = mat(blk.ao_w, ctxv, d, d);
        for (i64 c = 0; c < d; ++c)
            tok[static_cast<size_t>(i)][static_cast<size_t>(c)] +=
                proj[static_cast<size_t>(c)] + blk.ao_b.v[static_cast<size_t>(c)];
    }
    for (int f = 0; f < 3; ++f) {
        auto u2 = layernorm(tok[static_cast<size_t>(f)], blk.ln2_g, blk.ln2_b);
        auto h = mat(blk.f1_w, u2, 4 * d, d);
        for (i64 i = 0; i < 4 * d; ++i) {
            h[static_cast<size_t>(i)] += blk.f1_b.v[static_cast<size_t>(i)];
            const double x0 = h[static_cast<size_t>(i)];
            h[static_cast<size_t>(i)] = x0 * 0.5 * (1.0 + std::erf(x0 / std::sqrt(2.0)));
        }
        auto y = mat(blk.f2_w, h, d, 4 * d);
        for (i64 i = 0; i < d; ++i)
            tok[static_cast<size_t>(f)][static_cast<size_t>(i)] +=
                y[static_cast<size_t>(i)] + blk.f2_b.v[static_cast<size_t>(i)];
    }
    auto uf = layernorm(tok[1], P.lnf_g, P.lnf_b);
    auto want = mat(P.out_w, uf, 4, d);
    for (i64 i = 0; i < 4; ++i) want[static_cast<size_t>(i)] += P.out_b.v[static_cast<size_t>(i)];

    for (size_t i = 0; i < 4; ++i) CHECK(got[i] == Catch::Approx(want[i]).margin(1e-10));
}

TEST_CASE("spatial permutation equivariance with zeroed positional embeddings") {
    DenoiserConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.patch = 4;  // 2x2 patch grid, S = 4
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.depth = 2;
    cfg.n_intermediate = 2;
    cfg.max_t = 50;
    auto P = dense_params<double>(cfg, 41);
    P.pos_spatial.fill(0.0);

    const i64 S = cfg.tokens_per_frame(), pd = cfg.patch_dim(), px = cfg.frame_pixels();
    std::vector<i64> perm{2, 0, 3, 1};

    auto permute_frame = [&](std::span<const double> f) {
        std::vector<double> tok(static_cast<size_t>(S * pd)), ptok(tok.size()),
            out(static_cast<size_t>(px));
        patchify<double>(f, cfg.height, cfg.width, cfg.patch, tok);
        for (i64 s = 0; s < S; ++s)
            std::copy_n(tok.data() + perm[static_cast<size_t>(s)] * pd, pd,
                        ptok.data() + s * pd);
        unpatchify<double>(ptok, cfg.height, cfg.width, cfg.patch, out);
        return out;
    };

    auto x = randn(42, static_cast<size_t>(cfg.n_intermediate * px));
    auto i0 = randn(43, static_cast<size_t>(px));
    auto i1 = randn(44, static_cast<size_t>(px));

    std::vector<double> xp(x.size());
    for (i64 f = 0; f < cfg.n_intermediate; ++f) {
        auto pf = permute_frame(std::span<const double>(x).subspan(
            static_cast<size_t>(f * px), static_cast<size_t>(px)));
        std::copy(pf.begin(), pf.end(), xp.begin() + f * px);
    }
    auto i0p = permute_frame(i0);
    auto i1p = permute_frame(i1);

    std::vector<double> out(x.size()), outp(x.size());
    predict_eps<double>(P, x, 5, i0, i1, out);
    predict_eps<double>(P, xp, 5, i0p, i1p, outp);

    for (i64 f = 0; f < cfg.n_intermediate; ++f) {
        auto want = permute_frame(std::span<const double>(out).subspan(
            static_cast<size_t>(f * px), static_cast<size_t>(px)));
        for (i64 i = 0; i < px; ++i)
            CHECK(outp[static_cast<size_t>(f * px + i)] ==
                  Catch::Approx(want[static_cast<size_t>(i)]).margin(1e-10));
    }
}

TEST_CASE("denoiser gradients match finite differences") {
    DenoiserConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.patch = 4;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.depth = 2;
    cfg.n_intermediate = 2;
    cfg.max_t = 50;
    auto P = dense_params<double>(cfg, 55);

    const size_t nx = static_cast<size_t>(cfg.n_intermediate * cfg.frame_pixels());
    auto x = randn(56, nx), i0 = randn(57, static_cast<size_t>(cfg.frame_pixels())),
         i1 = randn(58, static_cast<size_t>(cfg.frame_pixels()));
    auto R = randn(59, nx);  // fixed projection makes the loss a scalar
    const i64 t = 17;

    auto loss_of = [&](const DenoiserParams<double>& q) {
        std::vector<double> out(nx);
        predict_eps<double>(q, x, t, i0, i1, out);
        double L = 0.0;
        for (size_t i = 0; i < nx; ++i) L += out[i] * R[i];
        return L;
    };

    std::vector<double> out(nx);
    DenoiserContext<double> ctx;
    predict_eps<double>(P, x, t, i0, i1, out, &ctx);
    auto G = make_denoiser_params<double>(cfg);
    std::vector<double> dx(nx);
    denoiser_backward<double>(P, ctx, R, G, dx);

    const double h = 1e-5;
    double worst = 0.0;
    std::string worst_name;
    P.visit_tensors([&](const std::string& name, Tensor<double>& w) {
        Tensor<double>* gt = nullptr;
        G.visit_tensors([&](const std::string& gn, Tensor<double>& g) {
            if (gn == name) gt = &g;
        });
        REQUIRE(gt != nullptr);
        for (size_t i = 0; i < w.v.size(); ++i) {
            const double keep = w.v[i];
            w.v[i] = keep + h;
            const double fp = loss_of(P);
            w.v[i] = keep - h;
            const double fm = loss_of(P);
            w.v[i] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = gt->v[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 3e-5});
            if (rel > worst) {
                worst = rel;
                worst_name = name;
            }
        }
    });
    INFO("worst parameter group: " << worst_name);
    CHECK(worst < 1e-4);

    // input gradient
    std::vector<double> fd_x(nx);
    for (size_t i = 0; i < nx; ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        std::vector<double> o1(nx);
        predict_eps<double>(P, x, t, i0, i1, o1);
        double fp = 0.0;
        for (size_t j = 0; j < nx; ++j) fp += o1[j] * R[j];
        x[i] = keep - h;
        predict_eps<double>(P, x, t, i0, i1, o1);
        double fm = 0.0;
        for (size_t j = 0; j < nx; ++j) fm += o1[j] * R[j];
        x[i] = keep;
        fd_x[i] = (fp - fm) / (2.0 * h);
    }
    CHECK(max_rel_err(dx, fd_x) < 1e-4);
}

TEST_CASE("zero upstream gradient produces zero parameter gradients") {
    DenoiserConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.patch = 4;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.n_intermediate = 2;
    cfg.max_t = 50;
    auto P = dense_params<double>(cfg, 65);

    const size_t nx = static_cast<size_t>(cfg.n_intermediate * cfg.frame_pixels());
    auto x = randn(66, nx), i0 = randn(67, static_cast<size_t>(cfg.frame_pixels())),
         i1 = randn(68, static_cast<size_t>(cfg.frame_pixels()));
    std::vector<double> out(nx), zero(nx, 0.0), dx(nx);
    DenoiserContext<double> ctx;
    predict_eps<double>(P, x, 3, i0, i1, out, &ctx);
    auto G = make_denoiser_params<double>(cfg);
    denoiser_backward<double>(P, ctx, zero, G, dx);
    G.visit_tensors([&](const std::string&, Tensor<double>& g) {
        for (double v : g.v) CHECK(v == 0.0);
    });
    for (double v : dx) CHECK(v == 0.0);
}

TEST_CASE("constant-output model has zero input gradient") {
    DenoiserConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.patch = 4;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.n_intermediate = 2;
    cfg.max_t = 50;
    Rng rng(75);
    auto P = init_denoiser_params<double>(cfg, rng);  // zero out_w: output constant 0

    const size_t nx = static_cast<size_t>(cfg.n_intermediate * cfg.frame_pixels());
    auto x = randn(76, nx), i0 = randn(77, static_cast<size_t>(cfg.frame_pixels())),
         i1 = randn(78, static_cast<size_t>(cfg.frame_pixels()));
    auto R = randn(79, nx);
    std::vector<double> out(nx), dx(nx, 5.0);
    DenoiserContext<double> ctx;
    predict_eps<double>(P, x, 3, i0, i1, out, &ctx);
    auto G = make_denoiser_params<double>(cfg);
    denoiser_backward<double>(P, ctx, R, G, dx);
    for (double v : dx) CHECK(v == 0.0);

    DenoiserContext<double> dead;
    CHECK_THROWS_AS(denoiser_backward<double>(P, dead, R, G, dx), UsageError);
}

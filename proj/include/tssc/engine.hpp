#pragma once

// Two-stage orchestration: stage-1 diffusion training over 2D+t slices,
// DDIM sampling conditioned on boundary frames, stage-2 consistency training
// of the tri-directional net with stage 1 frozen, and the end-to-end
// pipeline. All training is single-writer; batch gradients fan out across
// workers and reduce in a fixed order, so results do not depend on --jobs.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <vector>

#include "tssc/checkpoint.hpp"
#include "tssc/config.hpp"
#include "tssc/core.hpp"
#include "tssc/denoiser.hpp"
#include "tssc/losses.hpp"
#include "tssc/schedule.hpp"
#include "tssc/ssm.hpp"
#include "tssc/synthetic.hpp"
#include "tssc/volume.hpp"

namespace tssc {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamOpts {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename P>
struct AdamState {
    P m, v;
    i64 step = 0;
};

template <typename P>
AdamState<P> make_adam_state(const P& like) {
    AdamState<P> st{like, like, 0};
    st.m.visit_tensors([](const std::string&, auto& t) { t.fill(0); });
    st.v.visit_tensors([](const std::string&, auto& t) { t.fill(0); });
    return st;
}

// Standard Adam with bias correction. Moments and the update are computed in
// double and stored back at parameter precision. Tensors are matched by the
// names visit_tensors reports, which are unique within a parameter struct.
template <typename P>
void adam_step(P& params, const P& grads, AdamState<P>& st, double lr,
               const AdamOpts& opt = {}) {
    st.step += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));

    params.visit_tensors([&](const std::string& name, auto& tp) {
        using TensorT = std::remove_reference_t<decltype(tp)>;
        const TensorT* tg = nullptr;
        grads.visit_tensors([&](const std::string& n, const TensorT& t) {
            if (n == name) tg = &t;
        });
        TensorT* tm = nullptr;
        st.m.visit_tensors([&](const std::string& n, TensorT& t) {
            if (n == name) tm = &t;
        });
        TensorT* tv = nullptr;
        st.v.visit_tensors([&](const std::string& n, TensorT& t) {
            if (n == name) tv = &t;
        });
        require(tg && tm && tv, "adam_step: missing tensor " + name);
        require(tg->v.size() == tp.v.size() && tm->v.size() == tp.v.size() &&
                    tv->v.size() == tp.v.size(),
                "adam_step: shape mismatch for " + name);
        using Real = typename decltype(tp.v)::value_type;
        for (size_t k = 0; k < tp.v.size(); ++k) {
            const double g = static_cast<double>(tg->v[k]);
            if (!std::isfinite(g))
                throw NumericError("adam_step: non-finite gradient in " + name);
            const double m = opt.beta1 * static_cast<double>(tm->v[k]) + (1.0 - opt.beta1) * g;
            const double v =
                opt.beta2 * static_cast<double>(tv->v[k]) + (1.0 - opt.beta2) * g * g;
            tm->v[k] = static_cast<Real>(m);
            tv->v[k] = static_cast<Real>(v);
            const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps);
            tp.v[k] = static_cast<Real>(static_cast<double>(tp.v[k]) - update);
        }
    });
}

// stage 1: fixed rate; stage 2: linear decay from base to zero at `total`
inline double lr_schedule(int stage, i64 step, i64 total, double base = 1e-4) {
    require(stage == 1 || stage == 2, "lr_schedule: stage must be 1 or 2");
    require(total >= 1, "lr_schedule: total must be >= 1");
    require(step >= 0 && step <= total, "lr_schedule: step outside 0..total");
    if (stage == 1) return base;
    return base * (1.0 - static_cast<double>(step) / static_cast<double>(total));
}

// ---------------------------------------------------------------------------
// Dataset plumbing
// ---------------------------------------------------------------------------

struct PreparedCases {
    std::vector<Volume4D> norm_truth;
    std::vector<Volume4D> norm_misaligned;
};

inline PreparedCases prepare_cases(const std::vector<SyntheticCase>& cases) {
    require(!cases.empty(), "prepare_cases: empty dataset");
    PreparedCases out;
    for (const auto& c : cases) {
        out.norm_truth.push_back(normalize_volume(c.truth));
        out.norm_misaligned.push_back(normalize_volume(c.misaligned));
    }
    return out;
}

inline std::vector<Slice2Dt> stage1_slices(const std::vector<Volume4D>& norm_cases) {
    std::vector<Slice2Dt> out;
    for (const auto& v : norm_cases)
        for (i64 z = 0; z < v.depth(); ++z) out.push_back(slice_to_2dt(v, z));
    require(!out.empty(), "stage1_slices: no slices");
    return out;
}

// ---------------------------------------------------------------------------
// Stage 1: diffusion training over 2D+t slices
// ---------------------------------------------------------------------------

class Stage1Trainer {
  public:
    EngineConfig cfg;
    NoiseSchedule sched;
    DenoiserParams<float> params;
    AdamState<DenoiserParams<float>> opt;
    Rng rng;
    i64 step = 0;

    explicit Stage1Trainer(const EngineConfig& c)
        : cfg(c), sched(c.schedule()), rng(derive_seed(c.seed, 1)) {
        cfg.validate();
        params = init_denoiser_params<float>(cfg.denoiser, rng);
        opt = make_adam_state(params);
    }

    // Advances n_steps more steps. Appends "step,loss,lr" rows to csv and the
    // per-step losses to `losses` when given.
    void run(const std::vector<Slice2Dt>& data, i64 n_steps, std::ostream* csv = nullptr,
             std::vector<double>* losses = nullptr) {
        require(!data.empty(), "train_stage1: empty dataset");
        const DenoiserConfig& dc = cfg.denoiser;
        const i64 N = dc.n_intermediate, px = dc.frame_pixels();
        for (const auto& s : data) {
            require(s.frames() >= N + 2,
                    "train_stage1: sequences need at least n_intermediate + 2 frames");
            require(s.height() == dc.height && s.width() == dc.width,
                    "train_stage1: slice shape does not match the denoiser config");
        }
        const i64 B = cfg.batch_size;

        struct Draw {
            i64 case_idx;
            i64 t;
            std::vector<float> eps;
        };
        std::vector<Draw> draws(static_cast<size_t>(B));
        std::vector<DenoiserParams<float>> grads(
            static_cast<size_t>(B), make_denoiser_params<float>(dc));
        std::vector<double> batch_loss(static_cast<size_t>(B));

        for (i64 s = 0; s < n_steps; ++s) {
            const double lr = lr_schedule(1, 0, 1, cfg.lr);
            // all randomness is drawn up front so worker count cannot matter
            for (i64 b = 0; b < B; ++b) {
                auto& dr = draws[static_cast<size_t>(b)];
                dr.case_idx = rng.uniform_int(0, static_cast<i64>(data.size()) - 1);
                dr.t = rng.uniform_int(1, cfg.T);
                dr.eps.resize(static_cast<size_t>(N * px));
                rng.fill_normal<float>(std::span<float>(dr.eps));
            }
            parallel_for(B, cfg.jobs, [&](i64 b) {
                const auto& dr = draws[static_cast<size_t>(b)];
                const Slice2Dt& sl = data[static_cast<size_t>(dr.case_idx)];
                std::span<const float> I0 = sl.frame(0), I1 = sl.frame(N + 1);
                std::vector<float> x0(static_cast<size_t>(N * px));
                for (i64 f = 0; f < N; ++f) {
                    auto fr = sl.frame(f + 1);
                    std::copy(fr.begin(), fr.end(), x0.begin() + f * px);
                }
                std::vector<float> x_noisy(x0.size()), eps_hat(x0.size());
                q_sample<float>(sched, dr.t, x0, dr.eps, x_noisy);
                DenoiserContext<float> ctx;
                predict_eps<float>(params, x_noisy, dr.t, I0, I1, eps_hat, &ctx);
                batch_loss[static_cast<size_t>(b)] = eps_loss<float>(eps_hat, dr.eps);
                std::vector<float> d_eps(x0.size());
                const double scale =
                    2.0 / (static_cast<double>(x0.size()) * static_cast<double>(B));
                for (size_t i = 0; i < d_eps.size(); ++i)
                    d_eps[i] = static_cast<float>(
                        (static_cast<double>(eps_hat[i]) - static_cast<double>(dr.eps[i])) *
                        scale);
                auto& G = grads[static_cast<size_t>(b)];
                G.visit_tensors([](const std::string&, auto& t) { t.fill(0); });
                std::vector<float> dx(x0.size());
                denoiser_backward<float>(params, ctx, d_eps, G, dx);
            });
            // fixed-order reduction into grads[0]
            auto& G = grads[0];
            for (i64 b = 1; b < B; ++b) {
                auto& Gb = grads[static_cast<size_t>(b)];
                auto* gptr = &Gb;
                G.visit_tensors([&](const std::string& name, Tensor<float>& t) {
                    gptr->visit_tensors([&](const std::string& n2, Tensor<float>& t2) {
                        if (n2 != name) return;
                        for (size_t k = 0; k < t.v.size(); ++k) t.v[k] += t2.v[k];
                    });
                });
            }
            double loss = 0.0;
            for (i64 b = 0; b < B; ++b) loss += batch_loss[static_cast<size_t>(b)];
            loss /= static_cast<double>(B);
            if (!std::isfinite(loss)) throw NumericError("train_stage1: non-finite loss");
            adam_step(params, G, opt, lr, {cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
            ++step;
            if (csv) {
                char row[96];
                std::snprintf(row, sizeof row, "%lld,%.10g,%.10g\n",
                              static_cast<long long>(step), loss, lr);
                (*csv) << row;
            }
            if (losses) losses->push_back(loss);
        }
    }

    void save(const std::filesystem::path& base) const {
        nlohmann::json extra;
        extra["step"] = step;
        extra["rng"] = rng.state();
        extra["adam_step"] = opt.step;
        save_checkpoint<DenoiserParams<float>>(
            base, "stage1", {{"param", &params}, {"adam.m", &opt.m}, {"adam.v", &opt.v}},
            extra);
    }

    void load(const std::filesystem::path& base) {
        auto extra = load_checkpoint<DenoiserParams<float>>(
            base, "stage1", {{"param", &params}, {"adam.m", &opt.m}, {"adam.v", &opt.v}});
        step = extra.value("step", i64(0));
        opt.step = extra.value("adam_step", i64(0));
        if (extra.contains("rng")) rng.set_state(extra["rng"].get<std::string>());
    }
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Draws x_T ~ N(0,1) for the N intermediate frames and walks the DDIM plan
// down to t = 0 conditioned on (I0, I1). Output is clamped to [-1, 1];
// pre_clamp (when given) receives the unclamped frames.
inline std::vector<float> sample_sequence(const DenoiserParams<float>& P,
                                          const NoiseSchedule& ns, const DdimPlan& plan,
                                          std::span<const float> I0, std::span<const float> I1,
                                          Rng& rng, std::vector<float>* pre_clamp = nullptr) {
    const DenoiserConfig& dc = P.cfg;
    const i64 N = dc.n_intermediate, px = dc.frame_pixels();
    require(static_cast<i64>(I0.size()) == px && static_cast<i64>(I1.size()) == px,
            "sample_sequence: boundary frame shape mismatch");
    require(!plan.taus.empty() && plan.taus.back() == ns.T,
            "sample_sequence: plan must end at T");

    std::vector<float> x(static_cast<size_t>(N * px));
    rng.fill_normal<float>(std::span<float>(x));
    std::vector<float> eps_hat(x.size()), noise(x.size(), 0.0f), next(x.size());
    for (i64 i = static_cast<i64>(plan.taus.size()) - 1; i >= 0; --i) {
        const i64 t = plan.taus[static_cast<size_t>(i)];
        const i64 t_prev = i > 0 ? plan.taus[static_cast<size_t>(i - 1)] : 0;
        predict_eps<float>(P, x, t, I0, I1, eps_hat);
        if (plan.eta > 0.0 && t_prev > 0)
            rng.fill_normal<float>(std::span<float>(noise));
        else
            std::fill(noise.begin(), noise.end(), 0.0f);
        ddim_step<float>(ns, t, t_prev, x, eps_hat, plan.eta, noise, next);
        x.swap(next);
    }
    if (pre_clamp) *pre_clamp = x;
    for (auto& s : x) s = std::min(1.0f, std::max(-1.0f, s));
    return x;
}

// ---------------------------------------------------------------------------
// Stage 2: consistency training with stage 1 frozen
// ---------------------------------------------------------------------------

struct Stage2Case {
    // one entry per intermediate frame: normalized (Z, Y, X) volumes
    std::vector<std::vector<float>> inputs;
    std::vector<std::vector<float>> targets;
};

struct Stage2Data {
    std::array<i64, 3> shape{0, 0, 0};
    std::vector<Stage2Case> train, val;
};

// Samples every z-slice of every case once and reassembles per-frame 3D
// volumes. Stage 1 is frozen, so the samples are fixed for all epochs and
// are generated eagerly with per-case derived seeds.
inline Stage2Data build_stage2_data_sampled(const EngineConfig& cfg,
                                            const DenoiserParams<float>& den,
                                            const std::vector<Volume4D>& norm_truth,
                                            i64 n_val) {
    require(!norm_truth.empty(), "stage2 data: empty dataset");
    require(n_val >= 0 && n_val < static_cast<i64>(norm_truth.size()),
            "stage2 data: bad validation split");
    const NoiseSchedule ns = cfg.schedule();
    const DdimPlan plan = make_ddim_plan(ns, cfg.ddim_steps, cfg.eta);
    const i64 N = cfg.denoiser.n_intermediate;

    Stage2Data out;
    const Volume4D& first = norm_truth.front();
    out.shape = {first.depth(), first.height(), first.width()};
    const i64 Z = out.shape[0], Y = out.shape[1], X = out.shape[2];
    const i64 px = Y * X;

    for (size_t ci = 0; ci < norm_truth.size(); ++ci) {
        const Volume4D& v = norm_truth[ci];
        require(v.frames() == N + 2, "stage2 data: case frame count mismatch");
        require(v.depth() == Z && v.height() == Y && v.width() == X,
                "stage2 data: case shape mismatch");
        std::vector<std::vector<float>> zsamples(static_cast<size_t>(Z));
        std::vector<u64> seeds(static_cast<size_t>(Z));
        for (i64 z = 0; z < Z; ++z)
            seeds[static_cast<size_t>(z)] =
                derive_seed(derive_seed(cfg.seed, 1000 + static_cast<u64>(ci)),
                            static_cast<u64>(z));
        parallel_for(Z, cfg.jobs, [&](i64 z) {
            Rng zrng(seeds[static_cast<size_t>(z)]);
            auto I0 = v.frame(0).subspan(static_cast<size_t>(z * px), static_cast<size_t>(px));
            auto I1 =
                v.frame(N + 1).subspan(static_cast<size_t>(z * px), static_cast<size_t>(px));
            zsamples[static_cast<size_t>(z)] = sample_sequence(den, ns, plan, I0, I1, zrng);
        });
        Stage2Case sc;
        for (i64 f = 1; f <= N; ++f) {
            std::vector<float> input(static_cast<size_t>(Z * px));
            for (i64 z = 0; z < Z; ++z) {
                const float* src = zsamples[static_cast<size_t>(z)].data() + (f - 1) * px;
                std::copy(src, src + px, input.begin() + z * px);
            }
            auto truth = v.frame(f);
            sc.inputs.push_back(std::move(input));
            sc.targets.emplace_back(truth.begin(), truth.end());
        }
        const bool is_val = static_cast<i64>(ci) >= static_cast<i64>(norm_truth.size()) - n_val;
        (is_val ? out.val : out.train).push_back(std::move(sc));
    }
    if (out.val.empty()) out.val = out.train;
    return out;
}

// Enhancement-only variant: inputs are the misaligned volumes themselves.
inline Stage2Data build_stage2_data_direct(const std::vector<Volume4D>& norm_inputs,
                                           const std::vector<Volume4D>& norm_truth,
                                           i64 n_val) {
    require(norm_inputs.size() == norm_truth.size() && !norm_truth.empty(),
            "stage2 data: input/truth case count mismatch");
    require(n_val >= 0 && n_val < static_cast<i64>(norm_truth.size()),
            "stage2 data: bad validation split");
    Stage2Data out;
    const Volume4D& first = norm_truth.front();
    out.shape = {first.depth(), first.height(), first.width()};
    for (size_t ci = 0; ci < norm_truth.size(); ++ci) {
        const Volume4D& in = norm_inputs[ci];
        const Volume4D& tr = norm_truth[ci];
        require(in.meta.shape == tr.meta.shape, "stage2 data: shape mismatch");
        Stage2Case sc;
        for (i64 f = 1; f < tr.frames() - 1; ++f) {
            auto fi = in.frame(f);
            auto ft = tr.frame(f);
            sc.inputs.emplace_back(fi.begin(), fi.end());
            sc.targets.emplace_back(ft.begin(), ft.end());
        }
        const bool is_val = static_cast<i64>(ci) >= static_cast<i64>(norm_truth.size()) - n_val;
        (is_val ? out.val : out.train).push_back(std::move(sc));
    }
    if (out.val.empty()) out.val = out.train;
    return out;
}

class Stage2Trainer {
  public:
    EngineConfig cfg;
    TriDirNetParams<float> net;
    AdamState<TriDirNetParams<float>> opt;
    Rng rng;
    i64 step = 0;

    explicit Stage2Trainer(const EngineConfig& c) : cfg(c), rng(derive_seed(c.seed, 2)) {
        cfg.validate();
        net = init_tridir_params<float>(cfg.tridir, rng);
        opt = make_adam_state(net);
    }

    ScLossBreakdown validate(const Stage2Data& data) const {
        require(!data.val.empty(), "stage2 validate: no validation cases");
        ScLossBreakdown mean;
        i64 count = 0;
        std::vector<float> enh;
        for (const auto& c : data.val)
            for (size_t f = 0; f < c.inputs.size(); ++f) {
                enh.resize(c.inputs[f].size());
                tridir_net_forward<float>(net, c.inputs[f], data.shape,
                                          std::span<float>(enh));
                const auto br = composite_sc_loss<float>(enh, c.targets[f], data.shape,
                                                         cfg.loss_weights, cfg.wavelet_levels);
                mean.mse += br.mse;
                mean.wavelet += br.wavelet;
                mean.tv += br.tv;
                mean.total += br.total;
                ++count;
            }
        mean.mse /= static_cast<double>(count);
        mean.wavelet /= static_cast<double>(count);
        mean.tv /= static_cast<double>(count);
        mean.total /= static_cast<double>(count);
        return mean;
    }

    // One Adam step per training case per epoch; lr decays linearly to zero
    // over the whole run. CSV rows: step,mse,wavelet,tv,total.
    void run_epochs(const Stage2Data& data, i64 epochs, std::ostream* csv = nullptr,
                    std::vector<ScLossBreakdown>* val_log = nullptr) {
        require(!data.train.empty(), "train_stage2: no training cases");
        require(epochs >= 0, "train_stage2: negative epoch count");
        const i64 total = std::max<i64>(1, epochs * static_cast<i64>(data.train.size()));
        auto G = make_tridir_params<float>(cfg.tridir);
        std::vector<float> enh, up, gvol;
        if (val_log) val_log->push_back(validate(data));
        for (i64 e = 0; e < epochs; ++e) {
            for (const auto& c : data.train) {
                const double lr = lr_schedule(2, step, total, cfg.lr);
                G.visit_tensors([](const std::string&, auto& t) { t.fill(0); });
                ScLossBreakdown mean;
                const double inv = 1.0 / static_cast<double>(c.inputs.size());
                for (size_t f = 0; f < c.inputs.size(); ++f) {
                    enh.resize(c.inputs[f].size());
                    TriDirContext<float> ctx;
                    tridir_net_forward<float>(net, c.inputs[f], data.shape,
                                              std::span<float>(enh), &ctx);
                    const auto br = composite_sc_loss<float>(
                        enh, c.targets[f], data.shape, cfg.loss_weights, cfg.wavelet_levels);
                    mean.mse += br.mse * inv;
                    mean.wavelet += br.wavelet * inv;
                    mean.tv += br.tv * inv;
                    mean.total += br.total * inv;
                    up.resize(enh.size());
                    composite_sc_loss_grad<float>(enh, c.targets[f], data.shape,
                                                  cfg.loss_weights, cfg.wavelet_levels,
                                                  std::span<float>(up));
                    for (auto& g : up) g = static_cast<float>(g * inv);
                    tridir_backward<float>(net, ctx, up, G);
                }
                if (!std::isfinite(mean.total))
                    throw NumericError("train_stage2: non-finite loss");
                adam_step(net, G, opt, lr, {cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
                ++step;
                if (csv) {
                    char row[160];
                    std::snprintf(row, sizeof row, "%lld,%.10g,%.10g,%.10g,%.10g\n",
                                  static_cast<long long>(step), mean.mse, mean.wavelet,
                                  mean.tv, mean.total);
                    (*csv) << row;
                }
            }
            if (val_log) val_log->push_back(validate(data));
        }
    }

    void save(const std::filesystem::path& base) const {
        nlohmann::json extra;
        extra["step"] = step;
        extra["rng"] = rng.state();
        extra["adam_step"] = opt.step;
        save_checkpoint<TriDirNetParams<float>>(
            base, "stage2", {{"param", &net}, {"adam.m", &opt.m}, {"adam.v", &opt.v}}, extra);
    }

    void load(const std::filesystem::path& base) {
        auto extra = load_checkpoint<TriDirNetParams<float>>(
            base, "stage2", {{"param", &net}, {"adam.m", &opt.m}, {"adam.v", &opt.v}});
        step = extra.value("step", i64(0));
        opt.step = extra.value("adam_step", i64(0));
        if (extra.contains("rng")) rng.set_state(extra["rng"].get<std::string>());
    }
};

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

// input: >= 2 frames; the first and last are I0/I1 and pass through to output
// slots 0 and N+1 verbatim. Intermediates are sampled per z-slice, reassembled,
// enhanced, and mapped back to the input intensity range when the input was
// not already normalized.
inline Volume4D run_pipeline(const EngineConfig& cfg, const DenoiserParams<float>& den,
                             const TriDirNetParams<float>& net, const Volume4D& input,
                             Rng& rng) {
    input.validate();
    require(input.frames() >= 2, "run_pipeline: need at least the two boundary frames");
    const i64 Z = input.depth(), Y = input.height(), X = input.width();
    require(Y == cfg.denoiser.height && X == cfg.denoiser.width,
            "run_pipeline: input slice shape does not match the denoiser config");
    const i64 N = cfg.denoiser.n_intermediate, px = Y * X;

    const bool was_normalized = input.meta.normalized;
    Volume4D norm = was_normalized ? input : normalize_volume(input);

    const NoiseSchedule ns = cfg.schedule();
    const DdimPlan plan = make_ddim_plan(ns, cfg.ddim_steps, cfg.eta);

    std::vector<std::vector<float>> zsamples(static_cast<size_t>(Z));
    std::vector<u64> seeds(static_cast<size_t>(Z));
    for (i64 z = 0; z < Z; ++z)
        seeds[static_cast<size_t>(z)] = derive_seed(rng.next_u64(), static_cast<u64>(z));
    parallel_for(Z, cfg.jobs, [&](i64 z) {
        Rng zrng(seeds[static_cast<size_t>(z)]);
        auto I0 = norm.frame(0).subspan(static_cast<size_t>(z * px), static_cast<size_t>(px));
        auto I1 = norm.frame(norm.frames() - 1)
                      .subspan(static_cast<size_t>(z * px), static_cast<size_t>(px));
        zsamples[static_cast<size_t>(z)] = sample_sequence(den, ns, plan, I0, I1, zrng);
    });

    Volume4D out = make_volume({N + 2, Z, Y, X});
    out.meta.normalized = input.meta.normalized;
    out.meta.spacing = input.meta.spacing;
    out.meta.intensity_range = input.meta.intensity_range;

    // boundaries pass through voxel-exactly
    auto in0 = input.frame(0);
    auto in1 = input.frame(input.frames() - 1);
    std::copy(in0.begin(), in0.end(), out.frame(0).begin());
    std::copy(in1.begin(), in1.end(), out.frame(N + 1).begin());

    std::vector<float> vol(static_cast<size_t>(Z * px)), enh(static_cast<size_t>(Z * px));
    for (i64 f = 1; f <= N; ++f) {
        for (i64 z = 0; z < Z; ++z) {
            const float* src = zsamples[static_cast<size_t>(z)].data() + (f - 1) * px;
            std::copy(src, src + px, vol.begin() + z * px);
        }
        enhance_volume<float>(net, vol, {Z, Y, X}, std::span<float>(enh));
        auto dst = out.frame(f);
        if (was_normalized) {
            std::copy(enh.begin(), enh.end(), dst.begin());
        } else {
            // invert the min-max map recorded by normalize_volume
            const auto range = norm.meta.intensity_range.value();
            const double lo = range[0], hi = range[1];
            for (i64 i = 0; i < Z * px; ++i)
                dst[static_cast<size_t>(i)] = static_cast<float>(
                    lo + (static_cast<double>(enh[static_cast<size_t>(i)]) + 1.0) * 0.5 *
                             (hi - lo));
        }
    }
    out.validate();
    return out;
}

}  // namespace tssc

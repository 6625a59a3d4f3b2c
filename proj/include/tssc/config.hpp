#pragma once

// Engine configuration: one JSON document with nested sections. Every field
// has a default so an empty object is a valid config; unknown keys are
// rejected at any level so typos fail loudly at startup.

#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "tssc/core.hpp"
#include "tssc/denoiser.hpp"
#include "tssc/losses.hpp"
#include "tssc/schedule.hpp"
#include "tssc/ssm.hpp"
#include "tssc/synthetic.hpp"

namespace tssc {

struct EngineConfig {
    // schedule
    i64 T = 1000;
    double beta_start = 1e-6;
    double beta_end = 1e-2;
    SigmaRule sigma_rule = SigmaRule::posterior;
    i64 ddim_steps = 50;
    double eta = 0.0;

    DenoiserConfig denoiser;  // max_t is overwritten with T at load time
    TriDirConfig tridir;
    LossWeights loss_weights;
    int wavelet_levels = 1;
    SyntheticSpec synthetic;

    // optimizer
    double lr = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    // training
    i64 stage1_steps = 2000;
    i64 stage2_epochs = 20;
    i64 batch_size = 4;
    i64 checkpoint_every = 500;

    // runtime
    u64 seed = 0;
    bool deterministic = true;
    i64 jobs = 1;
    std::string run_dir = "runs";
    double psnr_max = 1.0;  // evaluation peak after normalization

    void validate() const {
        linear_schedule(T, beta_start, beta_end, sigma_rule);  // throws on bad params
        require(ddim_steps >= 1 && ddim_steps <= T, "config: ddim_steps must be in 1..T");
        require(eta >= 0.0 && eta <= 1.0, "config: eta must be in [0, 1]");
        denoiser.validate();
        tridir.validate();
        require(loss_weights.lambda_mse >= 0.0 && loss_weights.lambda_wt >= 0.0 &&
                    loss_weights.lambda_tv >= 0.0,
                "config: loss weights must be non-negative");
        require(wavelet_levels >= 0, "config: wavelet_levels must be >= 0");
        require(lr >= 0.0, "config: lr must be non-negative");
        require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
                "config: adam betas must lie in [0, 1)");
        require(adam_eps > 0.0, "config: adam_eps must be positive");
        require(stage1_steps >= 0 && stage2_epochs >= 0, "config: negative step counts");
        require(batch_size >= 1, "config: batch_size must be >= 1");
        require(checkpoint_every >= 1, "config: checkpoint_every must be >= 1");
        require(jobs >= 1, "config: jobs must be >= 1");
        require(psnr_max > 0.0, "config: psnr_max must be positive");
        synthetic.validate();
    }

    NoiseSchedule schedule() const { return linear_schedule(T, beta_start, beta_end, sigma_rule); }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
    if (!j.is_object()) throw UsageError("config: '" + where + "' must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known)
            if (key == k) {
                ok = true;
                break;
            }
        if (!ok) throw UsageError("config: unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void fetch(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw UsageError("config: bad value type for '" + std::string(key) + "' in " + where);
    }
}

}  // namespace detail

inline EngineConfig parse_engine_config(const nlohmann::json& j) {
    EngineConfig c;
    detail::reject_unknown(j,
                           {"schedule", "denoiser", "tridir", "loss", "optim", "train",
                            "runtime", "synthetic"},
                           "top level");

    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        detail::reject_unknown(s, {"T", "beta_start", "beta_end", "sigma_rule", "ddim_steps", "eta"},
                               "schedule");
        detail::fetch(s, "T", c.T, "schedule");
        detail::fetch(s, "beta_start", c.beta_start, "schedule");
        detail::fetch(s, "beta_end", c.beta_end, "schedule");
        std::string rule = c.sigma_rule == SigmaRule::posterior ? "posterior" : "beta";
        detail::fetch(s, "sigma_rule", rule, "schedule");
        if (rule == "posterior")
            c.sigma_rule = SigmaRule::posterior;
        else if (rule == "beta")
            c.sigma_rule = SigmaRule::beta;
        else
            throw UsageError("config: sigma_rule must be 'posterior' or 'beta'");
        detail::fetch(s, "ddim_steps", c.ddim_steps, "schedule");
        detail::fetch(s, "eta", c.eta, "schedule");
    }
    if (j.contains("denoiser")) {
        const auto& d = j["denoiser"];
        detail::reject_unknown(d, {"height", "width", "patch", "embed_dim", "heads", "depth",
                                   "n_intermediate"},
                               "denoiser");
        detail::fetch(d, "height", c.denoiser.height, "denoiser");
        detail::fetch(d, "width", c.denoiser.width, "denoiser");
        detail::fetch(d, "patch", c.denoiser.patch, "denoiser");
        detail::fetch(d, "embed_dim", c.denoiser.embed_dim, "denoiser");
        detail::fetch(d, "heads", c.denoiser.heads, "denoiser");
        detail::fetch(d, "depth", c.denoiser.depth, "denoiser");
        detail::fetch(d, "n_intermediate", c.denoiser.n_intermediate, "denoiser");
    }
    if (j.contains("tridir")) {
        const auto& t = j["tridir"];
        detail::reject_unknown(t, {"channels", "state_dim", "blocks"}, "tridir");
        detail::fetch(t, "channels", c.tridir.channels, "tridir");
        detail::fetch(t, "state_dim", c.tridir.state_dim, "tridir");
        detail::fetch(t, "blocks", c.tridir.blocks, "tridir");
    }
    if (j.contains("loss")) {
        const auto& l = j["loss"];
        detail::reject_unknown(l, {"lambda_mse", "lambda_wt", "lambda_tv", "wavelet_levels"},
                               "loss");
        detail::fetch(l, "lambda_mse", c.loss_weights.lambda_mse, "loss");
        detail::fetch(l, "lambda_wt", c.loss_weights.lambda_wt, "loss");
        detail::fetch(l, "lambda_tv", c.loss_weights.lambda_tv, "loss");
        detail::fetch(l, "wavelet_levels", c.wavelet_levels, "loss");
    }
    if (j.contains("optim")) {
        const auto& o = j["optim"];
        detail::reject_unknown(o, {"lr", "beta1", "beta2", "eps"}, "optim");
        detail::fetch(o, "lr", c.lr, "optim");
        detail::fetch(o, "beta1", c.adam_beta1, "optim");
        detail::fetch(o, "beta2", c.adam_beta2, "optim");
        detail::fetch(o, "eps", c.adam_eps, "optim");
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        detail::reject_unknown(t, {"stage1_steps", "stage2_epochs", "batch_size",
                                   "checkpoint_every"},
                               "train");
        detail::fetch(t, "stage1_steps", c.stage1_steps, "train");
        detail::fetch(t, "stage2_epochs", c.stage2_epochs, "train");
        detail::fetch(t, "batch_size", c.batch_size, "train");
        detail::fetch(t, "checkpoint_every", c.checkpoint_every, "train");
    }
    if (j.contains("synthetic")) {
        const auto& s = j["synthetic"];
        detail::reject_unknown(s, {"kind", "frames", "depth", "height", "width", "amplitude",
                                   "misalign_dy", "cases"},
                               "synthetic");
        std::string kind = "translating_blob";
        detail::fetch(s, "kind", kind, "synthetic");
        c.synthetic.kind = synthetic_kind_from_string(kind);
        detail::fetch(s, "frames", c.synthetic.frames, "synthetic");
        detail::fetch(s, "depth", c.synthetic.depth, "synthetic");
        detail::fetch(s, "height", c.synthetic.height, "synthetic");
        detail::fetch(s, "width", c.synthetic.width, "synthetic");
        detail::fetch(s, "amplitude", c.synthetic.amplitude, "synthetic");
        detail::fetch(s, "misalign_dy", c.synthetic.misalign_dy, "synthetic");
        detail::fetch(s, "cases", c.synthetic.cases, "synthetic");
    }
    if (j.contains("runtime")) {
        const auto& r = j["runtime"];
        detail::reject_unknown(r, {"seed", "deterministic", "jobs", "run_dir", "psnr_max"},
                               "runtime");
        detail::fetch(r, "seed", c.seed, "runtime");
        detail::fetch(r, "deterministic", c.deterministic, "runtime");
        detail::fetch(r, "jobs", c.jobs, "runtime");
        detail::fetch(r, "run_dir", c.run_dir, "runtime");
        detail::fetch(r, "psnr_max", c.psnr_max, "runtime");
    }

    c.denoiser.max_t = c.T;
    c.validate();
    return c;
}

inline EngineConfig load_engine_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config: invalid JSON in " + path.string() + ": " + e.what());
    }
    return parse_engine_config(j);
}

}  // namespace tssc

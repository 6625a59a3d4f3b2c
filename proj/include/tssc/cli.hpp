#pragma once

// Command-line front end. Each subcommand wraps one engine operation; all
// console output happens here so the library headers stay silent. Exit
// codes: 0 success, 2 usage error, 3 I/O error, 4 numeric error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tssc/engine.hpp"
#include "tssc/metrics.hpp"

namespace tssc::cli {

namespace fs = std::filesystem;

struct Options {
    std::string config_path, in_path, out_path, ref_path;
    u64 seed = 0;
    bool seed_set = false;
    i64 jobs = 0;
    int deterministic = -1;  // tri-state: unset / false / true
    int verbose = 0;
};

// TSSC_LOG overrides --verbose; 0 = warnings only, 1 = info, 2 = debug
inline int log_level(const Options& o) {
    if (const char* env = std::getenv("TSSC_LOG")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end && *end == '\0') return static_cast<int>(v);
    }
    return o.verbose;
}

inline void info(const Options& o, const std::string& msg) {
    if (log_level(o) >= 1) std::cerr << "tssc: " << msg << "\n";
}

inline EngineConfig load_cfg(const Options& o) {
    EngineConfig c =
        o.config_path.empty() ? EngineConfig{} : load_engine_config(o.config_path);
    if (o.seed_set) c.seed = o.seed;
    if (o.jobs > 0) c.jobs = o.jobs;
    if (o.deterministic >= 0) c.deterministic = o.deterministic != 0;
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Shared file plumbing
// ---------------------------------------------------------------------------

// volumes are stored as <base>.raw + <base>.meta.json; a dataset directory
// holds case_NNN.truth and case_NNN.misaligned pairs
inline std::vector<fs::path> list_volume_bases(const fs::path& dir, const std::string& suffix) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    const std::string tail = suffix + ".meta.json";
    std::vector<fs::path> bases;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.size() > tail.size() &&
            name.compare(name.size() - tail.size(), tail.size(), tail) == 0)
            bases.push_back(dir / name.substr(0, name.size() - std::string(".meta.json").size()));
    }
    std::sort(bases.begin(), bases.end());
    return bases;
}

inline std::vector<Volume4D> load_truth_cases(const fs::path& dir) {
    auto bases = list_volume_bases(dir, ".truth");
    require(!bases.empty(), "no .truth volumes found in " + dir.string());
    std::vector<Volume4D> out;
    for (const auto& b : bases) out.push_back(load_volume4d(b));
    return out;
}

// six evenly spaced frames, middle z-slice, tiled left to right
inline void write_pgm_preview(const Volume4D& v, const fs::path& path) {
    const i64 F = v.frames(), Z = v.depth(), Y = v.height(), X = v.width();
    std::vector<i64> picks;
    for (int i = 0; i < 6; ++i)
        picks.push_back(F == 1 ? 0 : llround(static_cast<double>(i) * (F - 1) / 5.0));
    const i64 z = Z / 2;

    double lo = 0.0, hi = 1.0;
    if (v.meta.normalized) {
        lo = -1.0;
        hi = 1.0;
    } else {
        lo = v.data[0];
        hi = v.data[0];
        for (float s : v.data) {
            lo = std::min(lo, static_cast<double>(s));
            hi = std::max(hi, static_cast<double>(s));
        }
        if (hi <= lo) hi = lo + 1.0;
    }

    const i64 W = 6 * X + 5;  // one-pixel separators
    std::vector<unsigned char> img(static_cast<size_t>(Y * W), 255);
    for (int i = 0; i < 6; ++i) {
        auto frame = v.frame(picks[static_cast<size_t>(i)]);
        for (i64 y = 0; y < Y; ++y)
            for (i64 x = 0; x < X; ++x) {
                const double s = frame[static_cast<size_t>(z * Y * X + y * X + x)];
                const double u = std::clamp((s - lo) / (hi - lo), 0.0, 1.0);
                img[static_cast<size_t>(y * W + i * (X + 1) + x)] =
                    static_cast<unsigned char>(std::lround(u * 255.0));
            }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write preview: " + path.string());
    f << "P5\n" << W << " " << Y << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    if (!f.flush()) throw IoError("failed writing preview: " + path.string());
}

inline DenoiserParams<float> load_stage1(const EngineConfig& cfg, const fs::path& run_dir) {
    auto den = make_denoiser_params<float>(cfg.denoiser);
    load_checkpoint<DenoiserParams<float>>(run_dir / "stage1_final", "stage1",
                                           {{"param", &den}});
    return den;
}

inline TriDirNetParams<float> load_stage2(const EngineConfig& cfg, const fs::path& run_dir) {
    auto net = make_tridir_params<float>(cfg.tridir);
    load_checkpoint<TriDirNetParams<float>>(run_dir / "stage2_final", "stage2",
                                            {{"param", &net}});
    return net;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline void cmd_make_synthetic(const EngineConfig& cfg, const Options& o) {
    Rng rng(cfg.seed);
    auto cases = make_synthetic(cfg.synthetic, rng);
    fs::create_directories(o.out_path);
    for (size_t i = 0; i < cases.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "case_%03zu", i);
        save_volume4d(cases[i].truth, fs::path(o.out_path) / (std::string(stem) + ".truth"));
        save_volume4d(cases[i].misaligned,
                      fs::path(o.out_path) / (std::string(stem) + ".misaligned"));
    }
    info(o, "wrote " + std::to_string(cases.size()) + " synthetic cases to " + o.out_path);
}

inline void cmd_slice(const EngineConfig&, const Options& o) {
    const Volume4D v = load_volume4d(o.in_path);
    fs::create_directories(o.out_path);
    for (i64 z = 0; z < v.depth(); ++z) {
        const Slice2Dt s = slice_to_2dt(v, z);
        Volume4D flat = make_volume({v.frames(), 1, v.height(), v.width()});
        flat.data = s.data;
        flat.meta.normalized = v.meta.normalized;
        flat.meta.intensity_range = v.meta.intensity_range;
        char stem[32];
        std::snprintf(stem, sizeof stem, "slice_%03lld", static_cast<long long>(z));
        save_volume4d(flat, fs::path(o.out_path) / stem);
    }
    info(o, "wrote " + std::to_string(v.depth()) + " slices to " + o.out_path);
}

inline void cmd_reassemble(const EngineConfig&, const Options& o) {
    auto bases = list_volume_bases(o.in_path, "");
    require(!bases.empty(), "no slice volumes found in " + o.in_path);
    std::vector<Volume4D> slices;
    for (const auto& b : bases) slices.push_back(load_volume4d(b));
    const Volume4D& first = slices.front();
    require(first.depth() == 1, "reassemble: slice volumes must have depth 1");
    const i64 T = first.frames(), Y = first.height(), X = first.width();
    const i64 Z = static_cast<i64>(slices.size());
    Volume4D out = make_volume({T, Z, Y, X});
    out.meta.normalized = first.meta.normalized;
    out.meta.intensity_range = first.meta.intensity_range;
    for (i64 z = 0; z < Z; ++z) {
        const Volume4D& s = slices[static_cast<size_t>(z)];
        require(s.frames() == T && s.depth() == 1 && s.height() == Y && s.width() == X,
                "reassemble: inconsistent slice shapes");
        for (i64 t = 0; t < T; ++t) {
            auto src = s.frame(t);
            std::copy(src.begin(), src.end(),
                      out.frame(t).begin() + static_cast<size_t>(z * Y * X));
        }
    }
    save_volume4d(out, o.out_path);
    info(o, "reassembled " + std::to_string(Z) + " slices into " + o.out_path);
}

inline void cmd_train_tsr(const EngineConfig& cfg, const Options& o) {
    const fs::path run = o.out_path.empty() ? fs::path(cfg.run_dir) : fs::path(o.out_path);
    fs::create_directories(run);
    auto truths = load_truth_cases(o.in_path);
    std::vector<Volume4D> norm;
    for (const auto& v : truths)
        norm.push_back(v.meta.normalized ? v : normalize_volume(v));
    auto slices = stage1_slices(norm);

    std::ofstream csv(run / "stage1_log.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write training log in " + run.string());
    csv << "step,loss,lr\n";
    Stage1Trainer tr(cfg);
    i64 remaining = cfg.stage1_steps;
    while (remaining > 0) {
        const i64 chunk = std::min(cfg.checkpoint_every, remaining);
        tr.run(slices, chunk, &csv);
        remaining -= chunk;
        char stem[32];
        std::snprintf(stem, sizeof stem, "stage1_step%06lld", static_cast<long long>(tr.step));
        tr.save(run / stem);
        info(o, "stage-1 step " + std::to_string(tr.step));
    }
    tr.save(run / "stage1_final");
    if (!csv.flush()) throw IoError("failed writing training log");
    info(o, "stage-1 training finished; checkpoint at " +
                (run / "stage1_final").string());
}

inline void cmd_train_sc(const EngineConfig& cfg, const Options& o) {
    const fs::path run = o.out_path.empty() ? fs::path(cfg.run_dir) : fs::path(o.out_path);
    fs::create_directories(run);
    auto den = load_stage1(cfg, run);
    const std::string hash_before = params_hash(den);

    auto truths = load_truth_cases(o.in_path);
    std::vector<Volume4D> norm;
    for (const auto& v : truths)
        norm.push_back(v.meta.normalized ? v : normalize_volume(v));
    // the wavelet term needs this; fail before the expensive sampling does
    const i64 div = i64(1) << cfg.wavelet_levels;
    for (const auto& v : norm)
        require(v.depth() % div == 0 && v.height() % div == 0 && v.width() % div == 0,
                "train-sc: volume dims must be divisible by 2^wavelet_levels (" +
                    std::to_string(div) + ")");
    const i64 n_val = static_cast<i64>(norm.size()) > 1
                          ? std::max<i64>(1, static_cast<i64>(norm.size()) / 4)
                          : 0;
    info(o, "sampling stage-1 outputs for " + std::to_string(norm.size()) + " cases");
    auto data = build_stage2_data_sampled(cfg, den, norm, n_val);

    std::ofstream csv(run / "stage2_log.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write training log in " + run.string());
    csv << "step,mse,wavelet,tv,total\n";
    std::vector<ScLossBreakdown> val;
    Stage2Trainer tr(cfg);
    tr.run_epochs(data, cfg.stage2_epochs, &csv, &val);
    if (!csv.flush()) throw IoError("failed writing training log");

    std::ofstream vcsv(run / "stage2_val.csv", std::ios::trunc);
    if (!vcsv) throw IoError("cannot write validation log in " + run.string());
    vcsv << "epoch,mse,wavelet,tv,total\n";
    for (size_t e = 0; e < val.size(); ++e) {
        char row[160];
        std::snprintf(row, sizeof row, "%zu,%.10g,%.10g,%.10g,%.10g\n", e, val[e].mse,
                      val[e].wavelet, val[e].tv, val[e].total);
        vcsv << row;
    }
    if (!vcsv.flush()) throw IoError("failed writing validation log");

    require(params_hash(den) == hash_before, "stage-1 parameters changed during stage 2");
    tr.save(run / "stage2_final");
    info(o, "stage-2 training finished; epoch-0 val mse " + std::to_string(val.front().mse) +
                ", final " + std::to_string(val.back().mse));
}

inline void run_and_save(const EngineConfig& cfg, const Options& o,
                         const TriDirNetParams<float>& net) {
    auto den = load_stage1(cfg, fs::path(cfg.run_dir));
    const Volume4D input = load_volume4d(o.in_path);
    Rng rng(cfg.seed);
    const Volume4D out = run_pipeline(cfg, den, net, input, rng);
    save_volume4d(out, o.out_path);
    fs::path preview = fs::path(o.out_path);
    preview += "_preview.pgm";
    write_pgm_preview(out, preview);
    info(o, "wrote " + o.out_path + " and " + preview.string());
}

inline void cmd_sample(const EngineConfig& cfg, const Options& o) {
    // stage 1 only: a zeroed consistency net is the identity map
    run_and_save(cfg, o, make_tridir_params<float>(cfg.tridir));
}

inline void cmd_pipeline(const EngineConfig& cfg, const Options& o) {
    run_and_save(cfg, o, load_stage2(cfg, fs::path(cfg.run_dir)));
}

inline void cmd_enhance(const EngineConfig& cfg, const Options& o) {
    auto net = load_stage2(cfg, fs::path(cfg.run_dir));
    const Volume4D v = load_volume4d(o.in_path);
    const bool was_norm = v.meta.normalized;
    const Volume4D norm = was_norm ? v : normalize_volume(v);
    Volume4D out = norm;
    const std::array<i64, 3> shape{v.depth(), v.height(), v.width()};
    for (i64 t = 0; t < norm.frames(); ++t)
        enhance_volume<float>(net, norm.frame(t), shape, out.frame(t));
    if (!was_norm) out = denormalize_volume(out);
    save_volume4d(out, o.out_path);
    info(o, "enhanced " + o.in_path + " -> " + o.out_path);
}

inline void cmd_evaluate(const EngineConfig& cfg, const Options& o) {
    auto pred_bases = list_volume_bases(o.in_path, "");
    require(!pred_bases.empty(), "no volumes found in " + o.in_path);
    std::vector<MetricCase> cases;
    for (const auto& pb : pred_bases) {
        const std::string name = pb.filename().string();
        const fs::path rb = fs::path(o.ref_path) / name;
        const Volume4D pred = load_volume4d(pb);
        const Volume4D ref = load_volume4d(rb);
        require(pred.meta.shape == ref.meta.shape,
                "evaluate: shape mismatch for case " + name);
        MetricCase mc;
        mc.id = name;
        std::span<const float> a(pred.data), b(ref.data);
        mc.mae = mae(a, b);
        mc.psnr = psnr(a, b, cfg.psnr_max);
        mc.ssim = ssim(a, b,
                       {pred.frames() * pred.depth(), pred.height(), pred.width()},
                       cfg.psnr_max);
        cases.push_back(mc);
    }
    const MetricReport rep = aggregate(cases);

    std::ofstream csv(o.out_path, std::ios::trunc);
    if (!csv) throw IoError("cannot write metrics CSV: " + o.out_path);
    csv << "case,mae,psnr,ssim\n";
    for (const auto& c : rep.cases) {
        char row[192];
        std::snprintf(row, sizeof row, "%s,%.10g,%.10g,%.10g\n", c.id.c_str(), c.mae, c.psnr,
                      c.ssim);
        csv << row;
    }
    char row[192];
    std::snprintf(row, sizeof row, "mean,%.10g,%.10g,%.10g\nstddev,%.10g,%.10g,%.10g\n",
                  rep.mae.mean, rep.psnr.mean, rep.ssim.mean, rep.mae.stddev,
                  rep.psnr.stddev, rep.ssim.stddev);
    csv << row;
    if (!csv.flush()) throw IoError("failed writing metrics CSV");

    std::cout << "cases " << rep.cases.size() << "  mae " << format_mean_std(rep.mae)
              << "  psnr " << format_mean_std(rep.psnr) << "  ssim "
              << format_mean_std(rep.ssim) << "\n";
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch
// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
    CLI::App app{"tssc: two-stage temporal super-resolution for 4D volumes"};
    app.footer("exit codes: 0 success, 2 usage error, 3 I/O error, 4 numeric error");
    app.require_subcommand(1);

    Options o;
    std::vector<CLI::Option*> seed_opts;
    std::vector<CLI::Option*> verbose_opts;

    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", o.config_path, "JSON config file");
        seed_opts.push_back(s->add_option("--seed", o.seed, "override config seed"));
        s->add_option("--jobs", o.jobs, "worker threads");
        s->add_flag_callback(
            "--deterministic", [&o] { o.deterministic = 1; }, "force deterministic mode");
        s->add_flag_callback(
            "--no-deterministic", [&o] { o.deterministic = 0; },
            "disable deterministic mode");
        // no bound target: CLI11 int flags force their callback on every
        // subcommand, parsed or not, so the last one would zero the value
        verbose_opts.push_back(
            s->add_flag("-v,--verbose", "increase log level (TSSC_LOG overrides)"));
        return s;
    };
    auto need_in = [&](CLI::App* s) {
        s->add_option("--in", o.in_path, "input path")->required();
        return s;
    };
    auto need_out = [&](CLI::App* s) {
        s->add_option("--out", o.out_path, "output path")->required();
        return s;
    };
    auto opt_out = [&](CLI::App* s) {
        s->add_option("--out", o.out_path, "run directory (default: config run_dir)");
        return s;
    };

    CLI::App* c_synth = need_out(add_common(
        app.add_subcommand("make-synthetic", "generate a synthetic 4D dataset")));
    CLI::App* c_slice = need_out(need_in(
        add_common(app.add_subcommand("slice", "split a 4D volume into 2D+t slices"))));
    CLI::App* c_reasm = need_out(need_in(add_common(
        app.add_subcommand("reassemble", "stack 2D+t slices back into a 4D volume"))));
    CLI::App* c_ttsr = opt_out(need_in(add_common(
        app.add_subcommand("train-tsr", "train the stage-1 diffusion denoiser"))));
    CLI::App* c_tsc = opt_out(need_in(add_common(app.add_subcommand(
        "train-sc", "train the stage-2 consistency net (stage 1 frozen)"))));
    CLI::App* c_sample = need_out(need_in(add_common(app.add_subcommand(
        "sample", "stage-1 sampling only; writes volume and preview grid"))));
    CLI::App* c_enh = need_out(need_in(
        add_common(app.add_subcommand("enhance", "apply the stage-2 net to a volume"))));
    CLI::App* c_pipe = need_out(need_in(add_common(app.add_subcommand(
        "pipeline", "full two-stage pipeline; writes volume and preview grid"))));
    CLI::App* c_eval = need_out(need_in(
        add_common(app.add_subcommand("evaluate", "compute MAE/PSNR/SSIM over a directory"))));
    c_eval->add_option("--ref", o.ref_path, "reference volume directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    for (const CLI::Option* s : seed_opts)
        if (!s->empty()) o.seed_set = true;
    for (const CLI::Option* v : verbose_opts) o.verbose += static_cast<int>(v->count());

    try {
        const EngineConfig cfg = load_cfg(o);
        if (c_synth->parsed()) cmd_make_synthetic(cfg, o);
        else if (c_slice->parsed()) cmd_slice(cfg, o);
        else if (c_reasm->parsed()) cmd_reassemble(cfg, o);
        else if (c_ttsr->parsed()) cmd_train_tsr(cfg, o);
        else if (c_tsc->parsed()) cmd_train_sc(cfg, o);
        else if (c_sample->parsed()) cmd_sample(cfg, o);
        else if (c_enh->parsed()) cmd_enhance(cfg, o);
        else if (c_pipe->parsed()) cmd_pipeline(cfg, o);
        else if (c_eval->parsed()) cmd_evaluate(cfg, o);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

}  // namespace tssc::cli

#pragma once

// Synthetic 4D cases with exactly known intermediate frames: a Gaussian blob
// translating along y, a bar rotating about the slice center, or an ellipse
// with oscillating axes. Each case also carries a misaligned variant whose
// odd z-slices are circularly shifted in y, mimicking cross-slice
// misalignment between independently acquired slices.

#include <cmath>
#include <string>
#include <vector>

#include "tssc/core.hpp"
#include "tssc/volume.hpp"

namespace tssc {

enum class SyntheticKind { translating_blob, rotating_bar, deforming_ellipse };

inline SyntheticKind synthetic_kind_from_string(const std::string& s) {
    if (s == "translating_blob") return SyntheticKind::translating_blob;
    if (s == "rotating_bar") return SyntheticKind::rotating_bar;
    if (s == "deforming_ellipse") return SyntheticKind::deforming_ellipse;
    throw UsageError("unknown synthetic pattern '" + s + "'");
}

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::translating_blob;
    i64 frames = 12;
    i64 depth = 4;    // Z
    i64 height = 16;  // Y
    i64 width = 16;   // X
    double amplitude = 4.0;  // total voxels of travel (blob), radians (bar), axis ratio (ellipse)
    i64 misalign_dy = 1;     // circular y-shift applied to odd z-slices
    i64 cases = 4;

    void validate() const {
        require(frames >= 3, "synthetic: need at least 3 frames so intermediates exist");
        require(depth >= 1 && height >= 2 && width >= 2, "synthetic: degenerate volume shape");
        require(amplitude >= 0.0, "synthetic: amplitude must be non-negative");
        require(misalign_dy >= 0, "synthetic: misalign_dy must be non-negative");
        require(cases >= 1, "synthetic: need at least one case");
    }
};

struct SyntheticCase {
    Volume4D truth;       // raw intensities in [0, 1]
    Volume4D misaligned;  // same, with odd z-slices shifted in y
};

namespace detail {

inline double blob_sigma_z(i64 Z) { return std::max(1.0, static_cast<double>(Z) / 3.0); }

inline void
render_frame(const SyntheticSpec& sp, double phase01, double jy, double jx, float* out) {
    const i64 Z = sp.depth, Y = sp.height, X = sp.width;
    const double cy0 = (static_cast<double>(Y) - 1.0) / 2.0 + jy;
    const double cx0 = (static_cast<double>(X) - 1.0) / 2.0 + jx;
    const double cz = (static_cast<double>(Z) - 1.0) / 2.0;
    const double sz = blob_sigma_z(Z);

    switch (sp.kind) {
        case SyntheticKind::translating_blob: {
            const double sy = static_cast<double>(Y) / 8.0;
            const double cy = cy0 + sp.amplitude * (phase01 - 0.5);
            for (i64 z = 0; z < Z; ++z) {
                const double wz = std::exp(-((z - cz) * (z - cz)) / (2.0 * sz * sz));
                for (i64 y = 0; y < Y; ++y)
                    for (i64 x = 0; x < X; ++x) {
                        const double d2 = (y - cy) * (y - cy) + (x - cx0) * (x - cx0);
                        out[(z * Y + y) * X + x] =
                            static_cast<float>(wz * std::exp(-d2 / (2.0 * sy * sy)));
                    }
            }
            break;
        }
        case SyntheticKind::rotating_bar: {
            const double theta = sp.amplitude * phase01;
            const double ct = std::cos(theta), st = std::sin(theta);
            const double halflen = static_cast<double>(std::min(Y, X)) / 3.0;
            const double thick = 1.2;
            for (i64 z = 0; z < Z; ++z) {
                const double wz = std::exp(-((z - cz) * (z - cz)) / (2.0 * sz * sz));
                for (i64 y = 0; y < Y; ++y)
                    for (i64 x = 0; x < X; ++x) {
                        const double dy = y - cy0, dx = x - cx0;
                        const double along = dx * ct + dy * st;
                        const double perp = -dx * st + dy * ct;
                        const double v = std::exp(-(perp * perp) / (2.0 * thick * thick)) *
                                         std::exp(-(along * along) / (2.0 * halflen * halflen));
                        out[(z * Y + y) * X + x] = static_cast<float>(wz * v);
                    }
            }
            break;
        }
        case SyntheticKind::deforming_ellipse: {
            const double base_ry = static_cast<double>(Y) / 6.0;
            const double base_rx = static_cast<double>(X) / 6.0;
            const double wobble = 1.0 + 0.5 * sp.amplitude / 10.0 * std::sin(M_PI * phase01);
            const double ry = base_ry * wobble, rx = base_rx / wobble;
            for (i64 z = 0; z < Z; ++z) {
                const double wz = std::exp(-((z - cz) * (z - cz)) / (2.0 * sz * sz));
                for (i64 y = 0; y < Y; ++y)
                    for (i64 x = 0; x < X; ++x) {
                        const double d2 = (y - cy0) * (y - cy0) / (2.0 * ry * ry) +
                                          (x - cx0) * (x - cx0) / (2.0 * rx * rx);
                        out[(z * Y + y) * X + x] = static_cast<float>(wz * std::exp(-d2));
                    }
            }
            break;
        }
    }
}

}  // namespace detail

inline Volume4D inject_misalignment(const Volume4D& v, i64 dy) {
    require(dy >= 0, "inject_misalignment: negative offset");
    Volume4D out = v;
    if (dy == 0) return out;
    const i64 T = v.frames(), Z = v.depth(), Y = v.height(), X = v.width();
    for (i64 t = 0; t < T; ++t)
        for (i64 z = 1; z < Z; z += 2)
            for (i64 y = 0; y < Y; ++y)
                for (i64 x = 0; x < X; ++x) out.at(t, z, (y + dy) % Y, x) = v.at(t, z, y, x);
    return out;
}

inline std::vector<SyntheticCase> make_synthetic(const SyntheticSpec& sp, Rng& rng) {
    sp.validate();
    std::vector<SyntheticCase> out;
    out.reserve(static_cast<size_t>(sp.cases));
    for (i64 k = 0; k < sp.cases; ++k) {
        // small per-case jitter so cases are distinct but stay well inside
        const double jy = (rng.uniform() - 0.5) * 1.0;
        const double jx = (rng.uniform() - 0.5) * 1.0;
        Volume4D truth = make_volume({sp.frames, sp.depth, sp.height, sp.width});
        for (i64 t = 0; t < sp.frames; ++t) {
            const double phase = static_cast<double>(t) / static_cast<double>(sp.frames - 1);
            detail::render_frame(sp, phase, jy, jx, truth.frame(t).data());
        }
        truth.validate();
        SyntheticCase c;
        c.misaligned = inject_misalignment(truth, sp.misalign_dy);
        c.truth = std::move(truth);
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace tssc

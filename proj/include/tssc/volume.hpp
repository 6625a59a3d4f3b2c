#pragma once

// Time-indexed 3D voxel grids: on-disk format, normalization, 2D+t slicing,
// z padding and trilinear resampling. Index order is (t, z, y, x), row-major
// with x fastest; every routine in the library assumes this layout.
//
// On-disk format (see docs/file_formats.md): `<name>.raw` holds the samples
// as little-endian 32-bit floats in index order; `<name>.meta.json` is the
// sidecar with shape, optional spacing, optional intensity_range and the
// normalized flag.

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>

#include "json.hpp"
#include "tssc/core.hpp"

namespace tssc {

struct VolumeMeta {
    std::array<i64, 4> shape{0, 0, 0, 0};  // (T, Z, Y, X)
    std::optional<std::array<double, 4>> spacing;  // per-axis step (t, z, y, x)
    std::optional<std::array<double, 2>> intensity_range;  // raw (lo, hi) before normalization
    bool normalized = false;
};

struct Volume4D {
    VolumeMeta meta;
    std::vector<float> data;  // length T*Z*Y*X

    i64 frames() const { return meta.shape[0]; }
    i64 depth() const { return meta.shape[1]; }
    i64 height() const { return meta.shape[2]; }
    i64 width() const { return meta.shape[3]; }
    i64 voxels_per_frame() const { return depth() * height() * width(); }

    float& at(i64 t, i64 z, i64 y, i64 x) {
        return data[static_cast<size_t>(((t * depth() + z) * height() + y) * width() + x)];
    }
    float at(i64 t, i64 z, i64 y, i64 x) const {
        return data[static_cast<size_t>(((t * depth() + z) * height() + y) * width() + x)];
    }
    std::span<float> frame(i64 t) {
        return std::span<float>(data).subspan(static_cast<size_t>(t * voxels_per_frame()),
                                              static_cast<size_t>(voxels_per_frame()));
    }
    std::span<const float> frame(i64 t) const {
        return std::span<const float>(data).subspan(static_cast<size_t>(t * voxels_per_frame()),
                                                    static_cast<size_t>(voxels_per_frame()));
    }

    void validate() const {
        for (i64 d : meta.shape)
            require(d > 0, "volume shape components must be positive");
        const i64 n = meta.shape[0] * meta.shape[1] * meta.shape[2] * meta.shape[3];
        require(static_cast<i64>(data.size()) == n,
                "volume payload length does not match shape");
        if (meta.spacing) {
            for (double s : *meta.spacing)
                require(s > 0.0, "spacing components must be strictly positive");
        }
    }
};

inline Volume4D make_volume(std::array<i64, 4> shape, float fill = 0.0f) {
    Volume4D v;
    v.meta.shape = shape;
    v.data.assign(static_cast<size_t>(shape[0] * shape[1] * shape[2] * shape[3]), fill);
    return v;
}

// A fixed-z slice tracked across all time frames: data is (t, y, x).
struct Slice2Dt {
    std::array<i64, 4> parent_shape{0, 0, 0, 0};
    i64 z_index = 0;
    std::vector<float> data;  // length T*Y*X

    i64 frames() const { return parent_shape[0]; }
    i64 height() const { return parent_shape[2]; }
    i64 width() const { return parent_shape[3]; }
    std::span<const float> frame(i64 t) const {
        const i64 hw = height() * width();
        return std::span<const float>(data).subspan(static_cast<size_t>(t * hw),
                                                    static_cast<size_t>(hw));
    }
};

// ---------------------------------------------------------------------------
// Sidecar serialization
// ---------------------------------------------------------------------------

namespace detail {

inline std::filesystem::path volume_base(const std::filesystem::path& path) {
    auto p = path;
    if (p.extension() == ".raw") p.replace_extension();
    return p;
}

inline nlohmann::json meta_to_json(const VolumeMeta& m) {
    nlohmann::json j;
    j["format"] = "tssc-volume-v1";
    j["shape"] = m.shape;
    if (m.spacing) j["spacing"] = *m.spacing;
    if (m.intensity_range) j["intensity_range"] = *m.intensity_range;
    j["normalized"] = m.normalized;
    return j;
}

inline VolumeMeta meta_from_json(const nlohmann::json& j, const std::string& where) {
    VolumeMeta m;
    if (!j.is_object() || !j.contains("format") || j["format"] != "tssc-volume-v1")
        throw IoError("corrupt sidecar (missing/unknown format tag): " + where);
    if (!j.contains("shape") || !j["shape"].is_array() || j["shape"].size() != 4)
        throw IoError("corrupt sidecar (shape must be a 4-element array): " + where);
    for (size_t i = 0; i < 4; ++i) m.shape[i] = j["shape"][i].get<i64>();
    if (j.contains("spacing")) {
        if (!j["spacing"].is_array() || j["spacing"].size() != 4)
            throw IoError("corrupt sidecar (spacing must be a 4-element array): " + where);
        std::array<double, 4> sp{};
        for (size_t i = 0; i < 4; ++i) sp[i] = j["spacing"][i].get<double>();
        m.spacing = sp;
    }
    if (j.contains("intensity_range")) {
        if (!j["intensity_range"].is_array() || j["intensity_range"].size() != 2)
            throw IoError("corrupt sidecar (intensity_range must be a 2-element array): " + where);
        m.intensity_range = std::array<double, 2>{j["intensity_range"][0].get<double>(),
                                                  j["intensity_range"][1].get<double>()};
    }
    if (j.contains("normalized")) m.normalized = j["normalized"].get<bool>();
    return m;
}

// Payload bytes are little-endian regardless of host order.
inline void write_f32le(std::ofstream& f, const float* src, size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        f.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(count * 4));
    } else {
        std::vector<char> buf(count * 4);
        for (size_t i = 0; i < count; ++i) {
            std::uint32_t u;
            std::memcpy(&u, src + i, 4);
            buf[4 * i + 0] = static_cast<char>(u & 0xff);
            buf[4 * i + 1] = static_cast<char>((u >> 8) & 0xff);
            buf[4 * i + 2] = static_cast<char>((u >> 16) & 0xff);
            buf[4 * i + 3] = static_cast<char>((u >> 24) & 0xff);
        }
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
}

inline void read_f32le(std::ifstream& f, float* dst, size_t count) {
    f.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * 4));
    if constexpr (std::endian::native == std::endian::big) {
        for (size_t i = 0; i < count; ++i) {
            std::uint32_t u;
            std::memcpy(&u, dst + i, 4);
            u = ((u & 0xffu) << 24) | ((u & 0xff00u) << 8) | ((u >> 8) & 0xff00u) | (u >> 24);
            std::memcpy(dst + i, &u, 4);
        }
    }
}

}  // namespace detail

inline void save_volume4d(const Volume4D& v, const std::filesystem::path& path) {
    v.validate();
    const auto base = detail::volume_base(path);
    const auto raw = base.string() + ".raw";
    const auto meta = base.string() + ".meta.json";

    std::ofstream mf(meta, std::ios::trunc);
    if (!mf) throw IoError("cannot write sidecar: " + meta);
    mf << detail::meta_to_json(v.meta).dump(2) << "\n";
    if (!mf.flush()) throw IoError("failed writing sidecar: " + meta);

    std::ofstream rf(raw, std::ios::binary | std::ios::trunc);
    if (!rf) throw IoError("cannot write payload: " + raw);
    detail::write_f32le(rf, v.data.data(), v.data.size());
    if (!rf.flush()) throw IoError("failed writing payload: " + raw);
}

inline Volume4D load_volume4d(const std::filesystem::path& path) {
    const auto base = detail::volume_base(path);
    const auto raw = base.string() + ".raw";
    const auto meta = base.string() + ".meta.json";

    std::ifstream mf(meta);
    if (!mf) throw IoError("missing sidecar: " + meta);
    nlohmann::json j;
    try {
        mf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt sidecar " + meta + ": " + e.what());
    }

    Volume4D v;
    v.meta = detail::meta_from_json(j, meta);
    for (i64 d : v.meta.shape)
        if (d <= 0) throw IoError("corrupt sidecar (non-positive dimension): " + meta);

    const i64 n = Tensor<float>::numel_of({v.meta.shape.begin(), v.meta.shape.end()});
    std::ifstream rf(raw, std::ios::binary | std::ios::ate);
    if (!rf) throw IoError("missing payload: " + raw);
    const auto found = static_cast<i64>(rf.tellg());
    const i64 expected = n * 4;
    if (found != expected)
        throw IoError("payload length mismatch for " + raw + ": expected " +
                      std::to_string(expected) + " bytes, found " + std::to_string(found));
    rf.seekg(0);
    v.data.resize(static_cast<size_t>(n));
    detail::read_f32le(rf, v.data.data(), v.data.size());
    if (!rf) throw IoError("failed reading payload: " + raw);
    v.validate();
    return v;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Min-max map onto [-1, 1]. The raw (lo, hi) is recorded in intensity_range
// so denormalize_volume can undo the map to within float rounding.
inline Volume4D normalize_volume(const Volume4D& v) {
    v.validate();
    const auto [mn, mx] = std::minmax_element(v.data.begin(), v.data.end());
    if (*mn == *mx)
        throw NumericError("cannot normalize a constant volume (max == min)");
    const double lo = *mn, hi = *mx;
    const double scale = 2.0 / (hi - lo);
    Volume4D out = v;
    for (float& x : out.data) {
        const double y = (static_cast<double>(x) - lo) * scale - 1.0;
        x = static_cast<float>(std::clamp(y, -1.0, 1.0));
    }
    out.meta.intensity_range = std::array<double, 2>{lo, hi};
    out.meta.normalized = true;
    return out;
}

inline Volume4D denormalize_volume(const Volume4D& v) {
    require(v.meta.normalized, "denormalize_volume: volume is not normalized");
    require(v.meta.intensity_range.has_value(),
            "denormalize_volume: intensity_range missing");
    const double lo = (*v.meta.intensity_range)[0];
    const double hi = (*v.meta.intensity_range)[1];
    Volume4D out = v;
    for (float& x : out.data)
        x = static_cast<float>((static_cast<double>(x) + 1.0) * 0.5 * (hi - lo) + lo);
    out.meta.normalized = false;
    out.meta.intensity_range.reset();
    return out;
}

// ---------------------------------------------------------------------------
// Slicing / reassembly
// ---------------------------------------------------------------------------

inline Slice2Dt slice_to_2dt(const Volume4D& v, i64 z) {
    v.validate();
    if (z < 0 || z >= v.depth())
        throw UsageError("slice_to_2dt: z index " + std::to_string(z) +
                         " out of range [0, " + std::to_string(v.depth()) + ")");
    Slice2Dt s;
    s.parent_shape = v.meta.shape;
    s.z_index = z;
    const i64 hw = v.height() * v.width();
    s.data.resize(static_cast<size_t>(v.frames() * hw));
    for (i64 t = 0; t < v.frames(); ++t) {
        const float* src = v.data.data() + ((t * v.depth() + z) * hw);
        std::copy(src, src + hw, s.data.data() + t * hw);
    }
    return s;
}

// Stack per-z 2D frames (all at one t) into a (Z, Y, X) volume.
inline std::vector<float> reassemble_3d(const std::vector<std::vector<float>>& frames,
                                        i64 y, i64 x) {
    require(!frames.empty(), "reassemble_3d: empty frame list");
    require(y > 0 && x > 0, "reassemble_3d: frame dims must be positive");
    const size_t hw = static_cast<size_t>(y * x);
    std::vector<float> out;
    out.reserve(frames.size() * hw);
    for (size_t z = 0; z < frames.size(); ++z) {
        if (frames[z].size() != hw)
            throw UsageError("reassemble_3d: frame " + std::to_string(z) +
                             " has mismatched shape");
        out.insert(out.end(), frames[z].begin(), frames[z].end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Geometry transforms
// ---------------------------------------------------------------------------

// Centered zero padding along z: originals land at offset floor((target-Z)/2).
inline Volume4D pad_z(const Volume4D& v, i64 target_z) {
    v.validate();
    if (target_z < v.depth())
        throw UsageError("pad_z: target_z " + std::to_string(target_z) +
                         " smaller than current Z " + std::to_string(v.depth()));
    if (target_z == v.depth()) return v;

    const i64 offset = (target_z - v.depth()) / 2;
    Volume4D out = make_volume({v.frames(), target_z, v.height(), v.width()});
    out.meta.spacing = v.meta.spacing;
    out.meta.intensity_range = v.meta.intensity_range;
    out.meta.normalized = v.meta.normalized;
    const i64 hw = v.height() * v.width();
    for (i64 t = 0; t < v.frames(); ++t)
        for (i64 z = 0; z < v.depth(); ++z) {
            const float* src = v.data.data() + ((t * v.depth() + z) * hw);
            float* dst = out.data.data() + ((t * target_z + (z + offset)) * hw);
            std::copy(src, src + hw, dst);
        }
    return out;
}

namespace detail {

// align-corners source coordinate: i * (n-1) / (n'-1); single-sample axes map to 0.
inline double src_coord(i64 i, i64 n_in, i64 n_out) {
    if (n_out <= 1 || n_in <= 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(n_in - 1) /
           static_cast<double>(n_out - 1);
}

}  // namespace detail

// Per-frame trilinear resampling (align-corners). Interpolation runs in
// double and the result is clamped to the frame's own [min, max] so the
// convex-combination bound survives rounding.
inline Volume4D resample_trilinear(const Volume4D& v, std::array<i64, 3> new_shape) {
    v.validate();
    const auto [nz, ny, nx] = new_shape;
    require(nz > 0 && ny > 0 && nx > 0, "resample_trilinear: target dims must be positive");
    if (nz == v.depth() && ny == v.height() && nx == v.width()) return v;

    Volume4D out = make_volume({v.frames(), nz, ny, nx});
    out.meta.spacing = v.meta.spacing;
    out.meta.intensity_range = v.meta.intensity_range;
    out.meta.normalized = v.meta.normalized;

    const i64 Z = v.depth(), Y = v.height(), X = v.width();
    for (i64 t = 0; t < v.frames(); ++t) {
        auto src = v.frame(t);
        const auto [mn_it, mx_it] = std::minmax_element(src.begin(), src.end());
        const float lo = *mn_it, hi = *mx_it;
        auto sample = [&](i64 z, i64 y, i64 x) {
            return static_cast<double>(src[static_cast<size_t>((z * Y + y) * X + x)]);
        };
        auto dst = out.frame(t);
        for (i64 z = 0; z < nz; ++z) {
            const double fz = detail::src_coord(z, Z, nz);
            const i64 z0 = static_cast<i64>(fz), z1 = std::min(z0 + 1, Z - 1);
            const double wz = fz - static_cast<double>(z0);
            for (i64 y = 0; y < ny; ++y) {
                const double fy = detail::src_coord(y, Y, ny);
                const i64 y0 = static_cast<i64>(fy), y1 = std::min(y0 + 1, Y - 1);
                const double wy = fy - static_cast<double>(y0);
                for (i64 x = 0; x < nx; ++x) {
                    const double fx = detail::src_coord(x, X, nx);
                    const i64 x0 = static_cast<i64>(fx), x1 = std::min(x0 + 1, X - 1);
                    const double wx = fx - static_cast<double>(x0);
                    const double c00 = sample(z0, y0, x0) * (1 - wx) + sample(z0, y0, x1) * wx;
                    const double c01 = sample(z0, y1, x0) * (1 - wx) + sample(z0, y1, x1) * wx;
                    const double c10 = sample(z1, y0, x0) * (1 - wx) + sample(z1, y0, x1) * wx;
                    const double c11 = sample(z1, y1, x0) * (1 - wx) + sample(z1, y1, x1) * wx;
                    const double c0 = c00 * (1 - wy) + c01 * wy;
                    const double c1 = c10 * (1 - wy) + c11 * wy;
                    const float r = static_cast<float>(c0 * (1 - wz) + c1 * wz);
                    dst[static_cast<size_t>((z * ny + y) * nx + x)] = std::clamp(r, lo, hi);
                }
            }
        }
    }
    return out;
}

}  // namespace tssc

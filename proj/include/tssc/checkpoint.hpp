#pragma once

// Parameter checkpoints: a JSON manifest listing entry names, shapes, and
// byte offsets next to a raw little-endian float32 payload. One container
// holds any number of named sections (model params, optimizer moments) as
// long as each section's struct exposes visit_tensors. Round trips are
// bit-exact for float parameters.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tssc/core.hpp"

namespace tssc {

namespace detail {

inline bool ckpt_little_endian() {
    const u64 probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

inline void ckpt_write_f32(std::ofstream& f, const float* src, size_t count) {
    if (ckpt_little_endian()) {
        f.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(count * 4));
        return;
    }
    for (size_t i = 0; i < count; ++i) {
        unsigned char b[4];
        std::memcpy(b, src + i, 4);
        std::swap(b[0], b[3]);
        std::swap(b[1], b[2]);
        f.write(reinterpret_cast<const char*>(b), 4);
    }
}

inline void ckpt_read_f32(std::ifstream& f, float* dst, size_t count) {
    f.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * 4));
    if (!ckpt_little_endian()) {
        for (size_t i = 0; i < count; ++i) {
            unsigned char b[4];
            std::memcpy(b, dst + i, 4);
            std::swap(b[0], b[3]);
            std::swap(b[1], b[2]);
            std::memcpy(dst + i, b, 4);
        }
    }
}

}  // namespace detail

// FNV-1a over the raw bytes of every tensor in visit order; used for the
// stage-1 freeze contract.
template <typename Params>
std::string params_hash(const Params& p) {
    u64 h = 1469598103934665603ull;
    p.visit_tensors([&](const std::string& name, const auto& t) {
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.v.data());
        for (size_t i = 0; i < t.v.size() * sizeof(t.v[0]); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    });
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// Writes <base>.json and <base>.bin. Sections are (prefix, params) pairs;
// entry names are "<prefix>.<tensor name>" (or the bare name when the
// prefix is empty).
template <typename Params>
void save_checkpoint(const std::filesystem::path& base, const std::string& kind,
                     const std::vector<std::pair<std::string, const Params*>>& sections,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json entries = nlohmann::json::array();
    i64 offset = 0;
    for (const auto& [prefix, params] : sections) {
        require(params != nullptr, "save_checkpoint: null section");
        params->visit_tensors([&](const std::string& name, const auto& t) {
            nlohmann::json e;
            e["name"] = prefix.empty() ? name : prefix + "." + name;
            e["shape"] = t.shape;
            e["offset"] = offset;
            entries.push_back(std::move(e));
            offset += t.numel() * 4;
        });
    }
    nlohmann::json manifest;
    manifest["format"] = "tssc-checkpoint-v1";
    manifest["kind"] = kind;
    manifest["dtype"] = "f32";
    manifest["payload_bytes"] = offset;
    manifest["entries"] = std::move(entries);
    manifest["extra"] = extra;

    std::filesystem::path bin = base;
    bin += ".bin";
    std::ofstream bf(bin, std::ios::binary | std::ios::trunc);
    if (!bf) throw IoError("cannot open checkpoint payload for writing: " + bin.string());
    for (const auto& [prefix, params] : sections)
        params->visit_tensors([&](const std::string&, const auto& t) {
            static_assert(sizeof(t.v[0]) == 4, "checkpoint payload is float32");
            detail::ckpt_write_f32(bf, t.v.data(), t.v.size());
        });
    bf.flush();
    if (!bf) throw IoError("failed writing checkpoint payload: " + bin.string());

    std::filesystem::path mf = base;
    mf += ".json";
    std::ofstream jf(mf, std::ios::trunc);
    if (!jf) throw IoError("cannot open checkpoint manifest for writing: " + mf.string());
    jf << manifest.dump(2) << "\n";
    jf.flush();
    if (!jf) throw IoError("failed writing checkpoint manifest: " + mf.string());
}

template <typename Params>
void save_checkpoint(const std::filesystem::path& base, const std::string& kind,
                     const Params& params,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    save_checkpoint<Params>(base, kind, {{std::string(), &params}}, extra);
}

// Fills the given sections from <base>.json/<base>.bin and returns the
// manifest's extra block. Every expected tensor must be present with the
// exact shape and offset recorded at save time.
template <typename Params>
nlohmann::json load_checkpoint(const std::filesystem::path& base, const std::string& kind,
                               const std::vector<std::pair<std::string, Params*>>& sections) {
    std::filesystem::path mf = base;
    mf += ".json";
    std::ifstream jf(mf);
    if (!jf) throw IoError("cannot open checkpoint manifest: " + mf.string());
    nlohmann::json manifest;
    try {
        jf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint manifest " + mf.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "tssc-checkpoint-v1")
        throw IoError("unrecognized checkpoint format in " + mf.string());
    if (manifest.value("kind", "") != kind)
        throw IoError("checkpoint kind mismatch in " + mf.string() + ": expected '" + kind +
                      "', found '" + manifest.value("kind", "") + "'");
    if (manifest.value("dtype", "") != "f32")
        throw IoError("unsupported checkpoint dtype in " + mf.string());
    if (!manifest.contains("entries") || !manifest["entries"].is_array())
        throw IoError("checkpoint manifest lacks an entry table: " + mf.string());

    struct EntryInfo {
        std::vector<i64> shape;
        i64 offset = 0;
    };
    std::vector<std::pair<std::string, EntryInfo>> table;
    for (const auto& e : manifest["entries"]) {
        EntryInfo info;
        info.shape = e.at("shape").get<std::vector<i64>>();
        info.offset = e.at("offset").get<i64>();
        table.emplace_back(e.at("name").get<std::string>(), std::move(info));
    }

    std::filesystem::path bin = base;
    bin += ".bin";
    std::ifstream bf(bin, std::ios::binary);
    if (!bf) throw IoError("cannot open checkpoint payload: " + bin.string());
    bf.seekg(0, std::ios::end);
    const i64 actual = static_cast<i64>(bf.tellg());
    const i64 expect = manifest.value("payload_bytes", i64(-1));
    if (actual != expect)
        throw IoError("checkpoint payload size mismatch in " + bin.string() + ": expected " +
                      std::to_string(expect) + " bytes, found " + std::to_string(actual));

    for (const auto& [prefix, params] : sections) {
        require(params != nullptr, "load_checkpoint: null section");
        params->visit_tensors([&](const std::string& name, auto& t) {
            const std::string full = prefix.empty() ? name : prefix + "." + name;
            const EntryInfo* found = nullptr;
            for (const auto& [ename, info] : table)
                if (ename == full) {
                    found = &info;
                    break;
                }
            if (!found) throw IoError("checkpoint entry missing: " + full);
            if (found->shape != t.shape)
                throw IoError("checkpoint shape mismatch for " + full);
            bf.seekg(found->offset);
            detail::ckpt_read_f32(bf, t.v.data(), t.v.size());
            if (!bf) throw IoError("failed reading checkpoint entry: " + full);
        });
    }
    return manifest.value("extra", nlohmann::json::object());
}

template <typename Params>
nlohmann::json load_checkpoint(const std::filesystem::path& base, const std::string& kind,
                               Params& params) {
    return load_checkpoint<Params>(base, kind, {{std::string(), &params}});
}

}  // namespace tssc

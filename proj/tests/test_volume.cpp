#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tssc/volume.hpp"

using namespace tssc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "tssc_volume_tests";
    fs::create_directories(d);
    return d;
}

Volume4D random_volume(std::array<i64, 4> shape, u64 seed) {
    auto v = make_volume(shape);
    Rng rng(seed);
    for (float& x : v.data) x = static_cast<float>(rng.normal() * 3.0 + 1.0);
    return v;
}

}  // namespace

TEST_CASE("save/load round-trips zeros bit-exactly") {
    auto v = make_volume({2, 2, 2, 2});
    v.meta.spacing = std::array<double, 4>{1.0, 2.0, 0.5, 0.5};
    const auto p = temp_dir() / "zeros";
    save_volume4d(v, p);

    REQUIRE(fs::file_size(temp_dir() / "zeros.raw") == 2 * 2 * 2 * 2 * 4);
    auto r = load_volume4d(p);
    CHECK(r.meta.shape == v.meta.shape);
    REQUIRE(r.meta.spacing.has_value());
    CHECK(*r.meta.spacing == *v.meta.spacing);
    CHECK(r.data == v.data);
}

TEST_CASE("save/load round-trips arbitrary payloads bit-exactly") {
    auto v = random_volume({3, 4, 5, 6}, 17);
    v.meta.normalized = false;
    const auto p = temp_dir() / "rand";
    save_volume4d(v, p);
    auto r = load_volume4d(p);
    CHECK(r.data == v.data);  // vector<float> equality is bitwise for finite floats
    CHECK(r.meta.shape == v.meta.shape);
    CHECK(r.meta.normalized == v.meta.normalized);
    CHECK_FALSE(r.meta.intensity_range.has_value());
}

TEST_CASE("truncated payload reports expected vs found byte counts") {
    auto v = make_volume({2, 2, 2, 2}, 1.0f);
    const auto p = temp_dir() / "trunc";
    save_volume4d(v, p);
    const auto raw = temp_dir() / "trunc.raw";
    fs::resize_file(raw, fs::file_size(raw) - 4);
    try {
        load_volume4d(p);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("64") != std::string::npos);
        CHECK(msg.find("60") != std::string::npos);
    }
}

TEST_CASE("missing or corrupt sidecar raises IoError") {
    const auto p = temp_dir() / "nosuch";
    CHECK_THROWS_AS(load_volume4d(p), IoError);

    const auto bad = temp_dir() / "badmeta";
    {
        std::ofstream f(bad.string() + ".meta.json");
        f << "{ not json";
    }
    CHECK_THROWS_AS(load_volume4d(bad), IoError);

    const auto wrongfmt = temp_dir() / "wrongfmt";
    {
        std::ofstream f(wrongfmt.string() + ".meta.json");
        f << R"({"format":"other","shape":[1,1,1,1]})";
    }
    CHECK_THROWS_AS(load_volume4d(wrongfmt), IoError);
}

TEST_CASE("save into unwritable directory raises IoError") {
    CHECK_THROWS_AS(save_volume4d(make_volume({1, 1, 1, 1}), "/nonexistent_dir_tssc/x"),
                    IoError);
}

TEST_CASE("normalize maps endpoints and midpoint") {
    auto v = make_volume({1, 1, 1, 3});
    v.data = {0.0f, 5.0f, 10.0f};
    auto n = normalize_volume(v);
    CHECK(n.data[0] == -1.0f);
    CHECK(n.data[1] == 0.0f);
    CHECK(n.data[2] == 1.0f);
    CHECK(n.meta.normalized);
    REQUIRE(n.meta.intensity_range.has_value());
    CHECK((*n.meta.intensity_range)[0] == 0.0);
    CHECK((*n.meta.intensity_range)[1] == 10.0);
}

TEST_CASE("normalize rejects constant volumes") {
    CHECK_THROWS_AS(normalize_volume(make_volume({1, 2, 2, 2}, 7.0f)), NumericError);
}

TEST_CASE("normalize/denormalize round-trip within 1e-6 relative error") {
    auto v = random_volume({2, 3, 4, 5}, 99);
    auto n = normalize_volume(v);
    for (float x : n.data) {
        CHECK(x >= -1.0f);
        CHECK(x <= 1.0f);
    }
    auto d = denormalize_volume(n);
    const double range = (*n.meta.intensity_range)[1] - (*n.meta.intensity_range)[0];
    for (size_t i = 0; i < v.data.size(); ++i)
        CHECK(std::abs(static_cast<double>(d.data[i]) - v.data[i]) <= 1e-6 * range);
    CHECK_FALSE(d.meta.normalized);
}

TEST_CASE("denormalize rejects volumes without normalization record") {
    CHECK_THROWS_AS(denormalize_volume(make_volume({1, 1, 1, 2})), UsageError);
}

TEST_CASE("slice_to_2dt extracts the z plane") {
    auto v = make_volume({2, 5, 2, 2});
    for (i64 t = 0; t < 2; ++t)
        for (i64 z = 0; z < 5; ++z)
            for (i64 y = 0; y < 2; ++y)
                for (i64 x = 0; x < 2; ++x) v.at(t, z, y, x) = static_cast<float>(z);
    auto s = slice_to_2dt(v, 3);
    CHECK(s.z_index == 3);
    for (float x : s.data) CHECK(x == 3.0f);

    auto v1 = random_volume({4, 1, 3, 3}, 5);
    auto s1 = slice_to_2dt(v1, 0);
    CHECK(s1.data == v1.data);

    CHECK_THROWS_AS(slice_to_2dt(v, 5), UsageError);
    CHECK_THROWS_AS(slice_to_2dt(v, -1), UsageError);
}

TEST_CASE("slice then reassemble reconstructs the parent bit-exactly") {
    auto v = random_volume({3, 4, 5, 6}, 123);
    for (i64 t = 0; t < v.frames(); ++t) {
        std::vector<std::vector<float>> planes;
        for (i64 z = 0; z < v.depth(); ++z) {
            auto s = slice_to_2dt(v, z);
            auto f = s.frame(t);
            planes.emplace_back(f.begin(), f.end());
        }
        auto rebuilt = reassemble_3d(planes, v.height(), v.width());
        auto orig = v.frame(t);
        REQUIRE(rebuilt.size() == orig.size());
        for (size_t i = 0; i < rebuilt.size(); ++i) REQUIRE(rebuilt[i] == orig[i]);
    }
}

TEST_CASE("reassemble_3d validates input") {
    CHECK_THROWS_AS(reassemble_3d({}, 2, 2), UsageError);
    CHECK_THROWS_AS(reassemble_3d({{1.0f, 2.0f}, {1.0f}}, 1, 2), UsageError);
    auto one = reassemble_3d({{1.0f, 2.0f}}, 1, 2);
    CHECK(one == std::vector<float>{1.0f, 2.0f});
}

TEST_CASE("pad_z centers the original slices") {
    auto v = make_volume({1, 2, 1, 1});
    v.at(0, 0, 0, 0) = 3.0f;
    v.at(0, 1, 0, 0) = 4.0f;
    auto p = pad_z(v, 4);
    CHECK(p.meta.shape == std::array<i64, 4>{1, 4, 1, 1});
    CHECK(p.at(0, 0, 0, 0) == 0.0f);
    CHECK(p.at(0, 1, 0, 0) == 3.0f);
    CHECK(p.at(0, 2, 0, 0) == 4.0f);
    CHECK(p.at(0, 3, 0, 0) == 0.0f);

    auto same = pad_z(v, 2);
    CHECK(same.data == v.data);
    CHECK_THROWS_AS(pad_z(v, 1), UsageError);
}

TEST_CASE("pad_z preserves the sample sum") {
    auto v = random_volume({2, 3, 4, 4}, 7);
    auto p = pad_z(v, 9);
    const double s0 = std::accumulate(v.data.begin(), v.data.end(), 0.0);
    const double s1 = std::accumulate(p.data.begin(), p.data.end(), 0.0);
    CHECK(s0 == Catch::Approx(s1).margin(1e-6));
    // zero rows really are zero, so the sums agree exactly as sets of addends
    i64 nonzero = 0;
    for (float x : p.data)
        if (x != 0.0f) ++nonzero;
    CHECK(nonzero <= static_cast<i64>(v.data.size()));
}

TEST_CASE("resample_trilinear identity and constants") {
    auto v = random_volume({2, 3, 4, 5}, 31);
    auto same = resample_trilinear(v, {3, 4, 5});
    CHECK(same.data == v.data);

    auto c = make_volume({1, 2, 2, 2}, 2.5f);
    auto r = resample_trilinear(c, {5, 3, 7});
    for (float x : r.data) CHECK(x == 2.5f);
}

TEST_CASE("resample_trilinear ramp hand case") {
    auto v = make_volume({1, 1, 1, 2});
    v.data = {0.0f, 1.0f};
    auto r = resample_trilinear(v, {1, 1, 3});
    REQUIRE(r.data.size() == 3);
    CHECK(r.data[0] == 0.0f);
    CHECK(r.data[1] == 0.5f);
    CHECK(r.data[2] == 1.0f);

    CHECK_THROWS_AS(resample_trilinear(v, {0, 1, 1}), UsageError);
}

TEST_CASE("resample_trilinear stays within each frame's min/max") {
    auto v = random_volume({2, 4, 5, 6}, 77);
    auto r = resample_trilinear(v, {7, 3, 11});
    for (i64 t = 0; t < v.frames(); ++t) {
        auto src = v.frame(t);
        const auto [mn, mx] = std::minmax_element(src.begin(), src.end());
        for (float x : r.frame(t)) {
            CHECK(x >= *mn);
            CHECK(x <= *mx);
        }
    }
}

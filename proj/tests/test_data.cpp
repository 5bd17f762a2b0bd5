#include <doctest.h>

#include <cstring>
#include <fstream>

#include <zlib.h>

#include "diffusereg/data.hpp"
#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"
#include "diffusereg/metrics.hpp"
#include "support.hpp"

using namespace dreg;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

RegistrationSample small_sample(const std::string& id, Shape3 s, std::uint64_t seed) {
    RegistrationSample r;
    r.id = id;
    auto img = [&](std::uint64_t k) {
        auto v = testing::randu(s.size(), seed + k);
        for (auto& x : v) x = static_cast<float>(x);
        Volume out(s, v);
        out.normalize_intensity();
        for (auto& x : out.data) x = static_cast<float>(x);
        return out;
    };
    r.fixed = img(0);
    r.moving = img(1);
    SegMask m(s);
    m.label_ids = {1, 2};
    for (std::size_t i = 0; i < s.size(); ++i) m.labels[i] = static_cast<std::int32_t>(i % 3);
    r.fixed_mask = m;
    r.moving_mask = m;
    auto f = testing::randn(3 * s.size(), seed + 2);
    for (auto& x : f) x = static_cast<float>(x);
    r.phi0 = DeformationField(s, f, false);
    return r;
}

/// Minimal NIfTI-1 writer (float32 voxels, little or big endian).
std::string nifti_bytes(Shape3 s, int components, const std::vector<float>& data, bool big_endian, float slope = 1.0f) {
    std::string h(352, '\0');
    auto put = [&](std::size_t off, auto v) {
        auto* p = reinterpret_cast<unsigned char*>(&v);
        if (big_endian) std::reverse(p, p + sizeof v);
        std::memcpy(h.data() + off, &v, sizeof v);
    };
    put(0, std::int32_t{348});
    const std::int16_t dims[8] = {static_cast<std::int16_t>(components > 1 ? 5 : 3), static_cast<std::int16_t>(s.w),
                                  static_cast<std::int16_t>(s.h), static_cast<std::int16_t>(s.d), 1,
                                  static_cast<std::int16_t>(components), 1, 1};
    for (int i = 0; i < 8; ++i) put(40 + 2 * i, dims[i]);
    put(70, std::int16_t{16});
    put(72, std::int16_t{32});
    for (int i = 0; i < 8; ++i) put(76 + 4 * i, 1.0f);
    put(108, 352.0f);
    put(112, slope);
    put(116, 0.0f);
    h[344] = 'n';
    h[345] = '+';
    h[346] = '1';
    for (float v : data) {
        auto* p = reinterpret_cast<unsigned char*>(&v);
        if (big_endian) std::reverse(p, p + 4);
        h.append(reinterpret_cast<const char*>(p), 4);
    }
    return h;
}

void write_gz(const fs::path& p, const std::string& bytes) {
    gzFile gz = gzopen(p.string().c_str(), "wb");
    REQUIRE(gz != nullptr);
    gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(gz);
}

}  // namespace

TEST_CASE("empty manifest yields an empty dataset") {
    testing::TempDir dir("data");
    write_text(dir / "manifest.json", R"({"version": 1, "samples": []})");
    const Dataset ds(dir / "manifest.json");
    CHECK(ds.size() == 0);
    CHECK(ds.split("train").empty());
    CHECK_THROWS_AS(ds.load(0), ArgumentError);
}

TEST_CASE("write and load round trip is exact") {
    testing::TempDir dir("data");
    DatasetManifest m;
    const Shape3 s{4, 5, 6};
    const RegistrationSample a = small_sample("a", s, 10), b = small_sample("b", s, 20);
    write_sample(dir.path(), a, m);
    write_sample(dir.path(), b, m);
    m.train = {"a"};
    m.test = {"b"};
    save_manifest(dir.path(), m);

    const Dataset ds(dir / "manifest.json");
    REQUIRE(ds.size() == 2);
    const auto back = ds.load("b");
    CHECK(back.fixed.data == b.fixed.data);
    CHECK(back.moving.data == b.moving.data);
    CHECK(back.fixed_mask->labels == b.fixed_mask->labels);
    CHECK(back.fixed_mask->label_ids == std::vector<std::int32_t>{1, 2});
    CHECK(back.phi0->disp == b.phi0->disp);
    CHECK_FALSE(back.phi0->normalized);
    CHECK_FALSE(back.phi_gt.has_value());
    CHECK(ds.split("test") == std::vector<std::size_t>{1});
    CHECK_THROWS_AS(ds.split("val"), ArgumentError);
    CHECK_THROWS_AS(write_sample(dir.path(), a, m), DataError);
}

TEST_CASE("wrong declared shape names the sample") {
    testing::TempDir dir("data");
    DatasetManifest m;
    write_sample(dir.path(), small_sample("case_7", {4, 4, 4}, 1), m);
    m.samples[0].shape = {4, 4, 5};
    save_manifest(dir.path(), m);
    try {
        Dataset ds(dir / "manifest.json");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(e.subject() == "case_7");
        CHECK(std::string(e.what()).find("case_7") != std::string::npos);
    }
}

TEST_CASE("corrupted blob fails its checksum") {
    testing::TempDir dir("data");
    DatasetManifest m;
    write_sample(dir.path(), small_sample("x", {4, 4, 4}, 3), m);
    save_manifest(dir.path(), m);
    {
        std::fstream f(dir / "x/moving.f32", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        f.put('\x7f');
    }
    const Dataset ds(dir / "manifest.json");
    try {
        ds.load(0);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(e.subject() == "x");
    }
}

TEST_CASE("malformed manifests are rejected") {
    testing::TempDir dir("data");
    write_text(dir / "manifest.json", "{not json");
    CHECK_THROWS_AS(Dataset(dir / "manifest.json"), DataError);
    write_text(dir / "manifest.json", R"({"version": 99, "samples": []})");
    CHECK_THROWS_AS(Dataset(dir / "manifest.json"), DataError);
    write_text(dir / "manifest.json", R"({"version": 1, "samples": [{"id": "q", "shape": [2, 2]}]})");
    CHECK_THROWS_AS(Dataset(dir / "manifest.json"), DataError);
}

TEST_CASE("field statistics") {
    const Shape3 s{1, 1, 2};
    DeformationField a(s, {1, 3, 0, 0, 5, 5}, false);
    DeformationField b(s, {5, 7, 2, 2, 1, 1}, false);
    const FieldStats st = compute_field_stats({&a, &b});
    CHECK(st.mu[0] == doctest::Approx(4.0));
    CHECK(st.sigma[0] == doctest::Approx(std::sqrt(5.0)));
    CHECK(st.mu[1] == doctest::Approx(1.0));
    CHECK(st.sigma[1] == doctest::Approx(1.0));
    CHECK(st.mu[2] == doctest::Approx(3.0));
    CHECK(st.sigma[2] == doctest::Approx(2.0));

    const FieldStats swapped = compute_field_stats({&b, &a});
    for (int c = 0; c < 3; ++c) {
        CHECK(swapped.mu[c] == doctest::Approx(st.mu[c]));
        CHECK(swapped.sigma[c] == doctest::Approx(st.sigma[c]));
    }

    DeformationField flat(s, {1, 1, 2, 3, 4, 5}, false);
    CHECK_THROWS_AS(compute_field_stats({&flat}), DataError);
    CHECK_THROWS_AS(compute_field_stats({}), DataError);
}

TEST_CASE("synthetic pairs") {
    const Shape3 s{16, 16, 16};
    SUBCASE("amplitude zero is the identity") {
        const auto p = synth_pair(5, s, 0.0);
        CHECK(p.fixed.data == p.moving.data);
        CHECK(p.fixed_mask->labels == p.moving_mask->labels);
        for (double v : p.phi_gt->disp) CHECK(v == 0.0);
    }
    SUBCASE("ground truth is fold free and explains the pair") {
        const auto p = synth_pair(6, s, 3.0);
        CHECK(njd(*p.phi_gt) == 0.0);
        const SegMask warped = warp_mask(*p.moving_mask, *p.phi_gt);
        CHECK(dice_overall(warped, *p.fixed_mask, {1, 2, 3}) >= 0.99);
        double peak = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            double len = 0.0;
            for (int c = 0; c < 3; ++c) len += std::pow(p.phi_gt->channel(c)[i], 2);
            peak = std::max(peak, std::sqrt(len));
        }
        CHECK(peak == doctest::Approx(3.0).epsilon(1e-5));
        for (int l : {1, 2, 3}) CHECK(std::count(p.moving_mask->labels.begin(), p.moving_mask->labels.end(), l) > 0);
    }
    SUBCASE("deterministic per seed") {
        const auto a = synth_pair(9, s, 2.0), b = synth_pair(9, s, 2.0), c = synth_pair(10, s, 2.0);
        CHECK(a.fixed.data == b.fixed.data);
        CHECK(a.phi0->disp == b.phi0->disp);
        CHECK(a.fixed.data != c.fixed.data);
    }
    CHECK_THROWS_AS(synth_pair(1, {3, 16, 16}, 1.0), ArgumentError);
    CHECK_THROWS_AS(synth_pair(1, s, -1.0), ArgumentError);
}

TEST_CASE("synthetic dataset round trip") {
    testing::TempDir dir("data");
    const auto m = write_synthetic_dataset(dir.path(), 3, 2, {8, 8, 8}, 1.5, 4);
    REQUIRE(m.stats.has_value());
    const Dataset ds(dir / "manifest.json");
    CHECK(ds.split("train").size() == 3);
    CHECK(ds.split("test").size() == 2);
    const auto direct = synth_pair(4 * 100003ull + 3, {8, 8, 8}, 1.5);
    const auto loaded = ds.load("test_0");
    CHECK(loaded.fixed.data == direct.fixed.data);
    CHECK(loaded.phi_gt->disp == direct.phi_gt->disp);
}

TEST_CASE("nifti reader") {
    testing::TempDir dir("nii");
    const Shape3 s{2, 3, 4};
    std::vector<float> v(s.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);

    write_text(dir / "le.nii", nifti_bytes(s, 1, v, false));
    write_gz(dir / "be.nii.gz", nifti_bytes(s, 1, v, true, 2.0f));
    const NiftiImage le = read_nifti(dir / "le.nii");
    const NiftiImage be = read_nifti(dir / "be.nii.gz");
    CHECK(le.shape == s);
    CHECK(be.shape == s);
    CHECK(le.components == 1);
    // x is the fastest NIfTI axis and maps to width.
    CHECK(le.data[s.index(1, 2, 3)] == doctest::Approx(1 * 12 + 2 * 4 + 3));
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(be.data[i] == doctest::Approx(2.0 * v[i]));

    write_text(dir / "bad.nii", std::string(400, 'x'));
    CHECK_THROWS_AS(read_nifti(dir / "bad.nii"), DataError);
    CHECK_THROWS_AS(read_nifti(dir / "missing.nii"), DataError);
}

TEST_CASE("ingest pair list") {
    testing::TempDir dir("ingest");
    const Shape3 s{4, 6, 8};
    std::vector<float> img(s.size()), mask(s.size()), field(3 * s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        img[i] = static_cast<float>(i % 7);
        mask[i] = static_cast<float>(i % 2);
    }
    // NIfTI components (x, y, z) hold 1, 2, 3.
    for (int c = 0; c < 3; ++c) std::fill(field.begin() + c * s.size(), field.begin() + (c + 1) * s.size(), float(c + 1));
    for (const char* name : {"f.nii", "m.nii"}) write_text(dir / name, nifti_bytes(s, 1, img, false));
    for (const char* name : {"fm.nii", "mm.nii"}) write_text(dir / name, nifti_bytes(s, 1, mask, false));
    write_text(dir / "phi.nii", nifti_bytes(s, 3, field, false));
    write_text(dir / "pairs.csv", "# id,fixed,moving,fixed_mask,moving_mask,phi0\np0,f.nii,m.nii,fm.nii,mm.nii,phi.nii\n"
                                  "p1, f.nii, m.nii ,fm.nii,mm.nii,phi.nii\n");

    IngestOptions opt;
    opt.crop = Shape3{4, 4, 4};
    opt.n_test = 1;
    const auto m = ingest_pairs(dir / "pairs.csv", dir / "out", opt);
    CHECK(m.train == std::vector<std::string>{"p0"});
    CHECK(m.test == std::vector<std::string>{"p1"});
    const Dataset ds(dir / "out/manifest.json");
    const auto p = ds.load("p0");
    CHECK(p.fixed.shape == Shape3{4, 4, 4});
    CHECK(p.phi0->channel(0)[0] == 3.0);
    CHECK(p.phi0->channel(2)[0] == 1.0);
    CHECK(p.fixed_mask->label_ids == std::vector<std::int32_t>{1});

    opt.crop.reset();
    opt.resample = Shape3{4, 6, 15};
    const auto r = ingest_pairs(dir / "pairs.csv", dir / "out2", opt);
    const auto q = Dataset(dir / "out2/manifest.json").load("p1");
    CHECK(q.fixed.shape == Shape3{4, 6, 15});
    CHECK(q.phi0->channel(2)[5] == doctest::Approx(2.0));
    CHECK(q.phi0->channel(0)[5] == doctest::Approx(3.0));

    write_text(dir / "broken.csv", "only,two\n");
    CHECK_THROWS_AS(ingest_pairs(dir / "broken.csv", dir / "out3", {}), DataError);
    write_text(dir / "wrong.csv", "w0,f.nii,phi.nii\n");
    try {
        ingest_pairs(dir / "wrong.csv", dir / "out4", {});
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(e.subject() == "w0");
    }
}

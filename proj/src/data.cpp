#include "diffusereg/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"
#include "diffusereg/io.hpp"
#include "diffusereg/metrics.hpp"
#include "diffusereg/random.hpp"

namespace fs = std::filesystem;

namespace dreg {

static_assert(std::endian::native == std::endian::little, "raw blobs are read in native little-endian order");

void RegistrationSample::validate() const {
    const Shape3 s = fixed.shape;
    auto check = [&](Shape3 other, const char* what) {
        if (!(other == s))
            throw DataError(id, std::string(what) + " has shape " + other.str() + ", fixed has " + s.str());
    };
    check(moving.shape, "moving");
    if (fixed_mask) check(fixed_mask->shape, "fixed mask");
    if (moving_mask) check(moving_mask->shape, "moving mask");
    if (phi0) check(phi0->shape, "phi0");
    if (phi_gt) check(phi_gt->shape, "phi_gt");
    if (fixed.data.size() != s.size() || moving.data.size() != s.size()) throw DataError(id, "volume size mismatch");
}

// ---- manifest -------------------------------------------------------------------

nlohmann::json BlobRef::to_json() const {
    return {{"file", file}, {"dtype", dtype}, {"channels", channels}, {"crc32", crc32}};
}

BlobRef BlobRef::from_json(const nlohmann::json& j) {
    BlobRef b;
    b.file = j.at("file").get<std::string>();
    b.dtype = j.value("dtype", std::string("float32"));
    b.channels = j.value("channels", 1);
    b.crc32 = j.value("crc32", 0u);
    if (b.dtype != "float32" && b.dtype != "int32") throw DataError(b.file, "unsupported dtype '" + b.dtype + "'");
    if (b.channels < 1) throw DataError(b.file, "channels must be >= 1");
    return b;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json j;
    j["version"] = version;
    j["samples"] = nlohmann::json::array();
    for (const auto& e : samples) {
        nlohmann::json s{{"id", e.id}, {"shape", {e.shape.d, e.shape.h, e.shape.w}}, {"fixed", e.fixed.to_json()},
                         {"moving", e.moving.to_json()}};
        if (e.fixed_mask) s["fixed_mask"] = e.fixed_mask->to_json();
        if (e.moving_mask) s["moving_mask"] = e.moving_mask->to_json();
        if (e.phi0) s["phi0"] = e.phi0->to_json();
        if (e.phi_gt) s["phi_gt"] = e.phi_gt->to_json();
        if (!e.label_ids.empty()) s["label_ids"] = e.label_ids;
        j["samples"].push_back(std::move(s));
    }
    if (stats) j["stats"] = {{"mu", stats->mu}, {"sigma", stats->sigma}};
    j["split"] = {{"train", train}, {"test", test}};
    return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.version = j.at("version").get<int>();
        if (m.version != kManifestVersion)
            throw DataError("manifest", "unsupported version " + std::to_string(m.version));
        for (const auto& s : j.at("samples")) {
            SampleEntry e;
            e.id = s.at("id").get<std::string>();
            try {
                const auto shape = s.at("shape").get<std::vector<int>>();
                if (shape.size() != 3 || *std::min_element(shape.begin(), shape.end()) < 1)
                    throw DataError(e.id, "shape must be three positive integers");
                e.shape = {shape[0], shape[1], shape[2]};
                e.fixed = BlobRef::from_json(s.at("fixed"));
                e.moving = BlobRef::from_json(s.at("moving"));
                if (s.contains("fixed_mask")) e.fixed_mask = BlobRef::from_json(s["fixed_mask"]);
                if (s.contains("moving_mask")) e.moving_mask = BlobRef::from_json(s["moving_mask"]);
                if (s.contains("phi0")) e.phi0 = BlobRef::from_json(s["phi0"]);
                if (s.contains("phi_gt")) e.phi_gt = BlobRef::from_json(s["phi_gt"]);
                e.label_ids = s.value("label_ids", std::vector<std::int32_t>{});
            } catch (const nlohmann::json::exception& ex) {
                throw DataError(e.id, std::string("malformed entry: ") + ex.what());
            }
            m.samples.push_back(std::move(e));
        }
        if (j.contains("stats")) {
            FieldStats st;
            st.mu = j["stats"].at("mu").get<std::array<double, 3>>();
            st.sigma = j["stats"].at("sigma").get<std::array<double, 3>>();
            st.validate();
            m.stats = st;
        }
        if (j.contains("split")) {
            m.train = j["split"].value("train", std::vector<std::string>{});
            m.test = j["split"].value("test", std::vector<std::string>{});
        }
    } catch (const nlohmann::json::exception& ex) {
        throw DataError("manifest", std::string("malformed manifest: ") + ex.what());
    }
    return m;
}

// ---- raw blobs ------------------------------------------------------------------

std::uint32_t crc32_of(const void* data, std::size_t bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (bytes > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes, 1u << 30));
        crc = ::crc32(crc, p, chunk);
        p += chunk;
        bytes -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::uint32_t write_f32(const fs::path& path, const std::vector<double>& values) {
    std::vector<float> f(values.begin(), values.end());
    const std::string_view bytes(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
    write_file_atomic(path, bytes);
    return crc32_of(bytes.data(), bytes.size());
}

std::uint32_t write_i32(const fs::path& path, const std::vector<std::int32_t>& values) {
    const std::string_view bytes(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(std::int32_t));
    write_file_atomic(path, bytes);
    return crc32_of(bytes.data(), bytes.size());
}

namespace {

std::string read_blob(const fs::path& path, std::size_t bytes, std::optional<std::uint32_t> crc) {
    if (!fs::exists(path)) throw DataError(path.string(), "file not found");
    const auto size = fs::file_size(path);
    if (size != bytes)
        throw DataError(path.string(), "expected " + std::to_string(bytes) + " bytes, found " + std::to_string(size));
    std::string raw = read_file(path);
    if (crc && crc32_of(raw.data(), raw.size()) != *crc) throw DataError(path.string(), "checksum mismatch");
    return raw;
}

}  // namespace

std::vector<double> read_f32(const fs::path& path, std::size_t count, std::optional<std::uint32_t> crc) {
    const std::string raw = read_blob(path, count * sizeof(float), crc);
    std::vector<float> f(count);
    std::memcpy(f.data(), raw.data(), raw.size());
    return {f.begin(), f.end()};
}

std::vector<std::int32_t> read_i32(const fs::path& path, std::size_t count, std::optional<std::uint32_t> crc) {
    const std::string raw = read_blob(path, count * sizeof(std::int32_t), crc);
    std::vector<std::int32_t> v(count);
    std::memcpy(v.data(), raw.data(), raw.size());
    return v;
}

// ---- dataset --------------------------------------------------------------------

Dataset::Dataset(const fs::path& manifest_path) : root_(manifest_path.parent_path()) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(manifest_path.string(), std::string("invalid JSON: ") + ex.what());
    }
    manifest_ = DatasetManifest::from_json(j);
    for (const auto& e : manifest_.samples) {
        auto check = [&](const BlobRef& b, int channels) {
            const fs::path p = root_ / b.file;
            if (!fs::exists(p)) throw DataError(e.id, "missing file " + p.string());
            if (b.channels != channels) throw DataError(e.id, b.file + " declares " + std::to_string(b.channels) + " channels");
            const std::size_t expect = e.shape.size() * channels * 4;
            if (fs::file_size(p) != expect)
                throw DataError(e.id, b.file + " holds " + std::to_string(fs::file_size(p)) + " bytes but shape " +
                                          e.shape.str() + " needs " + std::to_string(expect));
        };
        check(e.fixed, 1);
        check(e.moving, 1);
        if (e.fixed_mask) check(*e.fixed_mask, 1);
        if (e.moving_mask) check(*e.moving_mask, 1);
        if (e.phi0) check(*e.phi0, 3);
        if (e.phi_gt) check(*e.phi_gt, 3);
    }
    for (const auto* list : {&manifest_.train, &manifest_.test})
        for (const auto& id : *list) index_of(id);
}

std::size_t Dataset::index_of(const std::string& id) const {
    for (std::size_t i = 0; i < manifest_.samples.size(); ++i)
        if (manifest_.samples[i].id == id) return i;
    throw DataError(id, "sample not in manifest");
}

std::vector<std::size_t> Dataset::split(const std::string& name) const {
    if (name != "train" && name != "test") throw ArgumentError("unknown split '" + name + "'");
    const auto& ids = name == "train" ? manifest_.train : manifest_.test;
    std::vector<std::size_t> out;
    if (manifest_.train.empty() && manifest_.test.empty()) {
        for (std::size_t i = 0; i < size(); ++i) out.push_back(i);
        return out;
    }
    for (const auto& id : ids) out.push_back(index_of(id));
    return out;
}

RegistrationSample Dataset::load(const std::string& id) const { return load(index_of(id)); }

RegistrationSample Dataset::load(std::size_t i) const {
    if (i >= size()) throw ArgumentError("sample index out of range");
    const SampleEntry& e = manifest_.samples[i];
    try {
        auto f32 = [&](const BlobRef& b) {
            if (b.dtype != "float32") throw DataError(e.id, b.file + " must be float32");
            return read_f32(root_ / b.file, e.shape.size() * b.channels, b.crc32);
        };
        auto mask = [&](const BlobRef& b) {
            if (b.dtype != "int32") throw DataError(e.id, b.file + " must be int32");
            SegMask m(e.shape);
            m.labels = read_i32(root_ / b.file, e.shape.size(), b.crc32);
            m.label_ids = e.label_ids;
            if (m.label_ids.empty()) m.label_ids = m.present_labels();
            m.validate();
            return m;
        };
        RegistrationSample s;
        s.id = e.id;
        s.fixed = Volume(e.shape, f32(e.fixed));
        s.moving = Volume(e.shape, f32(e.moving));
        s.fixed.normalize_intensity();
        s.moving.normalize_intensity();
        if (e.fixed_mask) s.fixed_mask = mask(*e.fixed_mask);
        if (e.moving_mask) s.moving_mask = mask(*e.moving_mask);
        if (e.phi0) s.phi0 = DeformationField(e.shape, f32(*e.phi0), false);
        if (e.phi_gt) s.phi_gt = DeformationField(e.shape, f32(*e.phi_gt), false);
        s.validate();
        return s;
    } catch (const DataError& ex) {
        if (ex.subject() == e.id) throw;
        throw DataError(e.id, ex.what());
    }
}

Dataset load_dataset(const fs::path& manifest_path) { return Dataset(manifest_path); }

void write_sample(const fs::path& root, const RegistrationSample& s, DatasetManifest& manifest) {
    s.validate();
    if (s.id.empty() || s.id.find_first_of("/\\") != std::string::npos) throw DataError(s.id, "sample id must be a plain name");
    for (const auto& e : manifest.samples)
        if (e.id == s.id) throw DataError(s.id, "duplicate sample id");
    SampleEntry e;
    e.id = s.id;
    e.shape = s.fixed.shape;
    auto f32 = [&](const std::string& name, const std::vector<double>& v, int channels) {
        BlobRef b{s.id + "/" + name + ".f32", "float32", channels, 0};
        b.crc32 = write_f32(root / b.file, v);
        return b;
    };
    auto i32 = [&](const std::string& name, const SegMask& m) {
        BlobRef b{s.id + "/" + name + ".i32", "int32", 1, 0};
        b.crc32 = write_i32(root / b.file, m.labels);
        return b;
    };
    e.fixed = f32("fixed", s.fixed.data, 1);
    e.moving = f32("moving", s.moving.data, 1);
    if (s.fixed_mask) e.fixed_mask = i32("fixed_mask", *s.fixed_mask);
    if (s.moving_mask) e.moving_mask = i32("moving_mask", *s.moving_mask);
    if (s.phi0) e.phi0 = f32("phi0", s.phi0->disp, 3);
    if (s.phi_gt) e.phi_gt = f32("phi_gt", s.phi_gt->disp, 3);
    std::vector<std::int32_t> labels;
    for (const auto* m : {s.fixed_mask ? &*s.fixed_mask : nullptr, s.moving_mask ? &*s.moving_mask : nullptr}) {
        if (!m) continue;
        labels.insert(labels.end(), m->label_ids.begin(), m->label_ids.end());
    }
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    e.label_ids = labels;
    manifest.samples.push_back(std::move(e));
}

void save_manifest(const fs::path& root, const DatasetManifest& manifest) {
    write_file_atomic(root / "manifest.json", manifest.to_json().dump(2));
}

FieldStats compute_field_stats(const std::vector<const DeformationField*>& fields) {
    if (fields.empty()) throw DataError("field stats", "no fields given");
    FieldStats st;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        std::size_t n = 0;
        for (const auto* f : fields) {
            if (f->normalized) throw StateError("field stats need physical-unit fields");
            for (double v : f->channel(c)) {
                sum += v;
                ++n;
            }
        }
        const double mu = sum / static_cast<double>(n);
        for (const auto* f : fields)
            for (double v : f->channel(c)) sq += (v - mu) * (v - mu);
        const double sigma = std::sqrt(sq / static_cast<double>(n));
        if (!(sigma > 1e-12)) throw DataError("field stats", "channel " + std::to_string(c) + " has zero variance");
        st.mu[c] = mu;
        st.sigma[c] = sigma;
    }
    return st;
}

// ---- synthetic pairs ------------------------------------------------------------

namespace {

void blur_axis(std::vector<double>& v, Shape3 s, int axis, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) norm += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& x : k) x /= norm;
    const int n = s[axis];
    std::vector<double> out(v.size());
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                int p[3] = {z, y, x};
                const int c = p[axis];
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    p[axis] = std::clamp(c + i, 0, n - 1);
                    acc += k[i + radius] * v[s.index(p[0], p[1], p[2])];
                }
                out[s.index(z, y, x)] = acc;
            }
    v.swap(out);
}

/// Stationary smooth noise: blurred on a grid padded by 3 sigma, then cropped.
std::vector<double> smooth_noise(Shape3 s, double sigma, Rng& rng) {
    const int pad = static_cast<int>(std::ceil(3.0 * sigma));
    const Shape3 big{s.d + 2 * pad, s.h + 2 * pad, s.w + 2 * pad};
    std::vector<double> v(big.size());
    for (auto& x : v) x = rng.normal();
    for (int a = 0; a < 3; ++a) blur_axis(v, big, a, sigma);
    std::vector<double> out(s.size());
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) out[s.index(z, y, x)] = v[big.index(z + pad, y + pad, x + pad)];
    return out;
}

/// Smooth random field whose largest displacement length equals `amplitude`.
DeformationField smooth_field(Shape3 s, double sigma, double amplitude, Rng& rng) {
    DeformationField f(s);
    for (int c = 0; c < 3; ++c) {
        const auto n = smooth_noise(s, sigma, rng);
        std::copy(n.begin(), n.end(), f.channel(c).begin());
    }
    double peak = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        double len = 0.0;
        for (int c = 0; c < 3; ++c) len += f.channel(c)[i] * f.channel(c)[i];
        peak = std::max(peak, std::sqrt(len));
    }
    const double scale = peak > 0.0 ? amplitude / peak : 0.0;
    for (auto& v : f.disp) v *= scale;
    return f;
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void quantize(std::vector<double>& v) {
    for (auto& x : v) x = to_f32(x);
}

}  // namespace

RegistrationSample synth_pair(std::uint64_t seed, Shape3 shape, double amplitude, const SynthOptions& opt) {
    if (shape.min_edge() < 4) throw ArgumentError("synth_pair: every axis needs at least 4 voxels");
    if (!(amplitude >= 0.0)) throw ArgumentError("synth_pair: amplitude must be non-negative");
    Rng rng(seed);
    const double edge = shape.min_edge();
    RegistrationSample s;
    s.id = "synth_" + std::to_string(seed);

    // Moving image: blurred texture plus three nested/adjacent labelled ellipsoids.
    std::vector<double> texture = smooth_noise(shape, 1.0, rng);
    const auto [lo, hi] = std::minmax_element(texture.begin(), texture.end());
    const double tlo = *lo, tspan = std::max(*hi - *lo, 1e-12);
    for (auto& t : texture) t = (t - tlo) / tspan;

    auto uni = [&](double a, double b) { return a + (b - a) * rng.uniform(); };
    std::array<double, 3> centre{}, r1{}, r3{}, dir{};
    for (int a = 0; a < 3; ++a) {
        centre[a] = shape[a] * uni(0.4, 0.6) - 0.5;
        r1[a] = edge * uni(0.16, 0.22);
        r3[a] = edge * uni(0.13, 0.18);
    }
    const double wall = edge * 0.1;
    double norm = 0.0;
    for (auto& d : dir) {
        d = rng.normal();
        norm += d * d;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    std::array<double, 3> c3{};
    for (int a = 0; a < 3; ++a) c3[a] = centre[a] + dir[a] / norm * (r1[a] + wall + 0.8 * r3[a]);

    SegMask mask(shape);
    mask.label_ids = {1, 2, 3};
    Volume moving(shape);
    for (int z = 0; z < shape.d; ++z)
        for (int y = 0; y < shape.h; ++y)
            for (int x = 0; x < shape.w; ++x) {
                const double p[3] = {double(z), double(y), double(x)};
                double e1 = 0.0, e2 = 0.0, e3 = 0.0;
                for (int a = 0; a < 3; ++a) {
                    e1 += std::pow((p[a] - centre[a]) / r1[a], 2);
                    e2 += std::pow((p[a] - centre[a]) / (r1[a] + wall), 2);
                    e3 += std::pow((p[a] - c3[a]) / r3[a], 2);
                }
                std::int32_t label = 0;
                if (e1 <= 1.0)
                    label = 1;
                else if (e2 <= 1.0)
                    label = 2;
                else if (e3 <= 1.0)
                    label = 3;
                const std::size_t i = shape.index(z, y, x);
                static constexpr double kIntensity[4] = {0.05, 0.9, 0.4, 0.7};
                mask.labels[i] = label;
                moving.data[i] = kIntensity[label] + 0.25 * texture[i];
            }
    moving.normalize_intensity();
    quantize(moving.data);

    const double sigma = opt.field_smoothing * edge;
    DeformationField gt(shape);
    bool ok = amplitude == 0.0;
    for (int attempt = 0; !ok && attempt < opt.max_attempts; ++attempt) {
        gt = smooth_field(shape, sigma, amplitude, rng);
        quantize(gt.disp);
        ok = shape.min_edge() < 3 || njd(gt) == 0.0;
        if (ok) {
            const Volume det = jacobian_determinant(gt);
            ok = *std::min_element(det.data.begin(), det.data.end()) > 0.0;
        }
    }
    if (!ok) throw ArgumentError("synth_pair: amplitude " + std::to_string(amplitude) + " keeps producing folds");

    DeformationField phi0 = gt;
    if (amplitude > 0.0 && opt.init_error > 0.0) {
        const DeformationField noise = smooth_field(shape, sigma, opt.init_error * amplitude, rng);
        for (std::size_t i = 0; i < phi0.disp.size(); ++i) phi0.disp[i] += noise.disp[i];
        quantize(phi0.disp);
    }

    s.fixed = warp(moving, gt);
    s.fixed.normalize_intensity();
    quantize(s.fixed.data);
    s.moving = std::move(moving);
    s.fixed_mask = warp_mask(mask, gt);
    s.moving_mask = std::move(mask);
    s.phi_gt = std::move(gt);
    s.phi0 = std::move(phi0);
    return s;
}

DatasetManifest write_synthetic_dataset(const fs::path& root, int n_train, int n_test, Shape3 shape, double amplitude,
                                        std::uint64_t seed, const SynthOptions& opt) {
    if (n_train < 0 || n_test < 0) throw ArgumentError("sample counts must be non-negative");
    DatasetManifest m;
    std::vector<DeformationField> train_fields;
    for (int i = 0; i < n_train + n_test; ++i) {
        RegistrationSample s = synth_pair(seed * 100003ull + static_cast<std::uint64_t>(i), shape, amplitude, opt);
        s.id = (i < n_train ? "train_" : "test_") + std::to_string(i < n_train ? i : i - n_train);
        write_sample(root, s, m);
        (i < n_train ? m.train : m.test).push_back(s.id);
        if (i < n_train) train_fields.push_back(*s.phi0);
    }
    if (!train_fields.empty() && amplitude > 0.0) {
        std::vector<const DeformationField*> ptrs;
        for (const auto& f : train_fields) ptrs.push_back(&f);
        m.stats = compute_field_stats(ptrs);
    }
    save_manifest(root, m);
    return m;
}

// ---- NIfTI ----------------------------------------------------------------------

namespace {

template <typename T>
T swap_bytes(T v) {
    auto* p = reinterpret_cast<unsigned char*>(&v);
    std::reverse(p, p + sizeof(T));
    return v;
}

std::string read_maybe_gz(const fs::path& path) {
    gzFile gz = gzopen(path.string().c_str(), "rb");
    if (!gz) throw DataError(path.string(), "cannot open");
    std::string out;
    char buf[1 << 16];
    int n = 0;
    while ((n = gzread(gz, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
    const bool failed = n < 0;
    gzclose(gz);
    if (failed) throw DataError(path.string(), "decompression failed");
    return out;
}

}  // namespace

NiftiImage read_nifti(const fs::path& path) {
    const std::string raw = read_maybe_gz(path);
    if (raw.size() < 352) throw DataError(path.string(), "file too short for a NIfTI-1 header");
    auto get = [&](std::size_t off, auto tag) {
        decltype(tag) v;
        std::memcpy(&v, raw.data() + off, sizeof v);
        return v;
    };
    std::int32_t sizeof_hdr = get(0, std::int32_t{});
    bool swap = false;
    if (sizeof_hdr != 348) {
        if (swap_bytes(sizeof_hdr) != 348) throw DataError(path.string(), "not a NIfTI-1 file");
        swap = true;
    }
    auto fix = [swap](auto v) { return swap ? swap_bytes(v) : v; };
    std::int16_t dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = fix(get(40 + 2 * i, std::int16_t{}));
    const std::int16_t datatype = fix(get(70, std::int16_t{}));
    float pixdim[8];
    for (int i = 0; i < 8; ++i) pixdim[i] = fix(get(76 + 4 * i, float{}));
    const float vox_offset = fix(get(108, float{}));
    float slope = fix(get(112, float{}));
    const float inter = fix(get(116, float{}));
    if (slope == 0.0f) slope = 1.0f;

    const int ndim = dim[0];
    if (ndim < 3 || ndim > 7) throw DataError(path.string(), "unsupported dimensionality " + std::to_string(ndim));
    NiftiImage img;
    img.shape = {dim[3], dim[2], dim[1]};
    if (img.shape.min_edge() < 1) throw DataError(path.string(), "non-positive extent");
    int extra = 1;
    for (int i = 4; i <= ndim; ++i) extra *= std::max<int>(dim[i], 1);
    img.components = extra;
    img.spacing = {std::abs(pixdim[3]) > 0 ? std::abs(pixdim[3]) : 1.0, std::abs(pixdim[2]) > 0 ? std::abs(pixdim[2]) : 1.0,
                   std::abs(pixdim[1]) > 0 ? std::abs(pixdim[1]) : 1.0};

    std::size_t bytes_per = 0;
    switch (datatype) {
        case 2: case 256: bytes_per = 1; break;
        case 4: case 512: bytes_per = 2; break;
        case 8: case 768: case 16: bytes_per = 4; break;
        case 64: bytes_per = 8; break;
        default: throw DataError(path.string(), "unsupported datatype code " + std::to_string(datatype));
    }
    const std::size_t count = img.shape.size() * static_cast<std::size_t>(img.components);
    const std::size_t offset = static_cast<std::size_t>(std::max(vox_offset, 352.0f));
    if (raw.size() < offset + count * bytes_per) throw DataError(path.string(), "truncated voxel data");
    img.data.resize(count);
    const char* base = raw.data() + offset;
    for (std::size_t i = 0; i < count; ++i) {
        const char* p = base + i * bytes_per;
        double v = 0.0;
        switch (datatype) {
            case 2: v = static_cast<unsigned char>(*p); break;
            case 256: v = static_cast<signed char>(*p); break;
            case 4: { std::int16_t x; std::memcpy(&x, p, 2); v = fix(x); break; }
            case 512: { std::uint16_t x; std::memcpy(&x, p, 2); v = fix(x); break; }
            case 8: { std::int32_t x; std::memcpy(&x, p, 4); v = fix(x); break; }
            case 768: { std::uint32_t x; std::memcpy(&x, p, 4); v = fix(x); break; }
            case 16: { float x; std::memcpy(&x, p, 4); v = fix(x); break; }
            case 64: { double x; std::memcpy(&x, p, 8); v = fix(x); break; }
        }
        img.data[i] = v * slope + inter;
    }
    return img;
}

namespace {

std::vector<double> crop_channels(const std::vector<double>& v, int channels, Shape3 from, Shape3 to) {
    std::vector<double> out(static_cast<std::size_t>(channels) * to.size());
    const int oz = (from.d - to.d) / 2, oy = (from.h - to.h) / 2, ox = (from.w - to.w) / 2;
    for (int c = 0; c < channels; ++c)
        for (int z = 0; z < to.d; ++z)
            for (int y = 0; y < to.h; ++y)
                for (int x = 0; x < to.w; ++x)
                    out[c * to.size() + to.index(z, y, x)] = v[c * from.size() + from.index(z + oz, y + oy, x + ox)];
    return out;
}

/// Samples `from` on the `to` grid with aligned corners.
std::vector<double> resample_channels(const std::vector<double>& v, int channels, Shape3 from, Shape3 to, bool nearest) {
    std::vector<double> out(static_cast<std::size_t>(channels) * to.size());
    auto coord = [](int i, int n_to, int n_from) { return n_to > 1 ? double(i) * (n_from - 1) / (n_to - 1) : 0.0; };
    for (int c = 0; c < channels; ++c) {
        const double* src = v.data() + c * from.size();
        for (int z = 0; z < to.d; ++z)
            for (int y = 0; y < to.h; ++y)
                for (int x = 0; x < to.w; ++x) {
                    const double p[3] = {coord(z, to.d, from.d), coord(y, to.h, from.h), coord(x, to.w, from.w)};
                    double val = 0.0;
                    if (nearest) {
                        val = src[from.index(static_cast<int>(std::floor(p[0] + 0.5)), static_cast<int>(std::floor(p[1] + 0.5)),
                                             static_cast<int>(std::floor(p[2] + 0.5)))];
                    } else {
                        int i0[3];
                        double fr[3];
                        for (int a = 0; a < 3; ++a) {
                            i0[a] = std::min(static_cast<int>(std::floor(p[a])), std::max(from[a] - 2, 0));
                            fr[a] = from[a] > 1 ? p[a] - i0[a] : 0.0;
                        }
                        for (int k = 0; k < 8; ++k) {
                            int q[3];
                            double wgt = 1.0;
                            for (int a = 0; a < 3; ++a) {
                                const int bit = (k >> (2 - a)) & 1;
                                q[a] = std::min(i0[a] + bit, from[a] - 1);
                                wgt *= bit ? fr[a] : 1.0 - fr[a];
                            }
                            val += wgt * src[from.index(q[0], q[1], q[2])];
                        }
                    }
                    out[c * to.size() + to.index(z, y, x)] = val;
                }
    }
    return out;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    return out;
}

}  // namespace

DatasetManifest ingest_pairs(const fs::path& pair_list, const fs::path& out_root, const IngestOptions& opt) {
    std::ifstream in(pair_list);
    if (!in) throw DataError(pair_list.string(), "cannot open pair list");
    const fs::path base = pair_list.parent_path();
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto cells = split_csv(line);
        if (cells.size() < 3) throw DataError(pair_list.string(), "each row needs id,fixed,moving: '" + line + "'");
        rows.push_back(std::move(cells));
    }
    if (opt.n_test < 0 || opt.n_test > static_cast<int>(rows.size()))
        throw ArgumentError("n_test must be between 0 and the number of pairs");

    DatasetManifest m;
    std::vector<DeformationField> train_fields;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& cells = rows[r];
        const std::string& id = cells[0];
        try {
            Shape3 shape{};
            auto convert = [&](const std::string& rel, int want_components, bool nearest) {
                NiftiImage img = read_nifti(base / rel);
                if (img.components != want_components)
                    throw DataError(id, rel + " has " + std::to_string(img.components) + " components, expected " +
                                            std::to_string(want_components));
                if (shape.size() == 0) shape = img.shape;
                if (!(img.shape == shape)) throw DataError(id, rel + " has shape " + img.shape.str() + ", expected " + shape.str());
                Shape3 s = img.shape;
                std::vector<double> v = std::move(img.data);
                if (opt.crop) {
                    const Shape3 c = *opt.crop;
                    if (c.d > s.d || c.h > s.h || c.w > s.w) throw DataError(id, "crop " + c.str() + " exceeds " + s.str());
                    v = crop_channels(v, want_components, s, c);
                    s = c;
                }
                if (opt.resample) {
                    const Shape3 t = *opt.resample;
                    if (want_components == 3) {
                        // Displacements are in voxels of the source grid.
                        for (int c = 0; c < 3; ++c) {
                            const int axis = 2 - c;
                            const double scale = s[axis] > 1 ? double(t[axis] - 1) / (s[axis] - 1) : 1.0;
                            for (std::size_t i = 0; i < s.size(); ++i) v[c * s.size() + i] *= scale;
                        }
                    }
                    v = resample_channels(v, want_components, s, t, nearest);
                    s = t;
                }
                return std::pair{s, std::move(v)};
            };
            RegistrationSample s;
            s.id = id;
            auto [fs_, fv] = convert(cells[1], 1, false);
            auto [ms_, mv] = convert(cells[2], 1, false);
            s.fixed = Volume(fs_, std::move(fv));
            s.moving = Volume(ms_, std::move(mv));
            s.fixed.normalize_intensity();
            s.moving.normalize_intensity();
            auto to_mask = [&](const std::string& rel) {
                auto [sh, v] = convert(rel, 1, true);
                SegMask mk(sh);
                for (std::size_t i = 0; i < v.size(); ++i) mk.labels[i] = static_cast<std::int32_t>(std::lround(v[i]));
                mk.label_ids = mk.present_labels();
                return mk;
            };
            if (cells.size() >= 5 && !cells[3].empty() && !cells[4].empty()) {
                s.fixed_mask = to_mask(cells[3]);
                s.moving_mask = to_mask(cells[4]);
            }
            if (cells.size() >= 6 && !cells[5].empty()) {
                auto [sh, v] = convert(cells[5], 3, false);
                // NIfTI stores (x, y, z) components; channels here run (depth, height, width).
                DeformationField f(sh);
                for (int c = 0; c < 3; ++c)
                    std::copy(v.begin() + (2 - c) * sh.size(), v.begin() + (3 - c) * sh.size(), f.channel(c).begin());
                s.phi0 = std::move(f);
            }
            write_sample(out_root, s, m);
            const bool is_test = static_cast<int>(r) >= static_cast<int>(rows.size()) - opt.n_test;
            (is_test ? m.test : m.train).push_back(id);
            if (!is_test && s.phi0) train_fields.push_back(*s.phi0);
        } catch (const DataError& ex) {
            if (ex.subject() == id) throw;
            throw DataError(id, ex.what());
        }
    }
    if (!train_fields.empty()) {
        std::vector<const DeformationField*> ptrs;
        for (const auto& f : train_fields) ptrs.push_back(&f);
        try {
            m.stats = compute_field_stats(ptrs);
        } catch (const DataError&) {
            m.stats.reset();
        }
    }
    save_manifest(out_root, m);
    return m;
}

}  // namespace dreg

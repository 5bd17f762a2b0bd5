#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffusereg/grid.hpp"

namespace dreg {

struct RegistrationSample {
    std::string id;
    Volume fixed;
    Volume moving;
    std::optional<SegMask> fixed_mask;
    std::optional<SegMask> moving_mask;
    std::optional<DeformationField> phi0;    // physical units
    std::optional<DeformationField> phi_gt;  // physical units, synthetic data only

    void validate() const;
};

/// One raw blob referenced from a manifest.
struct BlobRef {
    std::string file;  // relative to the manifest directory
    std::string dtype;  // "float32" or "int32"
    int channels = 1;
    std::uint32_t crc32 = 0;

    nlohmann::json to_json() const;
    static BlobRef from_json(const nlohmann::json& j);
};

struct SampleEntry {
    std::string id;
    Shape3 shape;
    BlobRef fixed, moving;
    std::optional<BlobRef> fixed_mask, moving_mask, phi0, phi_gt;
    std::vector<std::int32_t> label_ids;
};

inline constexpr int kManifestVersion = 1;

struct DatasetManifest {
    int version = kManifestVersion;
    std::vector<SampleEntry> samples;
    std::optional<FieldStats> stats;
    std::vector<std::string> train;
    std::vector<std::string> test;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

/// Lazily loaded dataset. Construction parses the manifest and checks that every
/// referenced blob exists with the declared size; checksums are verified on load.
class Dataset {
public:
    explicit Dataset(const std::filesystem::path& manifest_path);

    std::size_t size() const { return manifest_.samples.size(); }
    const DatasetManifest& manifest() const { return manifest_; }
    const std::filesystem::path& root() const { return root_; }

    /// Reads sample i; intensities are min-max normalized to [0, 1] per volume.
    RegistrationSample load(std::size_t i) const;
    RegistrationSample load(const std::string& id) const;
    std::size_t index_of(const std::string& id) const;
    /// Indices of the named split ("train" or "test"); all samples when the manifest has no split.
    std::vector<std::size_t> split(const std::string& name) const;

private:
    std::filesystem::path root_;
    DatasetManifest manifest_;
};

Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Appends `s` to `manifest`, writing its blobs under `root/<id>/`.
void write_sample(const std::filesystem::path& root, const RegistrationSample& s, DatasetManifest& manifest);
/// Writes `manifest.json` under `root` (atomically).
void save_manifest(const std::filesystem::path& root, const DatasetManifest& manifest);

/// Per-channel mean and standard deviation over every voxel of the given fields.
FieldStats compute_field_stats(const std::vector<const DeformationField*>& fields);

struct SynthOptions {
    double field_smoothing = 0.25;   // Gaussian sigma as a fraction of the shortest edge
    double init_error = 0.15;        // phi0 perturbation amplitude relative to the deformation
    int max_attempts = 20;
};

/// Synthetic pair with a known fold-free deformation: fixed = warp(moving, phi_gt),
/// phi0 = phi_gt plus a small smooth perturbation. `amplitude` is the largest
/// displacement length in voxels. Values are rounded to float32 so the pair
/// survives the on-disk round trip unchanged.
RegistrationSample synth_pair(std::uint64_t seed, Shape3 shape, double amplitude, const SynthOptions& opt = {});

/// Writes n_train + n_test synthetic pairs plus a manifest whose stats are computed
/// over the training phi0 fields.
DatasetManifest write_synthetic_dataset(const std::filesystem::path& root, int n_train, int n_test, Shape3 shape,
                                        double amplitude, std::uint64_t seed, const SynthOptions& opt = {});

// ---- raw blobs ------------------------------------------------------------------

std::uint32_t crc32_of(const void* data, std::size_t bytes);
/// Writes values as little-endian float32; returns the checksum of the bytes.
std::uint32_t write_f32(const std::filesystem::path& path, const std::vector<double>& values);
std::uint32_t write_i32(const std::filesystem::path& path, const std::vector<std::int32_t>& values);
std::vector<double> read_f32(const std::filesystem::path& path, std::size_t count, std::optional<std::uint32_t> crc);
std::vector<std::int32_t> read_i32(const std::filesystem::path& path, std::size_t count, std::optional<std::uint32_t> crc);

// ---- NIfTI-1 --------------------------------------------------------------------

struct NiftiImage {
    Shape3 shape;               // (nz, ny, nx)
    int components = 1;         // 3 for displacement fields
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<double> data;   // component-major, scaled by scl_slope / scl_inter
};

/// Reads .nii or .nii.gz (either byte order). Displacement fields may be stored
/// as 4D (nx, ny, nz, 3) or 5D (nx, ny, nz, 1, 3).
NiftiImage read_nifti(const std::filesystem::path& path);

struct IngestOptions {
    std::optional<Shape3> crop;      // centre crop, applied first
    std::optional<Shape3> resample;  // trilinear for images and fields, nearest for masks
    int n_test = 0;                  // last n pairs go to the test split
};

/// Converts a pair list (CSV: id,fixed,moving[,fixed_mask,moving_mask[,phi0]], paths
/// relative to the list file) into a dataset under `out_root`. Stats are left unset when
/// the training phi0 fields have a constant channel.
DatasetManifest ingest_pairs(const std::filesystem::path& pair_list, const std::filesystem::path& out_root,
                             const IngestOptions& opt);

}  // namespace dreg

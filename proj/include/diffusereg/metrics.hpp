#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffusereg/grid.hpp"

namespace dreg {

/// 2|A & B| / (|A| + |B|) for one label; 1 when the label is absent from both.
double dice(const SegMask& pred, const SegMask& gt, std::int32_t label);

/// Dice of the union of `labels` treated as a single foreground region.
double dice_overall(const SegMask& pred, const SegMask& gt, const std::vector<std::int32_t>& labels);

/// Percentage of interior voxels whose Jacobian determinant is <= 0.
double njd(const DeformationField& field);

/// Standard deviation of the Jacobian determinant over interior voxels.
double jsd(const DeformationField& field);

/// Flat metric -> value document shared by the CLI, the service and the UI.
struct MetricsReport {
    std::map<std::string, double> values;
    std::map<std::string, std::string> meta;

    void set(const std::string& key, double v) { values[key] = v; }
    double get(const std::string& key) const;
    bool has(const std::string& key) const { return values.count(key) > 0; }

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

inline constexpr int kMetricsSchemaVersion = 1;

struct RegistrationEvalInputs {
    const Volume* fixed = nullptr;
    const Volume* moving = nullptr;
    const DeformationField* field = nullptr;  // physical units
    const SegMask* fixed_mask = nullptr;
    const SegMask* moving_mask = nullptr;
    int ssim_kernel = 9;
};

/// Per-label and overall Dice (when masks are given), NJD, JSD and SSIM of the
/// warped moving image against the fixed image.
MetricsReport evaluate_registration(const RegistrationEvalInputs& in);

/// Averages each key over the reports that carry it ("mean" semantics per key).
MetricsReport average_reports(const std::vector<MetricsReport>& reports);

}  // namespace dreg

#include "diffusereg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"
#include "diffusereg/objectives.hpp"

namespace dreg {

namespace {

void require_same(const SegMask& a, const SegMask& b) {
    if (!(a.shape == b.shape) || a.labels.size() != b.labels.size())
        throw DimensionError("dice: masks " + a.shape.str() + " and " + b.shape.str() + " differ");
}

double overlap(const SegMask& pred, const SegMask& gt, const std::set<std::int32_t>& region) {
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool a = region.count(pred.labels[i]) > 0;
        const bool b = region.count(gt.labels[i]) > 0;
        na += a;
        nb += b;
        inter += a && b;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

std::vector<double> interior_dets(const DeformationField& field) {
    const Volume det = jacobian_determinant(field);
    std::vector<double> out;
    for (std::size_t i : interior_indices(field.shape)) out.push_back(det.data[i]);
    if (out.empty()) throw DimensionError("jacobian metrics need an interior (every axis >= 3), got " + field.shape.str());
    return out;
}

}  // namespace

double dice(const SegMask& pred, const SegMask& gt, std::int32_t label) {
    require_same(pred, gt);
    std::set<std::int32_t> known(gt.label_ids.begin(), gt.label_ids.end());
    known.insert(pred.label_ids.begin(), pred.label_ids.end());
    if (known.empty()) {
        for (auto l : gt.present_labels()) known.insert(l);
        for (auto l : pred.present_labels()) known.insert(l);
    }
    if (label == 0 || !known.count(label)) throw ArgumentError("dice: unknown label " + std::to_string(label));
    return overlap(pred, gt, {label});
}

double dice_overall(const SegMask& pred, const SegMask& gt, const std::vector<std::int32_t>& labels) {
    require_same(pred, gt);
    std::set<std::int32_t> region(labels.begin(), labels.end());
    region.erase(0);
    if (region.empty()) throw ArgumentError("dice_overall: no foreground labels given");
    return overlap(pred, gt, region);
}

double njd(const DeformationField& field) {
    const auto dets = interior_dets(field);
    const auto folded = std::count_if(dets.begin(), dets.end(), [](double d) { return d <= 0.0; });
    return 100.0 * static_cast<double>(folded) / static_cast<double>(dets.size());
}

double jsd(const DeformationField& field) {
    const auto dets = interior_dets(field);
    double mu = 0.0;
    for (double d : dets) mu += d;
    mu /= static_cast<double>(dets.size());
    double var = 0.0;
    for (double d : dets) var += (d - mu) * (d - mu);
    return std::sqrt(var / static_cast<double>(dets.size()));
}

double MetricsReport::get(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw ArgumentError("metrics report has no key '" + key + "'");
    return it->second;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    j["v"] = kMetricsSchemaVersion;
    for (const auto& [k, v] : values) j[k] = v;
    for (const auto& [k, v] : meta) j["meta." + k] = v;
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    for (const auto& [k, v] : j.items()) {
        if (k == "v") continue;
        if (k.rfind("meta.", 0) == 0)
            r.meta[k.substr(5)] = v.get<std::string>();
        else if (v.is_number())
            r.values[k] = v.get<double>();
    }
    return r;
}

MetricsReport evaluate_registration(const RegistrationEvalInputs& in) {
    MetricsReport r;
    r.meta["dice_overall"] = "union of all foreground labels as one region";
    r.meta["dice_mean_labels"] = "mean of per-label dice";
    r.meta["jsd"] = "std of jacobian determinant over interior voxels";
    r.meta["njd"] = "percent interior voxels with jacobian determinant <= 0";

    const Volume warped = warp(*in.moving, *in.field);
    // Small grids fall back to the largest odd window that fits.
    const int edge = in.fixed->shape.min_edge();
    const int k = in.ssim_kernel <= edge ? in.ssim_kernel : edge - (edge % 2 == 0);
    r.set("ssim", ssim3d(*in.fixed, warped, k));
    r.set("njd", njd(*in.field));
    r.set("jsd", jsd(*in.field));
    if (in.fixed_mask && in.moving_mask) {
        const SegMask moved = warp_mask(*in.moving_mask, *in.field);
        std::set<std::int32_t> labels(in.fixed_mask->label_ids.begin(), in.fixed_mask->label_ids.end());
        labels.insert(in.moving_mask->label_ids.begin(), in.moving_mask->label_ids.end());
        labels.erase(0);
        if (!labels.empty()) {
            double sum = 0.0;
            for (auto l : labels) {
                const double d = dice(moved, *in.fixed_mask, l);
                r.set("dice_label_" + std::to_string(l), d);
                sum += d;
            }
            r.set("dice_mean_labels", sum / static_cast<double>(labels.size()));
            r.set("dice_overall", dice_overall(moved, *in.fixed_mask, {labels.begin(), labels.end()}));
        }
    }
    return r;
}

MetricsReport average_reports(const std::vector<MetricsReport>& reports) {
    MetricsReport out;
    std::map<std::string, int> counts;
    for (const auto& r : reports) {
        for (const auto& [k, v] : r.values) {
            out.values[k] += v;
            ++counts[k];
        }
        for (const auto& [k, v] : r.meta) out.meta[k] = v;
    }
    for (auto& [k, v] : out.values) v /= counts[k];
    return out;
}

}  // namespace dreg

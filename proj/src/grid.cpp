#include "diffusereg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "diffusereg/errors.hpp"

namespace dreg {

std::string Shape3::str() const {
    return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

Volume::Volume(Shape3 s, std::vector<double> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size())
        throw DimensionError("volume data has " + std::to_string(data.size()) + " values, shape " + shape.str());
}

void Volume::normalize_intensity() {
    if (data.empty()) return;
    const auto [lo, hi] = std::minmax_element(data.begin(), data.end());
    const double mn = *lo, range = *hi - *lo;
    if (range <= 0.0) {
        std::fill(data.begin(), data.end(), 0.0);
        return;
    }
    for (double& v : data) v = (v - mn) / range;
}

bool Volume::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

DeformationField::DeformationField(Shape3 s, std::vector<double> values, bool is_normalized)
    : shape(s), disp(std::move(values)), normalized(is_normalized) {
    if (disp.size() != 3 * shape.size())
        throw DimensionError("deformation field needs 3 channels of " + shape.str() + ", got " +
                             std::to_string(disp.size()) + " values");
}

bool DeformationField::all_finite() const {
    return std::all_of(disp.begin(), disp.end(), [](double v) { return std::isfinite(v); });
}

std::vector<std::int32_t> SegMask::present_labels() const {
    std::set<std::int32_t> seen;
    for (auto v : labels)
        if (v != 0) seen.insert(v);
    return {seen.begin(), seen.end()};
}

void SegMask::validate() const {
    if (labels.size() != shape.size()) throw DimensionError("mask size does not match shape " + shape.str());
    const std::set<std::int32_t> allowed(label_ids.begin(), label_ids.end());
    for (auto v : labels)
        if (v != 0 && !allowed.count(v)) throw DataError("", "mask label " + std::to_string(v) + " not in label_ids");
}

void FieldStats::validate() const {
    for (int c = 0; c < 3; ++c) {
        if (!std::isfinite(mu[c]) || !std::isfinite(sigma[c]) || !(sigma[c] > 0.0))
            throw ArgumentError("field statistics need finite mu and sigma > 0 for every channel");
    }
}

FieldStats FieldStats::acdc() {
    return {{0.0014, -0.0758, -0.1493}, {0.4636, 1.1375, 1.2221}};
}

}  // namespace dreg

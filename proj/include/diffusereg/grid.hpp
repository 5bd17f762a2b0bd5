#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dreg {

/// Spatial extent (depth, height, width). Width is the fastest-varying axis in memory.
struct Shape3 {
    int d = 0;
    int h = 0;
    int w = 0;

    constexpr std::size_t size() const noexcept {
        return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    constexpr std::size_t index(int z, int y, int x) const noexcept {
        return (static_cast<std::size_t>(z) * h + y) * w + x;
    }
    constexpr int operator[](int axis) const noexcept { return axis == 0 ? d : (axis == 1 ? h : w); }
    constexpr int min_edge() const noexcept { return d < h ? (d < w ? d : w) : (h < w ? h : w); }
    friend constexpr bool operator==(const Shape3&, const Shape3&) = default;

    std::string str() const;
};

/// Scalar image grid (fixed or moving image).
struct Volume {
    Shape3 shape;
    std::vector<double> data;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};

    Volume() = default;
    explicit Volume(Shape3 s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
    Volume(Shape3 s, std::vector<double> values);

    double& at(int z, int y, int x) { return data[shape.index(z, y, x)]; }
    double at(int z, int y, int x) const { return data[shape.index(z, y, x)]; }

    /// Rescales intensities to [0, 1]. A constant volume maps to all zeros.
    void normalize_intensity();
    bool all_finite() const;
};

/// Dense displacement field of shape (3, D, H, W), channel-major.
/// Channel c is displacement along depth/height/width in voxel units, or z-scored
/// units when `normalized` is set.
struct DeformationField {
    Shape3 shape;
    std::vector<double> disp;
    bool normalized = false;

    DeformationField() = default;
    explicit DeformationField(Shape3 s, bool is_normalized = false)
        : shape(s), disp(3 * s.size(), 0.0), normalized(is_normalized) {}
    DeformationField(Shape3 s, std::vector<double> values, bool is_normalized);

    std::span<double> channel(int c) { return {disp.data() + c * shape.size(), shape.size()}; }
    std::span<const double> channel(int c) const { return {disp.data() + c * shape.size(), shape.size()}; }
    double& at(int c, int z, int y, int x) { return disp[c * shape.size() + shape.index(z, y, x)]; }
    double at(int c, int z, int y, int x) const { return disp[c * shape.size() + shape.index(z, y, x)]; }

    bool all_finite() const;
};

/// Integer label grid; 0 is background.
struct SegMask {
    Shape3 shape;
    std::vector<std::int32_t> labels;
    std::vector<std::int32_t> label_ids;

    SegMask() = default;
    explicit SegMask(Shape3 s) : shape(s), labels(s.size(), 0) {}

    std::int32_t& at(int z, int y, int x) { return labels[shape.index(z, y, x)]; }
    std::int32_t at(int z, int y, int x) const { return labels[shape.index(z, y, x)]; }

    /// Distinct non-zero labels present in the grid, ascending.
    std::vector<std::int32_t> present_labels() const;
    /// Throws DataError if a voxel carries a label outside label_ids.
    void validate() const;
};

/// Per-channel z-score statistics for deformation fields.
struct FieldStats {
    std::array<double, 3> mu{0.0, 0.0, 0.0};
    std::array<double, 3> sigma{1.0, 1.0, 1.0};

    void validate() const;
    /// Statistics of the ACDC pre-registration fields used in the reference setup.
    static FieldStats acdc();
};

}  // namespace dreg

#include "diffusereg/fields.hpp"

#include "diffusereg/errors.hpp"
#include "diffusereg/kernels.hpp"

namespace dreg {

namespace {

void require_physical(const DeformationField& field, const char* op) {
    if (field.normalized) throw StateError(std::string(op) + ": field is z-score normalized; denormalize first");
}

void require_same_shape(Shape3 a, const DeformationField& field, const char* op) {
    if (!(a == field.shape))
        throw DimensionError(std::string(op) + ": grid " + a.str() + " does not match field " + field.shape.str());
    if (field.disp.size() != 3 * field.shape.size())
        throw DimensionError(std::string(op) + ": field must have exactly 3 channels");
}

}  // namespace

Volume warp(const Volume& moving, const DeformationField& field) {
    require_physical(field, "warp");
    require_same_shape(moving.shape, field, "warp");
    Volume out(moving.shape);
    out.spacing = moving.spacing;
    kernels::warp_trilinear(moving.data, moving.shape, field.disp, out.data);
    return out;
}

SegMask warp_mask(const SegMask& mask, const DeformationField& field) {
    require_physical(field, "warp_mask");
    require_same_shape(mask.shape, field, "warp_mask");
    SegMask out(mask.shape);
    out.label_ids = mask.label_ids;
    kernels::warp_nearest(mask.labels, mask.shape, field.disp, out.labels);
    return out;
}

Volume jacobian_determinant(const DeformationField& field) {
    require_physical(field, "jacobian_determinant");
    if (field.disp.size() != 3 * field.shape.size()) throw DimensionError("jacobian_determinant: field must have 3 channels");
    if (field.shape.min_edge() < 2)
        throw DimensionError("jacobian_determinant: every axis needs at least 2 voxels, got " + field.shape.str());
    Volume out(field.shape);
    kernels::jacobian_determinant(field.disp, field.shape, out.data);
    return out;
}

DeformationField normalize_field(const DeformationField& field, const FieldStats& stats) {
    if (field.normalized) throw StateError("normalize_field: field is already normalized");
    stats.validate();
    DeformationField out = field;
    out.normalized = true;
    for (int c = 0; c < 3; ++c)
        for (double& v : out.channel(c)) v = (v - stats.mu[c]) / stats.sigma[c];
    return out;
}

DeformationField denormalize_field(const DeformationField& field, const FieldStats& stats) {
    if (!field.normalized) throw StateError("denormalize_field: field is not normalized");
    stats.validate();
    DeformationField out = field;
    out.normalized = false;
    for (int c = 0; c < 3; ++c)
        for (double& v : out.channel(c)) v = v * stats.sigma[c] + stats.mu[c];
    return out;
}

std::vector<std::size_t> interior_indices(Shape3 s) {
    std::vector<std::size_t> out;
    for (int z = 1; z + 1 < s.d; ++z)
        for (int y = 1; y + 1 < s.h; ++y)
            for (int x = 1; x + 1 < s.w; ++x) out.push_back(s.index(z, y, x));
    return out;
}

}  // namespace dreg

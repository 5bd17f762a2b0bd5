#pragma once

#include "diffusereg/grid.hpp"

namespace dreg {

/// Pull-warps `moving` by `field`: out(x) = moving(x + field(x)), trilinear, with
/// sample coordinates clamped to the grid border.
Volume warp(const Volume& moving, const DeformationField& field);

/// Nearest-neighbour counterpart of warp for label grids.
SegMask warp_mask(const SegMask& mask, const DeformationField& field);

/// Per-voxel det(I + grad field) on the (D, H, W) grid.
Volume jacobian_determinant(const DeformationField& field);

DeformationField normalize_field(const DeformationField& field, const FieldStats& stats);
DeformationField denormalize_field(const DeformationField& field, const FieldStats& stats);

/// Interior voxels (one voxel away from every face) of a grid, flat indices.
std::vector<std::size_t> interior_indices(Shape3 s);

}  // namespace dreg

#pragma once

#include <vector>

#include "diffusereg/ad.hpp"
#include "diffusereg/diffusion.hpp"
#include "diffusereg/grid.hpp"

namespace dreg {

struct LossWeights {
    double lambda1 = 1.0;   // similarity
    double lambda2 = 0.1;   // smoothness
    int ssim_kernel = 9;

    void validate() const;
};

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Mean squared error over all elements.
double loss_diffuse(const DeformationField& eps_hat, const DeformationField& eps);

/// Mean local SSIM over every kernel^3 window that fits in the grid (uniform
/// weights, unit dynamic range). If `grad_b` is non-null it receives d/db.
double ssim3d(const Volume& a, const Volume& b, int kernel, std::vector<double>* grad_b = nullptr);

/// 1 - ssim3d(fixed, warped).
double loss_sim(const Volume& fixed, const Volume& warped, const LossWeights& w);

/// Mean over voxels of the squared forward-difference gradient norm, summed over
/// the 3x3 (channel, axis) pairs.
double loss_reg(const DeformationField& field);

// ---- differentiable counterparts (channel-first tensors) ---------------------------

/// warped(1 x S) = moving(x + disp(x)); disp is 3 x S in voxel units.
ad::Tensor warp_op(const Volume& moving, const ad::Tensor& disp);
/// 1 - ssim3d(fixed, warped) as a 1x1 tensor.
ad::Tensor loss_sim_op(const Volume& fixed, const ad::Tensor& warped, Shape3 s, int kernel);
/// loss_reg as a 1x1 tensor.
ad::Tensor loss_reg_op(const ad::Tensor& field, Shape3 s);

struct LossBreakdown {
    ad::Tensor total;
    double diffuse = 0.0;
    double sim = 0.0;
    double reg = 0.0;
    double total_value = 0.0;
};

struct LossInputs {
    const Volume* fixed = nullptr;
    const Volume* moving = nullptr;
    const DeformationField* phi_t = nullptr;  // normalized
    const DeformationField* eps = nullptr;    // normalized
    int t = 1;
    const NoiseSchedule* sched = nullptr;
    const FieldStats* stats = nullptr;
};

/// L_diffuse + lambda1 * L_sim + lambda2 * L_reg, with the consistency terms evaluated
/// on the predicted clean field after denormalization. `eps_hat` is 3 x S.
/// With `aux_losses` false the consistency terms are reported but carry no gradient.
LossBreakdown loss_total(const ad::Tensor& eps_hat, const LossInputs& in, const LossWeights& w,
                         bool aux_losses = true);

}  // namespace dreg

#include "diffusereg/objectives.hpp"

#include <cmath>

#include "diffusereg/errors.hpp"
#include "diffusereg/kernels.hpp"

namespace dreg {

void LossWeights::validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ArgumentError("loss weights must be non-negative");
    if (ssim_kernel < 3 || ssim_kernel % 2 == 0) throw ArgumentError("ssim kernel must be odd and >= 3");
}

double loss_diffuse(const DeformationField& eps_hat, const DeformationField& eps) {
    if (!(eps_hat.shape == eps.shape) || eps_hat.disp.size() != eps.disp.size())
        throw DimensionError("loss_diffuse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < eps.disp.size(); ++i) {
        const double d = eps_hat.disp[i] - eps.disp[i];
        acc += d * d;
    }
    return acc / static_cast<double>(eps.disp.size());
}

namespace {

double ssim_raw(std::span<const double> a, std::span<const double> b, Shape3 s, int k, std::vector<double>* grad_b) {
    if (k < 1 || k % 2 == 0) throw ArgumentError("ssim3d: kernel must be a positive odd integer");
    if (k > s.min_edge())
        throw ArgumentError("ssim3d: kernel " + std::to_string(k) + " exceeds grid " + s.str());
    const std::size_t n = s.size();
    const Shape3 v = kernels::valid_shape(s, k);
    const std::size_t nv = v.size();
    std::vector<double> aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    std::vector<double> sa(nv), sb(nv), saa(nv), sbb(nv), sab(nv);
    kernels::box_sum_valid(a, s, k, sa);
    kernels::box_sum_valid(b, s, k, sb);
    kernels::box_sum_valid(aa, s, k, saa);
    kernels::box_sum_valid(bb, s, k, sbb);
    kernels::box_sum_valid(ab, s, k, sab);
    const double inv_k = 1.0 / (static_cast<double>(k) * k * k);

    std::vector<double> g_mu, g_bb, g_ab;
    if (grad_b) {
        g_mu.resize(nv);
        g_bb.resize(nv);
        g_ab.resize(nv);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < nv; ++i) {
        const double mu_a = sa[i] * inv_k, mu_b = sb[i] * inv_k;
        const double var_a = saa[i] * inv_k - mu_a * mu_a;
        const double var_b = sbb[i] * inv_k - mu_b * mu_b;
        const double cov = sab[i] * inv_k - mu_a * mu_b;
        const double n1 = 2.0 * mu_a * mu_b + kSsimC1, n2 = 2.0 * cov + kSsimC2;
        const double d1 = mu_a * mu_a + mu_b * mu_b + kSsimC1, d2 = var_a + var_b + kSsimC2;
        const double den = d1 * d2;
        const double val = n1 * n2 / den;
        total += val;
        if (grad_b) {
            // Partials with respect to mu_b, E[b^2], E[ab] taken as independent inputs.
            const double dn1 = 2.0 * mu_a, dn2 = -2.0 * mu_a, dd1 = 2.0 * mu_b, dd2 = -2.0 * mu_b;
            g_mu[i] = (dn1 * n2 + n1 * dn2) / den - val * (dd1 * d2 + d1 * dd2) / den;
            g_bb[i] = -val / d2;
            g_ab[i] = 2.0 * n1 / den;
        }
    }
    const double mean = total / static_cast<double>(nv);
    if (grad_b) {
        std::vector<double> s_mu(n), s_bb(n), s_ab(n);
        kernels::box_sum_adjoint(g_mu, s, k, s_mu);
        kernels::box_sum_adjoint(g_bb, s, k, s_bb);
        kernels::box_sum_adjoint(g_ab, s, k, s_ab);
        const double scale = inv_k / static_cast<double>(nv);
        grad_b->assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            (*grad_b)[i] = scale * (s_mu[i] + 2.0 * b[i] * s_bb[i] + a[i] * s_ab[i]);
    }
    return mean;
}

struct RegTerms {
    double value = 0.0;
    std::vector<double> grad;
};

RegTerms reg_raw(std::span<const double> f, Shape3 s, bool want_grad) {
    if (s.min_edge() < 2) throw DimensionError("loss_reg: every axis needs at least 2 voxels, got " + s.str());
    const std::size_t n = s.size();
    if (f.size() != 3 * n) throw DimensionError("loss_reg: field must have 3 channels");
    RegTerms r;
    if (want_grad) r.grad.assign(3 * n, 0.0);
    const std::size_t strides[3] = {static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
    for (int axis = 0; axis < 3; ++axis) {
        const Shape3 lim{s.d - (axis == 0), s.h - (axis == 1), s.w - (axis == 2)};
        const double inv_m = 1.0 / static_cast<double>(lim.size());
        for (int c = 0; c < 3; ++c) {
            const double* ch = f.data() + c * n;
            double acc = 0.0;
            for (int z = 0; z < lim.d; ++z)
                for (int y = 0; y < lim.h; ++y)
                    for (int x = 0; x < lim.w; ++x) {
                        const std::size_t i = s.index(z, y, x);
                        const double d = ch[i + strides[axis]] - ch[i];
                        acc += d * d;
                        if (want_grad) {
                            const double g = 2.0 * d * inv_m;
                            r.grad[c * n + i + strides[axis]] += g;
                            r.grad[c * n + i] -= g;
                        }
                    }
            r.value += acc * inv_m;
        }
    }
    return r;
}

}  // namespace

double ssim3d(const Volume& a, const Volume& b, int kernel, std::vector<double>* grad_b) {
    if (!(a.shape == b.shape)) throw DimensionError("ssim3d: shapes " + a.shape.str() + " and " + b.shape.str() + " differ");
    return ssim_raw(a.data, b.data, a.shape, kernel, grad_b);
}

double loss_sim(const Volume& fixed, const Volume& warped, const LossWeights& w) {
    return 1.0 - ssim3d(fixed, warped, w.ssim_kernel);
}

double loss_reg(const DeformationField& field) { return reg_raw(field.disp, field.shape, false).value; }

ad::Tensor warp_op(const Volume& moving, const ad::Tensor& disp) {
    const Shape3 s = moving.shape;
    if (disp.rows() != 3 || static_cast<std::size_t>(disp.cols()) != s.size())
        throw DimensionError("warp_op: displacement must be 3 x " + std::to_string(s.size()));
    std::vector<double> out(s.size());
    kernels::warp_trilinear(moving.data, s, disp.value(), out);
    auto img = std::make_shared<std::vector<double>>(moving.data);
    auto pd = disp.node();
    return ad::make_op(1, static_cast<int>(s.size()), std::move(out), {disp}, [img, pd, s](ad::Node& self) {
        kernels::warp_trilinear_backward(*img, s, pd->value, self.grad, {}, pd->ensure_grad());
    });
}

ad::Tensor loss_sim_op(const Volume& fixed, const ad::Tensor& warped, Shape3 s, int kernel) {
    if (!(fixed.shape == s) || warped.size() != s.size()) throw DimensionError("loss_sim_op: shape mismatch");
    auto grad = std::make_shared<std::vector<double>>();
    const double ssim = ssim_raw(fixed.data, warped.value(), s, kernel, ad::grad_enabled() ? grad.get() : nullptr);
    auto pw = warped.node();
    return ad::make_op(1, 1, {1.0 - ssim}, {warped}, [grad, pw](ad::Node& self) {
        auto& g = pw->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[0] * (*grad)[i];
    });
}

ad::Tensor loss_reg_op(const ad::Tensor& field, Shape3 s) {
    if (field.rows() != 3 || static_cast<std::size_t>(field.cols()) != s.size())
        throw DimensionError("loss_reg_op: field must be 3 x S");
    auto terms = std::make_shared<RegTerms>(reg_raw(field.value(), s, ad::grad_enabled()));
    auto pf = field.node();
    return ad::make_op(1, 1, {terms->value}, {field}, [terms, pf](ad::Node& self) {
        auto& g = pf->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * terms->grad[i];
    });
}

LossBreakdown loss_total(const ad::Tensor& eps_hat, const LossInputs& in, const LossWeights& w, bool aux_losses) {
    w.validate();
    const Shape3 s = in.phi_t->shape;
    const int n = static_cast<int>(s.size());
    if (eps_hat.rows() != 3 || eps_hat.cols() != n) throw DimensionError("loss_total: eps_hat must be 3 x S");
    if (!(in.fixed->shape == s) || !(in.moving->shape == s) || !(in.eps->shape == s))
        throw DimensionError("loss_total: inputs must share the field grid " + s.str());

    LossBreakdown out;
    ad::Tensor eps = ad::constant(3, n, in.eps->disp);
    ad::Tensor diffuse = ad::mse(eps_hat, eps);
    out.diffuse = diffuse.item();

    const double ab = in.sched->alpha_bar(in.t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    auto consistency = [&]() {
        std::vector<double> scaled(in.phi_t->disp.size());
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = in.phi_t->disp[i] / a;
        ad::Tensor phi0_n = ad::add(ad::affine(eps_hat, -b / a), ad::constant(3, n, std::move(scaled)));
        ad::Tensor phi0 = ad::channel_affine(phi0_n, in.stats->sigma, in.stats->mu);
        ad::Tensor warped = warp_op(*in.moving, phi0);
        return std::pair{loss_sim_op(*in.fixed, warped, s, w.ssim_kernel), loss_reg_op(phi0, s)};
    };

    if (aux_losses) {
        auto [sim, reg] = consistency();
        out.sim = sim.item();
        out.reg = reg.item();
        out.total = ad::add(ad::add(diffuse, ad::affine(sim, w.lambda1)), ad::affine(reg, w.lambda2));
    } else {
        ad::NoGradGuard guard;
        auto [sim, reg] = consistency();
        out.sim = sim.item();
        out.reg = reg.item();
        out.total = diffuse;
    }
    out.total_value = out.total.item();
    return out;
}

}  // namespace dreg

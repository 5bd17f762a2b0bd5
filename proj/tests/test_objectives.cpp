#include <doctest.h>

#include <cmath>

#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"
#include "diffusereg/objectives.hpp"
#include "support.hpp"

using namespace dreg;

namespace {

// Direct evaluation of every k^3 window.
double ssim_brute(const Volume& a, const Volume& b, int k) {
    const Shape3 s = a.shape;
    double total = 0.0;
    int windows = 0;
    const double n = static_cast<double>(k) * k * k;
    for (int z = 0; z + k <= s.d; ++z)
        for (int y = 0; y + k <= s.h; ++y)
            for (int x = 0; x + k <= s.w; ++x) {
                double ma = 0, mb = 0;
                for (int dz = 0; dz < k; ++dz)
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) {
                            ma += a.at(z + dz, y + dy, x + dx);
                            mb += b.at(z + dz, y + dy, x + dx);
                        }
                ma /= n;
                mb /= n;
                double va = 0, vb = 0, cov = 0;
                for (int dz = 0; dz < k; ++dz)
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) {
                            const double da = a.at(z + dz, y + dy, x + dx) - ma;
                            const double db = b.at(z + dz, y + dy, x + dx) - mb;
                            va += da * da;
                            vb += db * db;
                            cov += da * db;
                        }
                va /= n;
                vb /= n;
                cov /= n;
                total += (2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2) / ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
                ++windows;
            }
    return total / windows;
}

double reg_loop(const DeformationField& f) {
    const Shape3 s = f.shape;
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        double dz = 0, dy = 0, dx = 0;
        for (int z = 0; z < s.d; ++z)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    if (z + 1 < s.d) dz += std::pow(f.at(c, z + 1, y, x) - f.at(c, z, y, x), 2);
                    if (y + 1 < s.h) dy += std::pow(f.at(c, z, y + 1, x) - f.at(c, z, y, x), 2);
                    if (x + 1 < s.w) dx += std::pow(f.at(c, z, y, x + 1) - f.at(c, z, y, x), 2);
                }
        total += dz / ((s.d - 1.0) * s.h * s.w) + dy / (s.d * (s.h - 1.0) * s.w) + dx / (s.d * s.h * (s.w - 1.0));
    }
    return total;
}

Volume ellipsoid(Shape3 s, double cz, double cy, double cx) {
    Volume v(s);
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const double r = std::pow((z - cz) / 4.0, 2) + std::pow((y - cy) / 3.0, 2) + std::pow((x - cx) / 5.0, 2);
                v.at(z, y, x) = r <= 1.0 ? 0.9 : 0.1;
            }
    return v;
}

}  // namespace

TEST_CASE("loss_diffuse") {
    const Shape3 s{2, 3, 2};
    DeformationField a(s, testing::randn(36, 1), true);
    CHECK(loss_diffuse(a, a) == 0.0);
    DeformationField b = a;
    for (auto& v : b.disp) v += 1.0;
    CHECK(loss_diffuse(b, a) == doctest::Approx(1.0).epsilon(1e-14));
    DeformationField r(s, testing::randn(36, 2), true);
    double acc = 0.0;
    for (std::size_t i = 0; i < 36; ++i) acc += (r.disp[i] - a.disp[i]) * (r.disp[i] - a.disp[i]);
    CHECK(testing::rel_err(loss_diffuse(r, a), acc / 36.0) < 1e-10);
    CHECK_THROWS_AS(loss_diffuse(a, DeformationField(Shape3{1, 1, 1}, true)), DimensionError);
}

TEST_CASE("ssim3d oracles") {
    const Shape3 s{12, 12, 12};
    Volume a(s, testing::randu(s.size(), 3)), b(s, testing::randu(s.size(), 4));
    CHECK(ssim3d(a, a, 9) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(ssim3d(a, b, 9) - ssim_brute(a, b, 9)) < 1e-6);
    CHECK(std::abs(ssim3d(a, b, 9) - ssim3d(b, a, 9)) < 1e-10);

    Volume checker(s), inverse(s);
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                checker.at(z, y, x) = (z + y + x) % 2 ? 1.0 : 0.0;
                inverse.at(z, y, x) = 1.0 - checker.at(z, y, x);
            }
    CHECK(ssim3d(checker, inverse, 9) < 0.0);
    CHECK_THROWS_AS(ssim3d(a, b, 13), ArgumentError);
    CHECK_THROWS_AS(ssim3d(a, b, 4), ArgumentError);
}

TEST_CASE("ssim gradient matches finite differences") {
    const Shape3 s{6, 6, 6};
    Volume a(s, testing::randu(s.size(), 5)), b(s, testing::randu(s.size(), 6));
    std::vector<double> g;
    ssim3d(a, b, 3, &g);
    for (std::size_t i : {0ul, 40ul, 107ul, 215ul}) {
        Volume p = b, m = b;
        p.data[i] += 1e-6;
        m.data[i] -= 1e-6;
        const double num = (ssim3d(a, p, 3) - ssim3d(a, m, 3)) / 2e-6;
        CHECK(testing::rel_err(g[i], num, 1e-6) < 1e-5);
    }
}

TEST_CASE("loss_sim decreases as a translated ellipsoid comes into alignment") {
    const Shape3 s{16, 16, 16};
    const Volume fixed = ellipsoid(s, 8, 8, 8);
    const LossWeights w;
    double prev = 2.0;
    for (int off : {3, 2, 1, 0}) {
        const double l = loss_sim(fixed, ellipsoid(s, 8, 8, 8 + off), w);
        CHECK(l < prev);
        prev = l;
    }
    CHECK(prev == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(loss_sim(fixed, ellipsoid(s, 8, 8, 10), w) == doctest::Approx(1.0 - ssim3d(fixed, ellipsoid(s, 8, 8, 10), 9)));
}

TEST_CASE("loss_reg oracles") {
    const Shape3 s{4, 5, 6};
    DeformationField constant(s);
    for (auto& v : constant.disp) v = 0.7;
    CHECK(loss_reg(constant) == 0.0);

    const double c = 0.35;
    DeformationField ramp(s);
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) ramp.at(2, z, y, x) = c * x;
    CHECK(loss_reg(ramp) == doctest::Approx(c * c).epsilon(1e-12));

    DeformationField r(s, testing::randn(3 * s.size(), 7), false);
    CHECK(testing::rel_err(loss_reg(r), reg_loop(r)) < 1e-10);
    CHECK_THROWS_AS(loss_reg(DeformationField(Shape3{1, 3, 3})), DimensionError);
}

TEST_CASE("loss_total composition and gradients") {
    const Shape3 s{8, 8, 8};
    const NoiseSchedule sched = default_schedule();
    const FieldStats stats = FieldStats::acdc();
    Volume fixed(s, testing::randu(s.size(), 8)), moving(s, testing::randu(s.size(), 9));
    DeformationField eps(s, testing::randn(3 * s.size(), 10), true);
    DeformationField phi0(s, testing::randn(3 * s.size(), 11, 0.3), true);
    const int t = 40;
    const DeformationField phi_t = q_sample(phi0, t, eps, sched);
    LossInputs in{&fixed, &moving, &phi_t, &eps, t, &sched, &stats};
    const auto eps_hat0 = testing::randn(3 * s.size(), 12);

    LossWeights zero{0.0, 0.0, 5};
    auto br = loss_total(ad::constant(3, 512, eps_hat0), in, zero);
    CHECK(br.total_value == br.diffuse);

    LossWeights w{1.0, 0.1, 5};
    br = loss_total(ad::constant(3, 512, eps_hat0), in, w);
    CHECK(br.total_value == doctest::Approx(br.diffuse + br.sim + 0.1 * br.reg).epsilon(1e-14));
    CHECK(br.sim >= 0.0);
    CHECK(br.sim <= 2.0);
    CHECK(br.reg >= 0.0);

    const double worst = testing::gradient_check([&](const ad::Tensor& e) { return loss_total(e, in, w).total; }, eps_hat0, 3,
                                                 512, 40, 13, 1e-6);
    CHECK(worst < 1e-3);

    auto e = ad::variable(3, 512, eps_hat0);
    auto off = loss_total(e, in, w, false);
    ad::backward(off.total);
    auto e2 = ad::variable(3, 512, eps_hat0);
    ad::backward(ad::mse(e2, ad::constant(3, 512, eps.disp)));
    CHECK(e.grad() == e2.grad());
    CHECK(off.sim > 0.0);
}

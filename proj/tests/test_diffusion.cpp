#include <doctest.h>

#include <cmath>

#include "diffusereg/diffusion.hpp"
#include "diffusereg/errors.hpp"
#include "support.hpp"

using namespace dreg;

TEST_CASE("default linear schedule") {
    const NoiseSchedule s = default_schedule();
    REQUIRE(s.steps == 2000);
    CHECK(s.betas.front() == 1e-6);
    CHECK(s.betas.back() == 1e-2);
    double log_sum = 0.0;
    for (double b : s.betas) log_sum += std::log1p(-b);
    CHECK(testing::rel_err(s.alpha_bars.back(), std::exp(log_sum)) < 1e-10);
    for (int i = 1; i < s.steps; ++i) {
        CHECK(s.alpha_bars[i] < s.alpha_bars[i - 1]);
        CHECK(s.betas[i] >= s.betas[i - 1]);
    }
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.alpha_bar(1) == s.alpha_bars[0]);
}

TEST_CASE("schedule argument checks") {
    CHECK(make_linear_schedule(0.5, 0.5, 1).alpha_bars == std::vector<double>{0.5});
    CHECK_THROWS_AS(make_linear_schedule(0.0, 0.1, 10), ArgumentError);
    CHECK_THROWS_AS(make_linear_schedule(0.2, 0.1, 10), ArgumentError);
    CHECK_THROWS_AS(make_linear_schedule(0.1, 1.0, 10), ArgumentError);
    CHECK_THROWS_AS(make_linear_schedule(0.1, 0.2, 0), ArgumentError);
}

TEST_CASE("q_sample and predict_phi0") {
    const NoiseSchedule sched = default_schedule();
    const Shape3 s{2, 3, 4};
    DeformationField phi0(s, testing::randn(3 * s.size(), 1), true);
    DeformationField zero(s, true);
    const auto scaled = q_sample(phi0, 700, zero, sched);
    for (std::size_t i = 0; i < phi0.disp.size(); ++i) CHECK(scaled.disp[i] == std::sqrt(sched.alpha_bar(700)) * phi0.disp[i]);

    DeformationField eps(s, testing::randn(3 * s.size(), 2), true);
    const auto near = q_sample(phi0, 1, eps, sched);
    double err = 0.0, bound = 0.0;
    for (std::size_t i = 0; i < eps.disp.size(); ++i) {
        err += (near.disp[i] - phi0.disp[i]) * (near.disp[i] - phi0.disp[i]);
        bound += eps.disp[i] * eps.disp[i];
    }
    CHECK(std::sqrt(err) <= 2.0 * std::sqrt(1.0 - sched.alpha_bar(1)) * std::sqrt(bound));

    const auto back = predict_phi0(q_sample(phi0, 900, eps, sched), eps, 900, sched);
    for (std::size_t i = 0; i < phi0.disp.size(); ++i) CHECK(testing::rel_err(back.disp[i], phi0.disp[i], 1e-6) < 1e-5);

    DeformationField c(s, true);
    for (auto& v : c.disp) v = std::sqrt(sched.alpha_bar(50)) * 0.75;
    for (double v : predict_phi0(c, zero, 50, sched).disp) CHECK(v == doctest::Approx(0.75));

    DeformationField phys(s);
    CHECK_THROWS_AS(q_sample(phys, 3, eps, sched), StateError);
    CHECK_THROWS_AS(predict_phi0(c, zero, 0, sched), ArgumentError);
    CHECK_THROWS_AS(predict_phi0(c, zero, 2001, sched), ArgumentError);
}

TEST_CASE("ddpm step at t = 1 is deterministic, and vanishing beta is a no-op") {
    const NoiseSchedule sched = default_schedule();
    const Shape3 s{2, 2, 2};
    DeformationField phi(s, testing::randn(24, 3), true), eps(s, testing::randn(24, 4), true);
    Rng r1(1), r2(2);
    CHECK(ddpm_step(phi, eps, 1, sched, r1).disp == ddpm_step(phi, eps, 1, sched, r2).disp);

    const NoiseSchedule tiny = make_linear_schedule(1e-12, 1e-12, 3);
    DeformationField zero(s, true);
    Rng r3(3);
    const auto out = ddpm_step(phi, zero, 2, tiny, r3);
    CHECK(testing::max_abs_diff(out.disp, phi.disp) < 1e-5);
    CHECK_THROWS_AS(ddpm_step(phi, eps, 0, sched, r3), ArgumentError);
}

TEST_CASE("ddim with eta zero is deterministic and validates its step pair") {
    const NoiseSchedule sched = default_schedule();
    const Shape3 s{2, 2, 2};
    DeformationField phi(s, testing::randn(24, 5), true), eps(s, testing::randn(24, 6), true);
    Rng r1(1), r2(99);
    CHECK(ddim_step(phi, eps, 500, 450, 0.0, sched, r1).disp == ddim_step(phi, eps, 500, 450, 0.0, sched, r2).disp);
    CHECK_THROWS_AS(ddim_step(phi, eps, 10, 10, 0.0, sched, r1), ArgumentError);
    CHECK_THROWS_AS(ddim_step(phi, eps, 10, 11, 0.0, sched, r1), ArgumentError);
}

TEST_CASE("ddim one step equals the noiseless ddpm mean on a one-step schedule") {
    const NoiseSchedule sched = make_linear_schedule(0.3, 0.3, 1);
    const double phi = 0.8, eps = -0.4;
    const Shape3 s{1, 1, 1};
    DeformationField p(s, {phi, phi, phi}, true), e(s, {eps, eps, eps}, true);
    Rng rng(0);
    const double ddim = ddim_step(p, e, 1, 0, 0.0, sched, rng).disp[0];
    const double beta = 0.3;
    const double mean = (phi - beta / std::sqrt(1.0 - 0.7) * eps) / std::sqrt(0.7);
    CHECK(ddim == doctest::Approx(mean).epsilon(1e-14));
    CHECK(ddpm_step(p, e, 1, sched, rng).disp[0] == doctest::Approx(mean).epsilon(1e-14));
}

TEST_CASE("ddpm scalar chain follows the posterior mean when noise is absent") {
    // With z drawn but eps_hat the true noise of phi0 = 0, three steps of the
    // posterior-mean recursion are compared against a hand-rolled scalar chain.
    const NoiseSchedule sched = make_linear_schedule(0.1, 0.3, 3);
    const Shape3 s{1, 1, 1};
    double x = 1.2;
    DeformationField phi(s, {x, x, x}, true);
    const double eps_hat = 0.25;
    DeformationField e(s, {eps_hat, eps_hat, eps_hat}, true);
    Rng rng(42), mirror(42);
    for (int t = 3; t >= 1; --t) {
        const double b = sched.beta(t), a = 1.0 - b, ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1);
        double expect = (x - b / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(a);
        if (t > 1) {
            const double sigma = std::sqrt(b * (1.0 - ab_prev) / (1.0 - ab));
            // Channel 0 consumes the first draw of each step.
            const double z0 = mirror.normal();
            mirror.normal();
            mirror.normal();
            expect += sigma * z0;
        }
        phi = ddpm_step(phi, e, t, sched, rng);
        CHECK(phi.disp[0] == doctest::Approx(expect).epsilon(1e-12));
        x = phi.disp[0];
    }
}

TEST_CASE("sampling timesteps are strictly decreasing and cover t = T") {
    const auto all = sampling_timesteps(2000, 2000);
    CHECK(all.size() == 2000);
    CHECK(all.front() == 2000);
    CHECK(all.back() == 1);
    const auto few = sampling_timesteps(2000, 50);
    CHECK(few.size() == 50);
    CHECK(few.front() <= 2000);
    for (std::size_t i = 1; i < few.size(); ++i) CHECK(few[i] < few[i - 1]);
    CHECK(sampling_timesteps(2000, 1).size() == 1);
}

namespace {

NoisePredictor random_denoiser() {
    return [](const Volume&, const Volume&, const DeformationField& phi, int t) {
        DeformationField out(phi.shape, true);
        for (std::size_t i = 0; i < out.disp.size(); ++i) out.disp[i] = 0.1 * std::sin(phi.disp[i] + t);
        return out;
    };
}

}  // namespace

TEST_CASE("sampler contracts") {
    const NoiseSchedule sched = default_schedule();
    const Shape3 s{4, 4, 4};
    Volume f(s), m(s);
    SamplerConfig cfg;
    cfg.kind = SamplerKind::ddim;
    cfg.num_steps = 50;
    cfg.seed = 5;
    const auto a = sample(random_denoiser(), f, m, cfg, sched, FieldStats::acdc());
    const auto b = sample(random_denoiser(), f, m, cfg, sched, FieldStats::acdc());
    CHECK(a.field.disp == b.field.disp);
    CHECK(a.field.all_finite());
    CHECK_FALSE(a.field.normalized);
    CHECK(a.steps_run == 50);

    cfg.num_steps = 1;
    int calls = 0;
    sample(random_denoiser(), f, m, cfg, sched, FieldStats::acdc(), [&](const TrajectorySnapshot&) {
        ++calls;
        return StepAction::proceed;
    });
    CHECK(calls == 1);

    cfg.kind = SamplerKind::ddpm;
    cfg.num_steps = 20;
    calls = 0;
    TrajectorySnapshot last;
    const auto stopped = sample(random_denoiser(), f, m, cfg, sched, FieldStats::acdc(), [&](const TrajectorySnapshot& snap) {
        last = snap;
        return ++calls == 7 ? StepAction::stop : StepAction::proceed;
    });
    CHECK(calls == 7);
    CHECK(stopped.early_stopped);
    CHECK(stopped.steps_run == 7);
    for (std::size_t i = 0; i < stopped.field.disp.size(); ++i) {
        const int c = static_cast<int>(i / s.size());
        const FieldStats st = FieldStats::acdc();
        CHECK(stopped.field.disp[i] == doctest::Approx(last.phi0_hat.disp[i] * st.sigma[c] + st.mu[c]));
    }

    auto wrong = [](const Volume&, const Volume&, const DeformationField&, int) { return DeformationField(Shape3{1, 1, 1}, true); };
    CHECK_THROWS_AS(sample(wrong, f, m, cfg, sched, FieldStats::acdc()), DimensionError);
}

TEST_CASE("external stop flag ends the trajectory") {
    const NoiseSchedule sched = default_schedule();
    const Shape3 s{2, 2, 2};
    Volume f(s), m(s);
    std::atomic<bool> stop{true};
    SamplerConfig cfg;
    cfg.num_steps = 30;
    cfg.stop_flag_poll = true;
    cfg.stop_flag = &stop;
    const auto r = sample(random_denoiser(), f, m, cfg, sched, FieldStats::acdc());
    CHECK(r.early_stopped);
    CHECK(r.steps_run <= 1);
}

TEST_CASE("teacher-forced sampling recovers the chain's clean field") {
    const NoiseSchedule sched = default_schedule();
    const Shape3 s{8, 8, 8};
    const DeformationField phi0(s, testing::randn(3 * s.size(), 21), true);
    const NoisePredictor teacher = [&](const Volume&, const Volume&, const DeformationField& phi_t, int t) {
        DeformationField eps(phi_t.shape, true);
        const double a = std::sqrt(sched.alpha_bar(t)), b = std::sqrt(1.0 - sched.alpha_bar(t));
        for (std::size_t i = 0; i < eps.disp.size(); ++i) eps.disp[i] = (phi_t.disp[i] - a * phi0.disp[i]) / b;
        return eps;
    };
    const FieldStats unit;
    Volume f(s), m(s);
    for (auto kind : {SamplerKind::ddpm, SamplerKind::ddim}) {
        SamplerConfig cfg;
        cfg.kind = kind;
        cfg.num_steps = 100;
        cfg.eta = 1.0;
        cfg.seed = 3;
        double floor = 1.0;
        const auto ts = sampling_timesteps(sched.steps, cfg.num_steps);
        for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
            const double ab = sched.alpha_bar(ts[k]), ab_prev = sched.alpha_bar(ts[k + 1]);
            floor = std::min(floor, (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
        }
        const auto r = sample(teacher, f, m, cfg, sched, unit);
        double mse = 0.0;
        for (std::size_t i = 0; i < phi0.disp.size(); ++i) mse += std::pow(r.field.disp[i] - phi0.disp[i], 2);
        mse /= static_cast<double>(phi0.disp.size());
        CHECK(floor > 0.0);
        CHECK(mse < floor);
        CHECK(mse < 1e-20);
    }
}

#include "diffusereg/diffusion.hpp"

#include <chrono>
#include <cmath>

#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"

namespace dreg {

double NoiseSchedule::beta(int t) const {
    check_timestep(t, "beta");
    return betas[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    check_timestep(t, "alpha_bar");
    return alpha_bars[t - 1];
}

void NoiseSchedule::check_timestep(int t, const char* op) const {
    if (t < 1 || t > steps)
        throw ArgumentError(std::string(op) + ": timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps) + "]");
}

NoiseSchedule make_linear_schedule(double beta_start, double beta_end, int steps) {
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0) || steps < 1)
        throw ArgumentError("make_linear_schedule: need 0 < beta_start <= beta_end < 1 and steps >= 1");
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(steps);
    s.alphas.resize(steps);
    s.alpha_bars.resize(steps);
    double running = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double b = steps == 1 ? beta_start
                                    : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1);
        s.betas[i] = b;
        s.alphas[i] = 1.0 - b;
        running *= s.alphas[i];
        s.alpha_bars[i] = running;
    }
    if (steps > 1) s.betas[steps - 1] = beta_end;
    return s;
}

namespace {

void require_same(const DeformationField& a, const DeformationField& b, const char* op) {
    if (!(a.shape == b.shape) || a.disp.size() != b.disp.size())
        throw DimensionError(std::string(op) + ": field shapes differ (" + a.shape.str() + " vs " + b.shape.str() + ")");
}

}  // namespace

DeformationField q_sample(const DeformationField& phi0, int t, const DeformationField& eps,
                          const NoiseSchedule& sched) {
    if (!phi0.normalized) throw StateError("q_sample: phi0 must be z-score normalized");
    require_same(phi0, eps, "q_sample");
    const double ab = sched.alpha_bar(t);
    sched.check_timestep(t, "q_sample");
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    DeformationField out(phi0.shape, true);
    for (std::size_t i = 0; i < out.disp.size(); ++i) out.disp[i] = a * phi0.disp[i] + b * eps.disp[i];
    return out;
}

DeformationField predict_phi0(const DeformationField& phi_t, const DeformationField& eps_hat, int t,
                              const NoiseSchedule& sched) {
    require_same(phi_t, eps_hat, "predict_phi0");
    sched.check_timestep(t, "predict_phi0");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    DeformationField out(phi_t.shape, true);
    for (std::size_t i = 0; i < out.disp.size(); ++i) out.disp[i] = (phi_t.disp[i] - b * eps_hat.disp[i]) / a;
    return out;
}

DeformationField ddpm_step(const DeformationField& phi_t, const DeformationField& eps_hat, int t,
                           const NoiseSchedule& sched, Rng& rng, int t_prev) {
    if (t < 1) throw ArgumentError("ddpm_step: t must be >= 1");
    sched.check_timestep(t, "ddpm_step");
    if (t_prev < 0) t_prev = t - 1;
    if (t_prev >= t) throw ArgumentError("ddpm_step: t_prev must be below t");
    require_same(phi_t, eps_hat, "ddpm_step");
    const double ab_t = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
    const double beta = (t_prev == t - 1) ? sched.beta(t) : 1.0 - ab_t / ab_prev;
    const double alpha = 1.0 - beta;
    const double coef = beta / std::sqrt(1.0 - ab_t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    const double sigma = t_prev > 0 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t)) : 0.0;
    DeformationField out(phi_t.shape, phi_t.normalized);
    for (std::size_t i = 0; i < out.disp.size(); ++i) {
        out.disp[i] = inv_sqrt_alpha * (phi_t.disp[i] - coef * eps_hat.disp[i]);
        if (sigma > 0.0) out.disp[i] += sigma * rng.normal();
    }
    return out;
}

DeformationField ddim_step(const DeformationField& phi_t, const DeformationField& eps_hat, int t, int t_prev,
                           double eta, const NoiseSchedule& sched, Rng& rng) {
    if (!(t > t_prev && t_prev >= 0)) throw ArgumentError("ddim_step: need t > t_prev >= 0");
    if (eta < 0.0 || eta > 1.0) throw ArgumentError("ddim_step: eta must be in [0, 1]");
    require_same(phi_t, eps_hat, "ddim_step");
    const double ab_t = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
    const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    const double a = std::sqrt(ab_t), b = std::sqrt(1.0 - ab_t), ap = std::sqrt(ab_prev);
    DeformationField out(phi_t.shape, phi_t.normalized);
    for (std::size_t i = 0; i < out.disp.size(); ++i) {
        const double x0 = (phi_t.disp[i] - b * eps_hat.disp[i]) / a;
        out.disp[i] = ap * x0 + dir * eps_hat.disp[i];
        if (sigma > 0.0) out.disp[i] += sigma * rng.normal();
    }
    return out;
}

void SamplerConfig::validate(const NoiseSchedule& sched) const {
    if (num_steps < 1 || num_steps > sched.steps)
        throw ArgumentError("sampler: num_steps must be in [1, " + std::to_string(sched.steps) + "]");
    if (eta < 0.0 || eta > 1.0) throw ArgumentError("sampler: eta must be in [0, 1]");
}

std::vector<int> sampling_timesteps(int train_steps, int num_steps) {
    if (num_steps < 1 || num_steps > train_steps) throw ArgumentError("sampling_timesteps: bad step count");
    std::vector<int> ts(num_steps);
    for (int k = 0; k < num_steps; ++k)
        ts[num_steps - 1 - k] = 1 + static_cast<int>(static_cast<long long>(k) * train_steps / num_steps);
    return ts;
}

SampleResult sample(const NoisePredictor& denoiser, const Volume& fixed, const Volume& moving,
                    const SamplerConfig& cfg, const NoiseSchedule& sched, const FieldStats& stats,
                    const StepCallback& on_step) {
    cfg.validate(sched);
    if (!(fixed.shape == moving.shape))
        throw DimensionError("sample: fixed " + fixed.shape.str() + " and moving " + moving.shape.str() + " differ");
    const auto start = std::chrono::steady_clock::now();
    Rng rng(cfg.seed);
    DeformationField phi = random_normal_field(fixed.shape, rng, true);
    const std::vector<int> ts = sampling_timesteps(sched.steps, cfg.num_steps);

    SampleResult result;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
        DeformationField eps_hat = denoiser(fixed, moving, phi, t);
        if (!(eps_hat.shape == phi.shape) || eps_hat.disp.size() != phi.disp.size())
            throw DimensionError("sample: denoiser returned " + eps_hat.shape.str() + ", expected " + phi.shape.str());
        eps_hat.normalized = true;

        TrajectorySnapshot snap;
        snap.t = t;
        snap.step_index = static_cast<int>(k);
        snap.total_steps = cfg.num_steps;
        snap.alpha_bar = sched.alpha_bar(t);
        snap.phi0_hat = predict_phi0(phi, eps_hat, t, sched);
        snap.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        result.steps_run = static_cast<int>(k) + 1;
        result.last_t = t;
        bool stop = false;
        if (on_step) {
            snap.phi_t = phi;
            stop = on_step(snap) == StepAction::stop;
        }
        if (cfg.stop_flag_poll && cfg.stop_flag && cfg.stop_flag->load()) stop = true;
        if (stop && k + 1 < ts.size()) {
            result.early_stopped = true;
            result.field = denormalize_field(snap.phi0_hat, stats);
            return result;
        }

        if (cfg.kind == SamplerKind::ddim)
            phi = ddim_step(phi, eps_hat, t, t_prev, cfg.eta, sched, rng);
        else
            phi = ddpm_step(phi, eps_hat, t, sched, rng, t_prev);
    }
    phi.normalized = true;
    result.field = denormalize_field(phi, stats);
    return result;
}

}  // namespace dreg

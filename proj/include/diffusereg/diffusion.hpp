#pragma once

#include <atomic>
#include <functional>
#include <vector>

#include "diffusereg/grid.hpp"
#include "diffusereg/random.hpp"

namespace dreg {

/// Forward-process tables. Stored 0-based: betas[i] is beta at timestep i + 1.
struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    int steps = 0;

    double beta(int t) const;
    /// Cumulative product up to t; alpha_bar(0) == 1.
    double alpha_bar(int t) const;
    void check_timestep(int t, const char* op) const;
};

/// Default schedule: beta linear from 1e-6 to 1e-2 over 2000 steps.
inline constexpr double kDefaultBetaStart = 1e-6;
inline constexpr double kDefaultBetaEnd = 1e-2;
inline constexpr int kDefaultTrainSteps = 2000;

NoiseSchedule make_linear_schedule(double beta_start, double beta_end, int steps);
inline NoiseSchedule default_schedule() {
    return make_linear_schedule(kDefaultBetaStart, kDefaultBetaEnd, kDefaultTrainSteps);
}

/// sqrt(abar_t) * phi0 + sqrt(1 - abar_t) * eps, in normalized space.
DeformationField q_sample(const DeformationField& phi0, int t, const DeformationField& eps,
                          const NoiseSchedule& sched);

/// Inverts q_sample given a noise estimate.
DeformationField predict_phi0(const DeformationField& phi_t, const DeformationField& eps_hat, int t,
                              const NoiseSchedule& sched);

/// Ancestral step from t to t_prev (default t - 1) with posterior variance.
/// Skipping steps uses the respaced betas 1 - abar_t / abar_prev. No noise is
/// added when t_prev == 0.
DeformationField ddpm_step(const DeformationField& phi_t, const DeformationField& eps_hat, int t,
                           const NoiseSchedule& sched, Rng& rng, int t_prev = -1);

/// DDIM update through the predicted clean field; eta = 0 is deterministic.
DeformationField ddim_step(const DeformationField& phi_t, const DeformationField& eps_hat, int t, int t_prev,
                           double eta, const NoiseSchedule& sched, Rng& rng);

enum class SamplerKind { ddpm, ddim };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ddpm;
    int num_steps = kDefaultTrainSteps;
    double eta = 0.0;
    std::uint64_t seed = 0;
    bool stop_flag_poll = false;
    const std::atomic<bool>* stop_flag = nullptr;

    void validate(const NoiseSchedule& sched) const;
};

/// Descending timesteps visited by a sampler with `num_steps` evaluations.
std::vector<int> sampling_timesteps(int train_steps, int num_steps);

struct TrajectorySnapshot {
    int t = 0;
    int step_index = 0;
    int total_steps = 0;
    DeformationField phi_t;     // normalized
    DeformationField phi0_hat;  // normalized
    double alpha_bar = 1.0;
    double wall_time_s = 0.0;
};

enum class StepAction { proceed, stop };

/// Predicts the noise in phi_t given the image pair.
using NoisePredictor =
    std::function<DeformationField(const Volume& fixed, const Volume& moving, const DeformationField& phi_t, int t)>;
using StepCallback = std::function<StepAction(const TrajectorySnapshot&)>;

struct SampleResult {
    DeformationField field;  // physical units
    bool early_stopped = false;
    int steps_run = 0;
    int last_t = 0;
};

/// Reverse sampling from pure noise. `on_step` sees every step; returning stop,
/// or the polled stop flag being set, ends the run with the current predicted
/// clean field.
SampleResult sample(const NoisePredictor& denoiser, const Volume& fixed, const Volume& moving,
                    const SamplerConfig& cfg, const NoiseSchedule& sched, const FieldStats& stats,
                    const StepCallback& on_step = {});

}  // namespace dreg

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffusereg/ad.hpp"
#include "diffusereg/checkpoint.hpp"
#include "diffusereg/data.hpp"
#include "diffusereg/diffusion.hpp"
#include "diffusereg/network.hpp"
#include "diffusereg/objectives.hpp"
#include "diffusereg/random.hpp"

namespace dreg {

struct Ablations {
    bool use_phi0 = true;
    bool time_resblocks = true;
    bool condition_mask = true;
    bool aux_losses = true;
};

struct TrainConfig {
    int max_epochs = 1200;
    int batch_size = 1;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    Ablations ablations;
    LossWeights loss;

    int checkpoint_every = 1;  // epochs
    int validate_every = 1;    // epochs; 0 disables validation
    int val_pairs = 4;
    int val_steps = 25;
    int keep_every = 0;        // also keep epoch_XXXXX.ckpt every n epochs; 0 keeps none
    double grad_clip = 0.0;    // global L2 norm; 0 disables clipping
    bool flip_augment = false;
    double time_budget_s = 0.0;  // 0 means unlimited

    void validate() const;
    nlohmann::json to_json() const;
    /// Missing keys keep their defaults.
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Cosine annealing from `base` to 0 over `max_epochs`.
double cosine_lr(double base, int epoch, int max_epochs);

/// Decoupled-weight-decay Adam over a parameter set.
class AdamW {
public:
    explicit AdamW(const TrainConfig& cfg);

    void step(DenoiserParams& params, double lr);
    AdamState& state() { return state_; }
    const AdamState& state() const { return state_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    AdamState state_;
};

struct StepLoss {
    int t = 0;
    double total = 0.0;
    double diffuse = 0.0;
    double sim = 0.0;
    double reg = 0.0;
    double grad_norm = 0.0;
};

using TrainForward =
    std::function<ad::Tensor(const Volume& fixed, const Volume& moving, const DeformationField& phi_t, int t)>;

/// Draws t ~ U{1..T} and eps ~ N(0, I) per sample, forms phi_t, evaluates the
/// total loss and, when `params` and `opt` are given, applies one update with the
/// gradient averaged over the batch. Throws TrainingError on a non-finite loss.
StepLoss train_step(const std::vector<const RegistrationSample*>& batch, const TrainForward& model,
                    DenoiserParams* params, AdamW* opt, const NoiseSchedule& sched, const FieldStats& stats,
                    const TrainConfig& cfg, double lr, Rng& rng);

/// Mirrors the pair along `axis`; the field is reflected with its axis component negated.
RegistrationSample flip_sample(const RegistrationSample& s, int axis);

/// Network configuration after applying the ablation switches.
DenoiserConfig apply_ablations(DenoiserConfig net, const Ablations& ab);

struct TrainOptions {
    bool resume = true;
    int stop_after_epochs = -1;                    // simulate an interruption
    const std::atomic<bool>* stop_flag = nullptr;  // checked between steps
    std::function<void(const nlohmann::json&)> on_event;
};

struct TrainSummary {
    int epochs_done = 0;
    long long steps = 0;
    double best_metric = -1.0;
    int best_epoch = -1;
    bool resumed = false;
    bool budget_exhausted = false;
    bool interrupted = false;
    std::filesystem::path last_checkpoint;
    std::filesystem::path best_checkpoint;
};

/// Mean validation score of a model: overall Dice when masks exist, otherwise SSIM.
double validation_score(const Denoiser& model, const std::vector<RegistrationSample>& pairs, int steps,
                        const NoiseSchedule& sched, const FieldStats& stats, std::uint64_t seed);

/// Full training run writing `last.ckpt`, `best.ckpt` and `train_log.jsonl` under
/// `out_dir`. An existing `last.ckpt` is resumed when `opt.resume` is set.
TrainSummary train(const Dataset& ds, const TrainConfig& cfg, const DenoiserConfig& net,
                   const std::filesystem::path& out_dir, const TrainOptions& opt = {});

}  // namespace dreg

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffusereg/diffusion.hpp"
#include "diffusereg/network.hpp"

namespace dreg {

inline constexpr int kCheckpointVersion = 1;

struct ScheduleMeta {
    double beta_start = kDefaultBetaStart;
    double beta_end = kDefaultBetaEnd;
    int steps = kDefaultTrainSteps;

    NoiseSchedule make() const { return make_linear_schedule(beta_start, beta_end, steps); }
    nlohmann::json to_json() const;
    static ScheduleMeta from_json(const nlohmann::json& j);
};

/// Optimizer moments keyed like the parameters.
struct AdamState {
    long long step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

/// Everything needed to continue an interrupted run.
struct TrainState {
    int epochs_done = 0;
    long long global_step = 0;
    std::string rng_state;
    double best_metric = -1.0;
    int best_epoch = -1;
    nlohmann::json train_config;
    AdamState adam;
};

struct Checkpoint {
    DenoiserConfig config;
    DenoiserParams params;
    ScheduleMeta schedule;
    FieldStats stats;
    std::optional<TrainState> train;
    nlohmann::json meta = nlohmann::json::object();
};

/// Binary layout: 8-byte magic, u32 version, u64 header length, JSON header,
/// then float64 payload (parameters in name order, then optimizer moments).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Header only (no payload), for inspection.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

Denoiser denoiser_from(const Checkpoint& ckpt);

}  // namespace dreg

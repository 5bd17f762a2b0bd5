#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "diffusereg/diffusion.hpp"
#include "diffusereg/grid.hpp"

namespace dreg {

inline constexpr int kProtocolVersion = 1;

enum class RunStatus { pending, running, paused, stopped_early, completed, failed };

std::string to_string(RunStatus s);
bool is_terminal(RunStatus s);

struct SliceSelection {
    int axis = 0;
    int index = -1;  // -1 selects the middle slice
};

struct RunRequest {
    std::filesystem::path checkpoint;
    std::filesystem::path dataset;  // manifest path
    std::string sample_id;
    SamplerConfig sampler;
    int stride = 1;
    int downsample = 1;
    int stop_at = 0;  // accept automatically after this many steps; 0 runs to the end
    SliceSelection slice;
    nlohmann::json guidance;  // reserved, carried through unchanged

    static RunRequest from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

enum class ControlKind { pause, resume, stop_and_accept, set_stream_stride, set_slice };

struct ControlCommand {
    ControlKind kind = ControlKind::pause;
    int stride = 1;
    SliceSelection slice;

    static ControlCommand from_json(const nlohmann::json& j);
};

/// Base64 of little-endian float32 values.
std::string encode_f32(const std::vector<double>& values);
std::vector<float> decode_f32(const std::string& b64);

/// One 2D slice of a volume (rows x cols) along `axis`, average-pooled by `factor`.
struct Slice2D {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    nlohmann::json to_json() const;
};
Slice2D extract_slice(std::span<const double> vol, Shape3 s, int axis, int index, int factor);

/// Mean absolute residual noise |phi_t - sqrt(abar_t) * phi0_hat| (normalized units).
double residual_noise(const TrajectorySnapshot& snap);
/// Mean squared residual noise, same units squared.
double residual_power(const TrajectorySnapshot& snap);

/// Owns sampling runs: a fixed number of worker slots, a FIFO of pending runs,
/// per-run control queues and event logs.
class RunManager {
public:
    explicit RunManager(std::filesystem::path results_root, int slots = 1);
    ~RunManager();
    RunManager(const RunManager&) = delete;
    RunManager& operator=(const RunManager&) = delete;

    /// Queues a run. Requests that fail validation still get an id and go straight to failed.
    std::string start_run(const RunRequest& req);
    nlohmann::json state(const std::string& run_id) const;
    /// Applies a command. Returns {accepted, state}; commands on terminal runs are rejected.
    std::pair<bool, nlohmann::json> control(const std::string& run_id, const ControlCommand& cmd);
    /// Result descriptor, or the structured error report for failed runs. Empty while running.
    std::optional<nlohmann::json> result(const std::string& run_id) const;
    bool exists(const std::string& run_id) const;

    /// Events from `cursor` on, waiting up to `timeout` for at least one. `done` is set
    /// once the terminal event has been returned.
    std::vector<nlohmann::json> events(const std::string& run_id, std::size_t cursor,
                                       std::chrono::milliseconds timeout, bool& done) const;
    /// Latest full-resolution predicted field (physical units) as a JSON payload.
    std::optional<nlohmann::json> latest_field(const std::string& run_id) const;
    /// Blocks until the run reaches a terminal state or the timeout expires.
    bool wait(const std::string& run_id, std::chrono::milliseconds timeout) const;

    const std::filesystem::path& results_root() const { return root_; }

private:
    struct Run;
    std::shared_ptr<Run> find(const std::string& run_id) const;
    void worker_loop();
    void execute(Run& run);

    std::filesystem::path root_;
    mutable std::mutex mutex_;
    std::condition_variable queue_cv_;
    std::map<std::string, std::shared_ptr<Run>> runs_;
    std::deque<std::shared_ptr<Run>> queue_;
    std::vector<std::thread> workers_;
    bool shutting_down_ = false;
    std::uint64_t counter_ = 0;
};

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path results_root = "runs";
    int slots = 1;
};

/// HTTP front end over a RunManager.
class SteeringServer {
public:
    explicit SteeringServer(const ServerOptions& opt);
    ~SteeringServer();

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    /// Serves on the calling thread until stop().
    void run();
    void stop();
    RunManager& runs() { return *manager_; }

private:
    void install_routes();

    ServerOptions opt_;
    std::unique_ptr<RunManager> manager_;
    struct Http;
    std::unique_ptr<Http> http_;
    std::thread thread_;
};

}  // namespace dreg

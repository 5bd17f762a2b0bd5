#include "diffusereg/service.hpp"

#include <cmath>
#include <cstring>

#include <httplib.h>

#include "diffusereg/checkpoint.hpp"
#include "diffusereg/data.hpp"
#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"
#include "diffusereg/io.hpp"
#include "diffusereg/metrics.hpp"
#include "diffusereg/objectives.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dreg {

std::string to_string(RunStatus s) {
    switch (s) {
        case RunStatus::pending: return "pending";
        case RunStatus::running: return "running";
        case RunStatus::paused: return "paused";
        case RunStatus::stopped_early: return "stopped_early";
        case RunStatus::completed: return "completed";
        case RunStatus::failed: return "failed";
    }
    return "unknown";
}

bool is_terminal(RunStatus s) {
    return s == RunStatus::stopped_early || s == RunStatus::completed || s == RunStatus::failed;
}

// ---- protocol types -------------------------------------------------------------

namespace {

json sampler_to_json(const SamplerConfig& c) {
    return {{"kind", c.kind == SamplerKind::ddim ? "ddim" : "ddpm"}, {"steps", c.num_steps}, {"eta", c.eta}, {"seed", c.seed}};
}

SamplerConfig sampler_from_json(const json& j) {
    SamplerConfig c;
    const std::string kind = j.value("kind", std::string("ddim"));
    if (kind == "ddim")
        c.kind = SamplerKind::ddim;
    else if (kind == "ddpm")
        c.kind = SamplerKind::ddpm;
    else
        throw ArgumentError("sampler kind must be 'ddim' or 'ddpm'");
    c.num_steps = j.value("steps", 50);
    c.eta = j.value("eta", 0.0);
    c.seed = j.value("seed", std::uint64_t{0});
    return c;
}

SliceSelection slice_from_json(const json& j) {
    SliceSelection s;
    s.axis = j.value("axis", 0);
    s.index = j.value("index", -1);
    if (s.axis < 0 || s.axis > 2) throw ArgumentError("slice axis must be 0, 1 or 2");
    if (s.index < -1) throw ArgumentError("slice index must be >= -1");
    return s;
}

}  // namespace

RunRequest RunRequest::from_json(const json& j) {
    try {
        RunRequest r;
        r.checkpoint = j.at("checkpoint").get<std::string>();
        const auto& s = j.at("sample");
        r.dataset = s.at("dataset").get<std::string>();
        r.sample_id = s.at("id").get<std::string>();
        r.sampler = sampler_from_json(j.value("sampler", json::object()));
        r.stride = j.value("stride", 1);
        r.downsample = j.value("downsample", 1);
        r.stop_at = j.value("stop_at", 0);
        if (j.contains("slice")) r.slice = slice_from_json(j["slice"]);
        r.guidance = j.value("guidance", json());
        if (r.stride < 1) throw ArgumentError("stride must be >= 1");
        if (r.downsample < 1) throw ArgumentError("downsample must be >= 1");
        if (r.stop_at < 0) throw ArgumentError("stop_at must be >= 0");
        if (r.sampler.num_steps < 1) throw ArgumentError("sampler steps must be >= 1");
        if (r.sampler.eta < 0.0 || r.sampler.eta > 1.0) throw ArgumentError("sampler eta must be in [0, 1]");
        return r;
    } catch (const json::exception& e) {
        throw ArgumentError(std::string("run request: ") + e.what());
    }
}

json RunRequest::to_json() const {
    return {{"checkpoint", checkpoint.string()},
            {"sample", {{"dataset", dataset.string()}, {"id", sample_id}}},
            {"sampler", sampler_to_json(sampler)},
            {"stride", stride},
            {"downsample", downsample},
            {"stop_at", stop_at},
            {"slice", {{"axis", slice.axis}, {"index", slice.index}}},
            {"guidance", guidance}};
}

ControlCommand ControlCommand::from_json(const json& j) {
    try {
        ControlCommand c;
        const std::string cmd = j.at("command").get<std::string>();
        if (cmd == "pause")
            c.kind = ControlKind::pause;
        else if (cmd == "resume")
            c.kind = ControlKind::resume;
        else if (cmd == "stop_and_accept")
            c.kind = ControlKind::stop_and_accept;
        else if (cmd == "set_stream_stride") {
            c.kind = ControlKind::set_stream_stride;
            c.stride = j.at("stride").get<int>();
            if (c.stride < 1) throw ArgumentError("stride must be >= 1");
        } else if (cmd == "set_slice") {
            c.kind = ControlKind::set_slice;
            c.slice = slice_from_json(j);
        } else {
            throw ArgumentError("unknown command '" + cmd + "'");
        }
        return c;
    } catch (const json::exception& e) {
        throw ArgumentError(std::string("control command: ") + e.what());
    }
}

std::string encode_f32(const std::vector<double>& values) {
    std::string bytes(values.size() * sizeof(float), '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float f = static_cast<float>(values[i]);
        std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof f);
    }
    return httplib::detail::base64_encode(bytes);
}

std::vector<float> decode_f32(const std::string& b64) {
    static constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string bytes;
    unsigned buf = 0;
    int bits = 0;
    for (char c : b64) {
        if (c == '=') break;
        const auto pos = kAlphabet.find(c);
        if (pos == std::string_view::npos) throw ArgumentError("invalid base64 payload");
        buf = (buf << 6) | static_cast<unsigned>(pos);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            bytes.push_back(static_cast<char>((buf >> bits) & 0xff));
        }
    }
    if (bytes.size() % sizeof(float) != 0) throw ArgumentError("payload is not a whole number of float32 values");
    std::vector<float> out(bytes.size() / sizeof(float));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

json Slice2D::to_json() const {
    return {{"shape", {rows, cols}}, {"dtype", "float32"}, {"data", encode_f32(data)}};
}

Slice2D extract_slice(std::span<const double> vol, Shape3 s, int axis, int index, int factor) {
    if (axis < 0 || axis > 2) throw ArgumentError("slice axis must be 0, 1 or 2");
    if (factor < 1) throw ArgumentError("downsample factor must be >= 1");
    if (index < 0) index = s[axis] / 2;
    if (index >= s[axis]) throw ArgumentError("slice index " + std::to_string(index) + " outside the volume");
    const int ra = axis == 0 ? 1 : 0, ca = axis == 2 ? 1 : 2;
    const int n_rows = s[ra], n_cols = s[ca];
    Slice2D out;
    out.rows = (n_rows + factor - 1) / factor;
    out.cols = (n_cols + factor - 1) / factor;
    out.data.assign(static_cast<std::size_t>(out.rows) * out.cols, 0.0);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) {
            double acc = 0.0;
            int n = 0;
            for (int i = r * factor; i < std::min(n_rows, (r + 1) * factor); ++i)
                for (int k = c * factor; k < std::min(n_cols, (c + 1) * factor); ++k) {
                    int p[3];
                    p[axis] = index;
                    p[ra] = i;
                    p[ca] = k;
                    acc += vol[s.index(p[0], p[1], p[2])];
                    ++n;
                }
            out.data[static_cast<std::size_t>(r) * out.cols + c] = acc / n;
        }
    return out;
}

double residual_noise(const TrajectorySnapshot& snap) {
    const double a = std::sqrt(snap.alpha_bar);
    double acc = 0.0;
    for (std::size_t i = 0; i < snap.phi_t.disp.size(); ++i) acc += std::abs(snap.phi_t.disp[i] - a * snap.phi0_hat.disp[i]);
    return snap.phi_t.disp.empty() ? 0.0 : acc / static_cast<double>(snap.phi_t.disp.size());
}

double residual_power(const TrajectorySnapshot& snap) {
    const double a = std::sqrt(snap.alpha_bar);
    double acc = 0.0;
    for (std::size_t i = 0; i < snap.phi_t.disp.size(); ++i) {
        const double r = snap.phi_t.disp[i] - a * snap.phi0_hat.disp[i];
        acc += r * r;
    }
    return snap.phi_t.disp.empty() ? 0.0 : acc / static_cast<double>(snap.phi_t.disp.size());
}

// ---- run manager ----------------------------------------------------------------

struct RunManager::Run {
    std::string id;
    RunRequest req;
    mutable std::mutex m;
    mutable std::condition_variable cv;
    RunStatus status = RunStatus::pending;
    int step = 0;
    int total_steps = 0;
    int t = 0;
    int stride = 1;
    SliceSelection slice;
    std::string digest;
    std::deque<ControlCommand> controls;
    std::vector<json> events;
    bool cancel = false;
    std::optional<json> result;
    std::shared_ptr<const DeformationField> latest_field;

    json state_locked() const {
        json j{{"v", kProtocolVersion},
               {"run_id", id},
               {"status", to_string(status)},
               {"t", t},
               {"step", step},
               {"total_steps", total_steps},
               {"stride", stride},
               {"slice", {{"axis", slice.axis}, {"index", slice.index}}},
               {"snapshot_digest", digest},
               {"config", req.to_json()}};
        if (status == RunStatus::failed && result) j["error"] = (*result)["error"];
        return j;
    }
    void push_locked(json e) {
        e["v"] = kProtocolVersion;
        e["run_id"] = id;
        e["seq"] = events.size();
        events.push_back(std::move(e));
        cv.notify_all();
    }
    void set_status_locked(RunStatus s) {
        status = s;
        json e = state_locked();
        e.erase("config");
        e["type"] = "state";
        push_locked(std::move(e));
    }
};

namespace {

struct Cancelled {};

json error_report(const std::string& code, const std::string& message, const std::string& subject = {}) {
    json e{{"code", code}, {"message", message}};
    if (!subject.empty()) e["subject"] = subject;
    return e;
}

std::vector<double> downsample3(const std::vector<double>& v, Shape3 s, int f, Shape3& out_shape) {
    if (f == 1) {
        out_shape = s;
        return v;
    }
    out_shape = {(s.d + f - 1) / f, (s.h + f - 1) / f, (s.w + f - 1) / f};
    std::vector<double> out(out_shape.size(), 0.0);
    std::vector<int> count(out_shape.size(), 0);
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const std::size_t o = out_shape.index(z / f, y / f, x / f);
                out[o] += v[s.index(z, y, x)];
                ++count[o];
            }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= count[i];
    return out;
}

double ssim_any(const Volume& a, const Volume& b) {
    const int edge = a.shape.min_edge();
    const int k = edge >= 9 ? 9 : edge - (edge % 2 == 0);
    if (k < 1) return 1.0;
    return ssim3d(a, b, k);
}

void quantize_f32(std::vector<double>& v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

std::string field_digest(const DeformationField& f) {
    std::vector<float> v(f.disp.begin(), f.disp.end());
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", crc32_of(v.data(), v.size() * sizeof(float)));
    return buf;
}

}  // namespace

RunManager::RunManager(fs::path results_root, int slots) : root_(std::move(results_root)) {
    if (slots < 1) throw ArgumentError("need at least one worker slot");
    fs::create_directories(root_);
    for (int i = 0; i < slots; ++i) workers_.emplace_back([this] { worker_loop(); });
}

RunManager::~RunManager() {
    {
        std::lock_guard lk(mutex_);
        shutting_down_ = true;
        for (auto& [id, run] : runs_) {
            std::lock_guard rl(run->m);
            run->cancel = true;
            run->cv.notify_all();
        }
    }
    queue_cv_.notify_all();
    for (auto& w : workers_) w.join();
}

std::shared_ptr<RunManager::Run> RunManager::find(const std::string& run_id) const {
    std::lock_guard lk(mutex_);
    auto it = runs_.find(run_id);
    if (it == runs_.end()) throw ArgumentError("unknown run '" + run_id + "'");
    return it->second;
}

bool RunManager::exists(const std::string& run_id) const {
    std::lock_guard lk(mutex_);
    return runs_.count(run_id) > 0;
}

std::string RunManager::start_run(const RunRequest& req) {
    auto run = std::make_shared<Run>();
    run->req = req;
    run->stride = req.stride;
    run->slice = req.slice;
    run->total_steps = req.sampler.num_steps;
    {
        std::lock_guard lk(mutex_);
        do {
            char buf[24];
            std::snprintf(buf, sizeof buf, "run-%06llu", static_cast<unsigned long long>(++counter_));
            run->id = buf;
        } while (runs_.count(run->id) || fs::exists(root_ / run->id));
        runs_[run->id] = run;
    }
    std::optional<json> failure;
    try {
        const json h = read_checkpoint_header(req.checkpoint);
        const int train_steps = h.at("schedule").at("steps").get<int>();
        if (req.sampler.num_steps > train_steps)
            failure = error_report("bad_request", "sampler steps exceed the " + std::to_string(train_steps) +
                                                      " training timesteps of the checkpoint");
        if (!fs::exists(req.dataset)) failure = error_report("data", "dataset manifest not found", req.dataset.string());
    } catch (const DataError& e) {
        failure = error_report("checkpoint", e.what(), e.subject());
    } catch (const std::exception& e) {
        failure = error_report("checkpoint", e.what(), req.checkpoint.string());
    }
    std::lock_guard rl(run->m);
    if (failure) {
        run->result = json{{"v", kProtocolVersion}, {"run_id", run->id}, {"status", "failed"}, {"error", *failure}};
        run->set_status_locked(RunStatus::failed);
        run->push_locked({{"type", "terminal"}, {"status", "failed"}, {"error", *failure}});
        return run->id;
    }
    run->push_locked([&] {
        json e = run->state_locked();
        e["type"] = "state";
        return e;
    }());
    {
        std::lock_guard lk(mutex_);
        queue_.push_back(run);
    }
    queue_cv_.notify_one();
    return run->id;
}

json RunManager::state(const std::string& run_id) const {
    auto run = find(run_id);
    std::lock_guard rl(run->m);
    return run->state_locked();
}

std::pair<bool, json> RunManager::control(const std::string& run_id, const ControlCommand& cmd) {
    auto run = find(run_id);
    std::lock_guard rl(run->m);
    if (is_terminal(run->status)) {
        json s = run->state_locked();
        s["rejected"] = "run is " + to_string(run->status);
        return {false, s};
    }
    run->controls.push_back(cmd);
    run->cv.notify_all();
    return {true, run->state_locked()};
}

std::optional<json> RunManager::result(const std::string& run_id) const {
    auto run = find(run_id);
    std::lock_guard rl(run->m);
    return run->result;
}

std::vector<json> RunManager::events(const std::string& run_id, std::size_t cursor, std::chrono::milliseconds timeout,
                                     bool& done) const {
    auto run = find(run_id);
    std::unique_lock rl(run->m);
    run->cv.wait_for(rl, timeout, [&] { return run->events.size() > cursor; });
    std::vector<json> out;
    for (std::size_t i = cursor; i < run->events.size(); ++i) out.push_back(run->events[i]);
    done = !run->events.empty() && run->events.back().value("type", "") == "terminal" && cursor + out.size() == run->events.size();
    return out;
}

std::optional<json> RunManager::latest_field(const std::string& run_id) const {
    auto run = find(run_id);
    std::shared_ptr<const DeformationField> f;
    int step = 0, t = 0;
    {
        std::lock_guard rl(run->m);
        f = run->latest_field;
        step = run->step;
        t = run->t;
    }
    if (!f) return std::nullopt;
    return json{{"v", kProtocolVersion}, {"run_id", run_id},          {"step", step},
                {"t", t},               {"shape", {3, f->shape.d, f->shape.h, f->shape.w}},
                {"dtype", "float32"},   {"data", encode_f32(f->disp)}, {"digest", field_digest(*f)}};
}

bool RunManager::wait(const std::string& run_id, std::chrono::milliseconds timeout) const {
    auto run = find(run_id);
    std::unique_lock rl(run->m);
    return run->cv.wait_for(rl, timeout, [&] { return is_terminal(run->status); });
}

void RunManager::worker_loop() {
    for (;;) {
        std::shared_ptr<Run> run;
        {
            std::unique_lock lk(mutex_);
            queue_cv_.wait(lk, [&] { return shutting_down_ || !queue_.empty(); });
            if (shutting_down_) return;
            run = queue_.front();
            queue_.pop_front();
        }
        execute(*run);
    }
}

void RunManager::execute(Run& run) {
    const RunRequest& req = run.req;
    auto fail = [&](const json& err) {
        std::lock_guard rl(run.m);
        run.result = json{{"v", kProtocolVersion}, {"run_id", run.id}, {"status", "failed"}, {"error", err}};
        run.set_status_locked(RunStatus::failed);
        run.push_locked({{"type", "terminal"}, {"status", "failed"}, {"error", err}});
    };
    {
        std::lock_guard rl(run.m);
        if (run.cancel) {
            run.result = json{{"status", "failed"}, {"error", error_report("cancelled", "service shut down")}};
            run.status = RunStatus::failed;
            return;
        }
        run.set_status_locked(RunStatus::running);
    }
    try {
        const Checkpoint ck = load_checkpoint(req.checkpoint);
        const Denoiser model = denoiser_from(ck);
        const NoiseSchedule sched = ck.schedule.make();
        const Dataset ds(req.dataset);
        const RegistrationSample s = ds.load(req.sample_id);
        const Shape3 shape = s.fixed.shape;
        SamplerConfig sc = req.sampler;
        sc.validate(sched);

        Shape3 small_shape;
        std::vector<double> fixed_small_data = downsample3(s.fixed.data, shape, req.downsample, small_shape);
        const Volume fixed_small(small_shape, std::move(fixed_small_data));

        std::optional<DeformationField> accepted_field;
        bool stop_seen = false;
        const auto on_step = [&](const TrajectorySnapshot& snap) -> StepAction {
            std::unique_lock rl(run.m);
            bool emitted = false;
            auto emit = [&] {
                DeformationField phys = denormalize_field(snap.phi0_hat, ck.stats);
                const Volume warped = warp(s.moving, phys);
                Shape3 ss;
                std::vector<double> warped_small_data = downsample3(warped.data, shape, req.downsample, ss);
                const Volume warped_small(ss, std::move(warped_small_data));
                const SliceSelection sel = run.slice;
                const int index = sel.index < 0 ? shape[sel.axis] / 2 : std::min(sel.index, shape[sel.axis] - 1);
                json field = json::object();
                for (int c = 0; c < 3; ++c)
                    field["c" + std::to_string(c)] = extract_slice(phys.channel(c), shape, sel.axis, index, req.downsample).to_json();
                const int ra = sel.axis == 0 ? 1 : 0, ca = sel.axis == 2 ? 1 : 2;
                json e{{"type", "snapshot"},
                       {"step", snap.step_index + 1},
                       {"t", snap.t},
                       {"total_steps", snap.total_steps},
                       {"alpha_bar", snap.alpha_bar},
                       {"wall_time_s", snap.wall_time_s},
                       {"slice", {{"axis", sel.axis}, {"index", index}, {"downsample", req.downsample}}},
                       {"images",
                        {{"fixed", extract_slice(s.fixed.data, shape, sel.axis, index, req.downsample).to_json()},
                         {"warped", extract_slice(warped.data, shape, sel.axis, index, req.downsample).to_json()}}},
                       {"field", field},
                       {"grid", {{"row_channel", ra}, {"col_channel", ca}}},
                       {"metrics",
                        {{"ssim", ssim_any(fixed_small, warped_small)},
                         {"njd", shape.min_edge() >= 3 ? njd(phys) : 0.0},
                         {"residual_noise", residual_noise(snap)},
                         {"residual_power", residual_power(snap)}}}};
                quantize_f32(phys.disp);
                run.digest = field_digest(phys);
                e["digest"] = run.digest;
                run.latest_field = std::make_shared<const DeformationField>(std::move(phys));
                run.push_locked(std::move(e));
                emitted = true;
            };
            auto drain = [&] {
                while (!run.controls.empty()) {
                    const ControlCommand cmd = run.controls.front();
                    run.controls.pop_front();
                    switch (cmd.kind) {
                        case ControlKind::pause:
                            if (run.status == RunStatus::running) run.set_status_locked(RunStatus::paused);
                            break;
                        case ControlKind::resume:
                            if (run.status == RunStatus::paused) run.set_status_locked(RunStatus::running);
                            break;
                        case ControlKind::stop_and_accept: stop_seen = true; break;
                        case ControlKind::set_stream_stride: run.stride = cmd.stride; break;
                        case ControlKind::set_slice: run.slice = cmd.slice; break;
                    }
                }
            };
            if (run.cancel) throw Cancelled{};
            run.step = snap.step_index + 1;
            run.t = snap.t;
            drain();
            if (req.stop_at > 0 && snap.step_index + 1 >= req.stop_at) stop_seen = true;
            if (snap.step_index % run.stride == 0 || stop_seen || run.status == RunStatus::paused) emit();
            while (run.status == RunStatus::paused && !stop_seen) {
                run.cv.wait(rl, [&] { return run.cancel || !run.controls.empty(); });
                if (run.cancel) throw Cancelled{};
                drain();
                if (stop_seen && !emitted) emit();
            }
            if (stop_seen) {
                accepted_field = *run.latest_field;
                return StepAction::stop;
            }
            return StepAction::proceed;
        };

        SampleResult r = sample(model.predictor(), s.fixed, s.moving, sc, sched, ck.stats, on_step);
        DeformationField field = r.early_stopped ? *accepted_field : r.field;
        quantize_f32(field.disp);
        const Volume warped = warp(s.moving, field);

        const fs::path dir = root_ / run.id;
        RegistrationSample out;
        out.id = "result";
        out.fixed = s.fixed;
        out.moving = s.moving;
        out.fixed_mask = s.fixed_mask;
        out.moving_mask = s.moving_mask;
        out.phi0 = field;
        DatasetManifest m;
        m.stats = ck.stats;
        write_sample(dir, out, m);
        save_manifest(dir, m);
        const std::uint32_t warped_crc = write_f32(dir / "result/warped.f32", warped.data);
        RegistrationEvalInputs in;
        in.fixed = &s.fixed;
        in.moving = &s.moving;
        in.field = &field;
        in.fixed_mask = s.fixed_mask ? &*s.fixed_mask : nullptr;
        in.moving_mask = s.moving_mask ? &*s.moving_mask : nullptr;
        MetricsReport report = evaluate_registration(in);
        report.meta["sample"] = req.sample_id;
        report.meta["run_id"] = run.id;
        write_file_atomic(dir / "metrics.json", report.to_json().dump(2));

        const RunStatus final_status = r.early_stopped ? RunStatus::stopped_early : RunStatus::completed;
        json res{{"v", kProtocolVersion},
                 {"run_id", run.id},
                 {"status", to_string(final_status)},
                 {"steps_run", r.steps_run},
                 {"last_t", r.last_t},
                 {"shape", {shape.d, shape.h, shape.w}},
                 {"dir", dir.string()},
                 {"manifest", (dir / "manifest.json").string()},
                 {"field", {{"file", (dir / m.samples[0].phi0->file).string()}, {"crc32", m.samples[0].phi0->crc32}, {"channels", 3}}},
                 {"warped", {{"file", (dir / "result/warped.f32").string()}, {"crc32", warped_crc}, {"channels", 1}}},
                 {"metrics", report.to_json()},
                 {"digest", field_digest(field)}};
        write_file_atomic(dir / "result.json", res.dump(2));

        std::lock_guard rl(run.m);
        run.result = res;
        run.latest_field = std::make_shared<const DeformationField>(field);
        run.set_status_locked(final_status);
        run.push_locked({{"type", "terminal"}, {"status", to_string(final_status)}, {"steps_run", r.steps_run},
                         {"result", res}});
    } catch (const Cancelled&) {
        fail(error_report("cancelled", "service shut down before the run finished"));
    } catch (const DataError& e) {
        fail(error_report("data", e.what(), e.subject()));
    } catch (const std::exception& e) {
        fail(error_report("runtime", e.what()));
    }
}

// ---- HTTP -----------------------------------------------------------------------

struct SteeringServer::Http {
    httplib::Server server;
    int port = 0;
};

SteeringServer::SteeringServer(const ServerOptions& opt)
    : opt_(opt), manager_(std::make_unique<RunManager>(opt.results_root, opt.slots)), http_(std::make_unique<Http>()) {
    install_routes();
}

SteeringServer::~SteeringServer() {
    stop();
    if (thread_.joinable()) thread_.join();
}

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

json error_body(const std::string& code, const std::string& message) {
    return {{"v", kProtocolVersion}, {"error", error_report(code, message)}};
}

}  // namespace

void SteeringServer::install_routes() {
    auto& srv = http_->server;
    RunManager& mgr = *manager_;

    srv.Get("/health", [](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, {{"v", kProtocolVersion}, {"status", "ok"}});
    });

    srv.Post("/runs", [&mgr](const httplib::Request& req, httplib::Response& res) {
        try {
            const RunRequest r = RunRequest::from_json(json::parse(req.body));
            const std::string id = mgr.start_run(r);
            send_json(res, 201, mgr.state(id));
        } catch (const json::exception& e) {
            send_json(res, 400, error_body("bad_request", e.what()));
        } catch (const ArgumentError& e) {
            send_json(res, 400, error_body("bad_request", e.what()));
        }
    });

    srv.Get(R"(/runs/([\w-]+))", [&mgr](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        if (!mgr.exists(id)) return send_json(res, 404, error_body("not_found", "unknown run '" + id + "'"));
        send_json(res, 200, mgr.state(id));
    });

    srv.Post(R"(/runs/([\w-]+)/control)", [&mgr](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        if (!mgr.exists(id)) return send_json(res, 404, error_body("not_found", "unknown run '" + id + "'"));
        try {
            const auto [accepted, state] = mgr.control(id, ControlCommand::from_json(json::parse(req.body)));
            send_json(res, accepted ? 200 : 409, state);
        } catch (const json::exception& e) {
            send_json(res, 400, error_body("bad_request", e.what()));
        } catch (const ArgumentError& e) {
            send_json(res, 400, error_body("bad_request", e.what()));
        }
    });

    srv.Get(R"(/runs/([\w-]+)/result)", [&mgr](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        if (!mgr.exists(id)) return send_json(res, 404, error_body("not_found", "unknown run '" + id + "'"));
        const auto r = mgr.result(id);
        if (!r) return send_json(res, 409, mgr.state(id));
        send_json(res, r->value("status", "") == "failed" ? 422 : 200, *r);
    });

    srv.Get(R"(/runs/([\w-]+)/field)", [&mgr](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        if (!mgr.exists(id)) return send_json(res, 404, error_body("not_found", "unknown run '" + id + "'"));
        const auto f = mgr.latest_field(id);
        if (!f) return send_json(res, 409, error_body("not_ready", "no field has been produced yet"));
        send_json(res, 200, *f);
    });

    srv.Get(R"(/runs/([\w-]+)/events)", [&mgr](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        if (!mgr.exists(id)) return send_json(res, 404, error_body("not_found", "unknown run '" + id + "'"));
        std::size_t from = 0;
        if (req.has_param("from")) from = std::stoul(req.get_param_value("from"));
        auto cursor = std::make_shared<std::size_t>(from);
        res.set_chunked_content_provider("application/x-ndjson", [&mgr, id, cursor](std::size_t, httplib::DataSink& sink) {
            bool done = false;
            const auto batch = mgr.events(id, *cursor, std::chrono::milliseconds(250), done);
            for (const auto& e : batch) {
                const std::string line = e.dump() + "\n";
                if (!sink.write(line.data(), line.size())) return false;
            }
            *cursor += batch.size();
            if (done) sink.done();
            return true;
        });
    });
}

int SteeringServer::start() {
    auto& srv = http_->server;
    http_->port = opt_.port == 0 ? srv.bind_to_any_port(opt_.host) : (srv.bind_to_port(opt_.host, opt_.port) ? opt_.port : -1);
    if (http_->port < 0) throw Error("cannot bind " + opt_.host + ":" + std::to_string(opt_.port));
    thread_ = std::thread([this] { http_->server.listen_after_bind(); });
    http_->server.wait_until_ready();
    return http_->port;
}

void SteeringServer::run() {
    if (!http_->server.listen(opt_.host, opt_.port)) throw Error("cannot listen on " + opt_.host + ":" + std::to_string(opt_.port));
}

void SteeringServer::stop() {
    if (http_) http_->server.stop();
}

}  // namespace dreg

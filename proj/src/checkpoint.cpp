#include "diffusereg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "diffusereg/data.hpp"
#include "diffusereg/errors.hpp"
#include "diffusereg/io.hpp"

namespace fs = std::filesystem;

namespace dreg {

namespace {

constexpr char kMagic[8] = {'D', 'R', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::size_t kPrefix = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);

template <typename T>
void append_pod(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void append_doubles(std::string& out, const std::vector<double>& v) {
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

struct Parsed {
    nlohmann::json header;
    std::string_view payload;
};

Parsed parse(const std::string& raw, const fs::path& path) {
    if (raw.size() < kPrefix || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0)
        throw DataError(path.string(), "not a checkpoint file");
    std::uint32_t version = 0;
    std::uint64_t header_len = 0;
    std::memcpy(&version, raw.data() + sizeof kMagic, sizeof version);
    std::memcpy(&header_len, raw.data() + sizeof kMagic + sizeof version, sizeof header_len);
    if (version != kCheckpointVersion)
        throw DataError(path.string(), "unsupported checkpoint version " + std::to_string(version));
    if (raw.size() < kPrefix + header_len) throw DataError(path.string(), "truncated header");
    Parsed p;
    try {
        p.header = nlohmann::json::parse(raw.substr(kPrefix, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string(), std::string("corrupt header: ") + e.what());
    }
    p.payload = std::string_view(raw).substr(kPrefix + header_len);
    return p;
}

}  // namespace

nlohmann::json ScheduleMeta::to_json() const {
    return {{"kind", "linear"}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"steps", steps}};
}

ScheduleMeta ScheduleMeta::from_json(const nlohmann::json& j) {
    if (j.value("kind", std::string("linear")) != "linear") throw DataError("schedule", "only linear schedules exist");
    ScheduleMeta s;
    s.beta_start = j.at("beta_start").get<double>();
    s.beta_end = j.at("beta_end").get<double>();
    s.steps = j.at("steps").get<int>();
    return s;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    nlohmann::json h;
    h["format"] = "diffusereg-checkpoint";
    h["config"] = ckpt.config.to_json();
    h["schedule"] = ckpt.schedule.to_json();
    h["stats"] = {{"mu", ckpt.stats.mu}, {"sigma", ckpt.stats.sigma}};
    h["meta"] = ckpt.meta;
    std::string payload;
    payload.reserve(ckpt.params.scalar_count() * sizeof(double) * (ckpt.train ? 3 : 1));
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : ckpt.params.tensors()) {
        tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
        append_doubles(payload, t.value());
    }
    h["tensors"] = std::move(tensors);
    if (ckpt.train) {
        const TrainState& ts = *ckpt.train;
        h["train"] = {{"epochs_done", ts.epochs_done},   {"global_step", ts.global_step},
                      {"rng_state", ts.rng_state},       {"best_metric", ts.best_metric},
                      {"best_epoch", ts.best_epoch},     {"train_config", ts.train_config},
                      {"adam_step", ts.adam.step},       {"adam_moments", !ts.adam.m.empty()}};
        if (!ts.adam.m.empty()) {
            for (const auto* moments : {&ts.adam.m, &ts.adam.v})
                for (const auto& [name, t] : ckpt.params.tensors()) {
                    auto it = moments->find(name);
                    if (it == moments->end() || it->second.size() != t.size())
                        throw StateError("optimizer state does not match parameter '" + name + "'");
                    append_doubles(payload, it->second);
                }
        }
    }
    h["payload_bytes"] = payload.size();
    h["payload_crc32"] = crc32_of(payload.data(), payload.size());

    const std::string header = h.dump();
    std::string out;
    out.reserve(kPrefix + header.size() + payload.size());
    out.append(kMagic, sizeof kMagic);
    append_pod(out, static_cast<std::uint32_t>(kCheckpointVersion));
    append_pod(out, static_cast<std::uint64_t>(header.size()));
    out += header;
    out += payload;
    write_file_atomic(path, out);
}

nlohmann::json read_checkpoint_header(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path.string(), "cannot open checkpoint");
    std::string prefix(kPrefix, '\0');
    in.read(prefix.data(), kPrefix);
    if (!in) throw DataError(path.string(), "not a checkpoint file");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, prefix.data() + sizeof kMagic + sizeof(std::uint32_t), sizeof header_len);
    if (header_len > (1ull << 30)) throw DataError(path.string(), "implausible header length");
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw DataError(path.string(), "truncated header");
    return parse(prefix + header, path).header;
}

Checkpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw DataError(path.string(), "checkpoint not found");
    const std::string raw = read_file(path);
    const Parsed p = parse(raw, path);
    const auto& h = p.header;
    Checkpoint ck;
    try {
        if (h.at("payload_bytes").get<std::size_t>() != p.payload.size())
            throw DataError(path.string(), "payload size mismatch");
        if (h.at("payload_crc32").get<std::uint32_t>() != crc32_of(p.payload.data(), p.payload.size()))
            throw DataError(path.string(), "checksum mismatch");
        ck.config = DenoiserConfig::from_json(h.at("config"));
        ck.schedule = ScheduleMeta::from_json(h.at("schedule"));
        ck.stats.mu = h.at("stats").at("mu").get<std::array<double, 3>>();
        ck.stats.sigma = h.at("stats").at("sigma").get<std::array<double, 3>>();
        ck.stats.validate();
        ck.meta = h.value("meta", nlohmann::json::object());

        std::size_t offset = 0;
        auto take = [&](std::size_t n) {
            if (offset + n * sizeof(double) > p.payload.size()) throw DataError(path.string(), "payload too short");
            std::vector<double> v(n);
            std::memcpy(v.data(), p.payload.data() + offset, n * sizeof(double));
            offset += n * sizeof(double);
            return v;
        };
        std::vector<std::pair<std::string, std::size_t>> layout;
        for (const auto& t : h.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const int rows = t.at("rows").get<int>(), cols = t.at("cols").get<int>();
            if (rows < 0 || cols < 0) throw DataError(path.string(), "bad shape for '" + name + "'");
            ck.params.add(name, rows, cols, take(static_cast<std::size_t>(rows) * cols));
            layout.emplace_back(name, static_cast<std::size_t>(rows) * cols);
        }
        if (h.contains("train")) {
            const auto& j = h["train"];
            TrainState ts;
            ts.epochs_done = j.at("epochs_done").get<int>();
            ts.global_step = j.at("global_step").get<long long>();
            ts.rng_state = j.at("rng_state").get<std::string>();
            ts.best_metric = j.at("best_metric").get<double>();
            ts.best_epoch = j.at("best_epoch").get<int>();
            ts.train_config = j.at("train_config");
            ts.adam.step = j.at("adam_step").get<long long>();
            if (j.at("adam_moments").get<bool>()) {
                for (const auto& [name, n] : layout) ts.adam.m[name] = take(n);
                for (const auto& [name, n] : layout) ts.adam.v[name] = take(n);
            }
            ck.train = std::move(ts);
        }
        if (offset != p.payload.size()) throw DataError(path.string(), "trailing payload bytes");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string(), std::string("malformed header: ") + e.what());
    } catch (const ArgumentError& e) {
        throw DataError(path.string(), e.what());
    } catch (const StateError& e) {
        throw DataError(path.string(), e.what());
    }
    return ck;
}

Denoiser denoiser_from(const Checkpoint& ckpt) { return Denoiser(ckpt.config, ckpt.params.clone()); }

}  // namespace dreg

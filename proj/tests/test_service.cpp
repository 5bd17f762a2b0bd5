#include <doctest.h>

#include <httplib.h>

#include "diffusereg/checkpoint.hpp"
#include "diffusereg/data.hpp"
#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"
#include "diffusereg/service.hpp"
#include "support.hpp"

using namespace dreg;
using nlohmann::json;
namespace fs = std::filesystem;
using namespace std::chrono_literals;

namespace {

DenoiserConfig tiny_net() {
    DenoiserConfig c;
    c.embed_dim = 8;
    c.depths = {1, 1};
    c.num_heads = {2, 4};
    c.window_size = 2;
    c.time_embed_dim = 16;
    return c;
}

/// Dataset plus an untrained checkpoint on an 8^3 grid.
struct Fixture {
    testing::TempDir dir{"svc"};
    fs::path manifest, ckpt;

    Fixture() {
        write_synthetic_dataset(dir / "data", 1, 1, {8, 8, 8}, 1.5, 5);
        manifest = dir / "data/manifest.json";
        Checkpoint ck;
        ck.config = tiny_net();
        ck.params = Denoiser(ck.config, 2).params().clone();
        ck.stats = *Dataset(manifest).manifest().stats;
        ckpt = dir / "model.ckpt";
        save_checkpoint(ckpt, ck);
    }

    RunRequest request(int steps, int stride = 1) const {
        RunRequest r;
        r.checkpoint = ckpt;
        r.dataset = manifest;
        r.sample_id = "test_0";
        r.sampler.kind = SamplerKind::ddim;
        r.sampler.num_steps = steps;
        r.sampler.seed = 4;
        r.stride = stride;
        return r;
    }
};

std::vector<json> collect(const RunManager& mgr, const std::string& id) {
    std::vector<json> all;
    bool done = false;
    for (int guard = 0; !done && guard < 2000; ++guard) {
        auto batch = mgr.events(id, all.size(), 100ms, done);
        all.insert(all.end(), batch.begin(), batch.end());
    }
    return all;
}

int count_type(const std::vector<json>& events, const std::string& type) {
    return static_cast<int>(std::count_if(events.begin(), events.end(), [&](const json& e) { return e["type"] == type; }));
}

}  // namespace

TEST_CASE("slice extraction and payload encoding") {
    const Shape3 s{2, 3, 4};
    std::vector<double> v(s.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    const Slice2D a = extract_slice(v, s, 0, 1, 1);
    CHECK(a.rows == 3);
    CHECK(a.cols == 4);
    CHECK(a.data[0] == 12.0);
    const Slice2D b = extract_slice(v, s, 2, 3, 1);
    CHECK(b.rows == 2);
    CHECK(b.cols == 3);
    CHECK(b.data[1 * 3 + 2] == s.index(1, 2, 3));
    const Slice2D c = extract_slice(v, s, 0, 0, 2);
    CHECK(c.rows == 2);
    CHECK(c.cols == 2);
    CHECK(c.data[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0));
    CHECK_THROWS_AS(extract_slice(v, s, 0, 2, 1), ArgumentError);

    const std::vector<double> vals{1.5, -2.25, 3e6, 0.0, 7.0};
    const auto back = decode_f32(encode_f32(vals));
    REQUIRE(back.size() == vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) CHECK(back[i] == static_cast<float>(vals[i]));
    CHECK(a.to_json()["shape"] == json::array({3, 4}));
}

TEST_CASE("protocol parsing") {
    CHECK_THROWS_AS(RunRequest::from_json(json::object()), ArgumentError);
    const json ok{{"checkpoint", "m.ckpt"}, {"sample", {{"dataset", "d/manifest.json"}, {"id", "a"}}}, {"guidance", {{"hint", 1}}}};
    const RunRequest r = RunRequest::from_json(ok);
    CHECK(r.sampler.kind == SamplerKind::ddim);
    CHECK(r.guidance["hint"] == 1);
    CHECK(RunRequest::from_json(r.to_json()).to_json() == r.to_json());
    json bad = ok;
    bad["stride"] = 0;
    CHECK_THROWS_AS(RunRequest::from_json(bad), ArgumentError);
    CHECK(ControlCommand::from_json({{"command", "set_slice"}, {"axis", 2}, {"index", 3}}).slice.axis == 2);
    CHECK_THROWS_AS(ControlCommand::from_json({{"command", "explode"}}), ArgumentError);
    CHECK_THROWS_AS(ControlCommand::from_json({{"command", "set_stream_stride"}, {"stride", 0}}), ArgumentError);
}

TEST_CASE("run lifecycle") {
    Fixture fx;
    RunManager mgr(fx.dir / "runs");

    SUBCASE("stride one streams one snapshot per step and one terminal event") {
        const auto id = mgr.start_run(fx.request(10));
        const auto ev = collect(mgr, id);
        CHECK(count_type(ev, "snapshot") == 10);
        CHECK(count_type(ev, "terminal") == 1);
        CHECK(ev.back()["type"] == "terminal");
        CHECK(ev.back()["status"] == "completed");
        for (std::size_t i = 0; i < ev.size(); ++i) {
            CHECK(ev[i]["seq"] == i);
            CHECK(ev[i]["v"] == kProtocolVersion);
        }
        CHECK(ev.front()["status"] == "pending");
        int last_step = 0;
        for (const auto& e : ev)
            if (e["type"] == "snapshot") {
                CHECK(e["step"].get<int>() == last_step + 1);
                last_step = e["step"];
                CHECK(e["metrics"].contains("ssim"));
                CHECK(e["metrics"].contains("njd"));
                CHECK(e["metrics"].contains("residual_noise"));
                CHECK(decode_f32(e["images"]["warped"]["data"]).size() == 64);
            }
        CHECK(mgr.state(id)["status"] == "completed");
    }
    SUBCASE("stride three emits every third step") {
        const auto id = mgr.start_run(fx.request(10, 3));
        const auto ev = collect(mgr, id);
        CHECK(count_type(ev, "snapshot") == 4);
    }
    SUBCASE("completed run persists all artifacts") {
        const auto id = mgr.start_run(fx.request(4));
        REQUIRE(mgr.wait(id, 60s));
        const auto res = mgr.result(id);
        REQUIRE(res.has_value());
        CHECK(fs::exists(res->at("field").at("file").get<std::string>()));
        CHECK(fs::exists(res->at("warped").at("file").get<std::string>()));
        CHECK(res->at("metrics").contains("dice_overall"));
        CHECK(fs::exists(fx.dir / "runs" / id / "metrics.json"));

        const Dataset out(res->at("manifest").get<std::string>());
        const auto loaded = out.load(0);
        const auto warped = read_f32(res->at("warped").at("file").get<std::string>(), loaded.fixed.shape.size(),
                                     res->at("warped").at("crc32").get<std::uint32_t>());
        const Volume rewarped = warp(loaded.moving, *loaded.phi0);
        CHECK(testing::max_abs_diff(rewarped.data, warped) < 1e-6);
    }
    SUBCASE("stop at step k keeps k snapshots and the last predicted field") {
        auto req = fx.request(12);
        req.stop_at = 5;
        const auto id = mgr.start_run(req);
        const auto ev = collect(mgr, id);
        CHECK(count_type(ev, "snapshot") == 5);
        CHECK(ev.back()["status"] == "stopped_early");
        std::string last_digest;
        for (const auto& e : ev)
            if (e["type"] == "snapshot") last_digest = e["digest"];
        const auto res = *mgr.result(id);
        CHECK(res["digest"] == last_digest);
        CHECK(res["steps_run"] == 5);
    }
    SUBCASE("pause then resume keeps the step count") {
        const auto id = mgr.start_run(fx.request(8));
        CHECK(mgr.control(id, {ControlKind::pause}).first);
        bool paused = false;
        for (int i = 0; i < 600 && !paused; ++i) {
            paused = mgr.state(id)["status"] == "paused";
            if (!paused) std::this_thread::sleep_for(10ms);
        }
        CHECK(paused);
        const int step_at_pause = mgr.state(id)["step"];
        std::this_thread::sleep_for(100ms);
        CHECK(mgr.state(id)["step"] == step_at_pause);
        CHECK(mgr.control(id, {ControlKind::resume}).first);
        const auto ev = collect(mgr, id);
        CHECK(count_type(ev, "snapshot") >= 8);
        CHECK((*mgr.result(id))["steps_run"] == 8);
        CHECK(ev.back()["status"] == "completed");
    }
    SUBCASE("commands on terminal runs are rejected") {
        const auto id = mgr.start_run(fx.request(2));
        REQUIRE(mgr.wait(id, 60s));
        const auto [accepted, state] = mgr.control(id, {ControlKind::pause});
        CHECK_FALSE(accepted);
        CHECK(state["status"] == "completed");
    }
    SUBCASE("bad checkpoint fails immediately with a reason") {
        auto req = fx.request(3);
        req.checkpoint = fx.dir / "nope.ckpt";
        const auto id = mgr.start_run(req);
        CHECK(mgr.state(id)["status"] == "failed");
        const auto res = mgr.result(id);
        REQUIRE(res.has_value());
        CHECK(res->at("error").at("code") == "checkpoint");
        const auto ev = collect(mgr, id);
        CHECK(count_type(ev, "terminal") == 1);
    }
    SUBCASE("unknown sample fails with a data error") {
        auto req = fx.request(3);
        req.sample_id = "ghost";
        const auto id = mgr.start_run(req);
        REQUIRE(mgr.wait(id, 60s));
        const auto res = *mgr.result(id);
        CHECK(res["status"] == "failed");
        CHECK(res["error"]["subject"] == "ghost");
    }
    SUBCASE("runs queue behind the single slot") {
        const auto a = mgr.start_run(fx.request(6));
        const auto b = mgr.start_run(fx.request(6));
        CHECK(mgr.wait(b, 120s));
        CHECK(mgr.state(a)["status"] == "completed");
        CHECK(mgr.state(b)["status"] == "completed");
    }
}

TEST_CASE("stride and slice changes apply from the next emission") {
    Fixture fx;
    RunManager mgr(fx.dir / "runs");
    auto req = fx.request(30);
    const auto id = mgr.start_run(req);
    CHECK(mgr.control(id, {ControlKind::pause}).first);
    ControlCommand slice{ControlKind::set_slice};
    slice.slice = {2, 1};
    ControlCommand stride{ControlKind::set_stream_stride};
    stride.stride = 4;
    CHECK(mgr.control(id, slice).first);
    CHECK(mgr.control(id, stride).first);
    CHECK(mgr.control(id, {ControlKind::resume}).first);
    const auto ev = collect(mgr, id);
    std::vector<int> steps;
    for (const auto& e : ev)
        if (e["type"] == "snapshot") steps.push_back(e["step"]);
    REQUIRE(steps.size() >= 2);
    const auto& last = *std::find_if(ev.rbegin(), ev.rend(), [](const json& e) { return e["type"] == "snapshot"; });
    CHECK(last["slice"]["axis"] == 2);
    CHECK(last["slice"]["index"] == 1);
    CHECK((steps.back() - 1) % 4 == 0);
}

TEST_CASE("http endpoints") {
    Fixture fx;
    ServerOptions opt;
    opt.port = 0;
    opt.results_root = fx.dir / "runs";
    SteeringServer server(opt);
    const int port = server.start();
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(60, 0);

    auto health = cli.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);

    json body = fx.request(5).to_json();
    auto created = cli.Post("/runs", body.dump(), "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    const std::string id = json::parse(created->body)["run_id"];

    std::string stream;
    auto events = cli.Get("/runs/" + id + "/events", [&](const char* data, std::size_t n) {
        stream.append(data, n);
        return true;
    });
    REQUIRE(events);
    std::vector<json> lines;
    std::size_t pos = 0;
    while ((pos = stream.find('\n')) != std::string::npos) {
        lines.push_back(json::parse(stream.substr(0, pos)));
        stream.erase(0, pos + 1);
    }
    CHECK(count_type(lines, "snapshot") == 5);
    CHECK(lines.back()["type"] == "terminal");

    auto state = cli.Get("/runs/" + id);
    REQUIRE(state);
    CHECK(json::parse(state->body)["status"] == "completed");
    auto result = cli.Get("/runs/" + id + "/result");
    REQUIRE(result);
    CHECK(result->status == 200);
    auto field = cli.Get("/runs/" + id + "/field");
    REQUIRE(field);
    CHECK(decode_f32(json::parse(field->body)["data"]).size() == 3 * 512);

    auto rejected = cli.Post("/runs/" + id + "/control", R"({"command":"pause"})", "application/json");
    REQUIRE(rejected);
    CHECK(rejected->status == 409);
    auto bad = cli.Post("/runs", "{}", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    auto missing = cli.Get("/runs/run-999999");
    REQUIRE(missing);
    CHECK(missing->status == 404);

    json broken = fx.request(3).to_json();
    broken["checkpoint"] = (fx.dir / "missing.ckpt").string();
    auto failed = cli.Post("/runs", broken.dump(), "application/json");
    REQUIRE(failed);
    const std::string fid = json::parse(failed->body)["run_id"];
    auto fres = cli.Get("/runs/" + fid + "/result");
    REQUIRE(fres);
    CHECK(fres->status == 422);
    CHECK(json::parse(fres->body)["error"]["code"] == "checkpoint");
    server.stop();
}

#include <doctest.h>

#include <sstream>

#include "diffusereg/cli.hpp"
#include "diffusereg/data.hpp"
#include "diffusereg/io.hpp"
#include "support.hpp"

using namespace dreg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

const char* kTinyConfig = R"({
  "train": {"val_pairs": 1, "val_steps": 2, "loss": {"ssim_kernel": 3}},
  "net": {"embed_dim": 8, "depths": [1, 1], "num_heads": [2, 4], "window_size": 2, "time_embed_dim": 16}
})";

/// Synthetic 8^3 dataset plus a one-epoch tiny model, shared by the sampling tests.
struct Trained {
    testing::TempDir dir{"cli"};
    std::string data, ckpt, cfg;

    Trained() {
        cfg = (dir / "cfg.json").string();
        write_file_atomic(cfg, kTinyConfig);
        REQUIRE(cli({"synth", "-o", (dir / "data").string(), "--shape", "8", "--train", "2", "--test", "1",
                     "--amplitude", "1.5", "--seed", "3"})
                    .code == 0);
        data = (dir / "data/manifest.json").string();
        const auto r = cli({"train", "-c", cfg, "-d", data, "-o", (dir / "run").string(), "--epochs", "1", "-q"});
        REQUIRE(r.code == 0);
        ckpt = (dir / "run/last.ckpt").string();
    }
};

}  // namespace

TEST_CASE("usage errors exit with code 1") {
    CHECK(cli({}).code == exit_usage);
    CHECK(cli({"frobnicate"}).code == exit_usage);
    CHECK(cli({"eval"}).code == exit_usage);
    CHECK(cli({"synth", "-o", "x", "--shape", "4,4"}).code == exit_usage);
    CHECK(cli({"--help"}).code == exit_ok);
}

TEST_CASE("data errors exit with code 2 and name the file") {
    testing::TempDir dir("cli");
    const std::string missing = (dir / "missing.json").string();
    const auto r = cli({"eval", "-d", missing});
    CHECK(r.code == exit_data);
    CHECK(r.err.find("missing.json") != std::string::npos);
    write_file_atomic(dir / "bad.json", "{ nope");
    const auto c = cli({"-c", (dir / "bad.json").string(), "eval", "-d", missing});
    CHECK(c.code == exit_data);
    CHECK(c.err.find("bad.json") != std::string::npos);
}

TEST_CASE("eval of the identity field on identical masks reports Dice 1") {
    testing::TempDir dir("cli");
    RegistrationSample s;
    s.id = "same";
    const Shape3 sh{6, 6, 6};
    s.fixed.shape = s.moving.shape = sh;
    s.fixed.data.resize(sh.size());
    SegMask m(sh);
    m.label_ids = {1, 2};
    for (int z = 1; z < 5; ++z)
        for (int y = 1; y < 4; ++y)
            for (int x = 2; x < 5; ++x) m.at(z, y, x) = 1 + (z > 2);
    for (std::size_t i = 0; i < sh.size(); ++i) s.fixed.data[i] = 0.3 * m.labels[i];
    s.moving.data = s.fixed.data;
    s.fixed_mask = s.moving_mask = m;
    DatasetManifest man;
    write_sample(dir.path(), s, man);
    save_manifest(dir.path(), man);

    const std::string out = (dir / "metrics.json").string();
    const auto r = cli({"eval", "-d", (dir / "manifest.json").string(), "--field", "identity", "--ssim-kernel", "3",
                        "-o", out});
    REQUIRE(r.code == exit_ok);
    const json doc = json::parse(read_file(out));
    CHECK(doc["mean"]["dice_overall"] == 1.0);
    CHECK(doc["samples"]["same"]["njd"] == 0.0);
    CHECK(doc["count"] == 1);
    CHECK(cli({"eval", "-d", (dir / "manifest.json").string(), "--field", "gt"}).code == exit_data);
}

TEST_CASE("config file values apply unless a flag overrides them") {
    testing::TempDir dir("cli");
    write_file_atomic(dir / "cfg.json", R"({"synth": {"n_train": 2, "n_test": 2, "amplitude": 1.0, "shape": "8"}})");
    const auto r = cli({"synth", "-c", (dir / "cfg.json").string(), "-o", (dir / "d").string(), "--test", "1"});
    REQUIRE(r.code == exit_ok);
    const Dataset ds(dir / "d/manifest.json");
    CHECK(ds.split("train").size() == 2);
    CHECK(ds.split("test").size() == 1);
    CHECK(ds.load(0).fixed.shape == Shape3{8, 8, 8});
    write_file_atomic(dir / "bad.json", R"({"synth": {"n_train": "many"}})");
    CHECK(cli({"synth", "-c", (dir / "bad.json").string(), "-o", (dir / "e").string()}).code == exit_usage);
}

TEST_CASE("sampling writes the trajectory and is deterministic") {
    Trained t;
    const auto out_a = t.dir / "a";
    const auto out_b = t.dir / "b";
    for (const auto& o : {out_a, out_b})
        REQUIRE(cli({"sample", "-m", t.ckpt, "-d", t.data, "-o", o.string(), "--steps", "10", "--ddim", "--seed", "7"})
                    .code == exit_ok);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(out_a)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), out_a);
        CHECK_MESSAGE(read_file(e.path()) == read_file(out_b / rel), rel.string());
        ++files;
    }
    CHECK(files > 10);

    const json summary = json::parse(read_file(out_a / "sample.json"));
    CHECK(summary["samples"][0]["steps_run"] == 10);
    std::istringstream index(read_file(out_a / "test_0/trajectory/index.jsonl"));
    int lines = 0;
    for (std::string line; std::getline(index, line);) ++lines;
    CHECK(lines == 10);

    const Dataset res(out_a / "manifest.json");
    CHECK(res.load("test_0").phi0.has_value());
    CHECK(cli({"eval", "-d", (out_a / "manifest.json").string(), "--ssim-kernel", "3"}).code == exit_ok);
}

TEST_CASE("stop-at accepts the field early") {
    Trained t;
    const auto out = t.dir / "s";
    const auto r = cli({"sample", "-m", t.ckpt, "-d", t.data, "-o", out.string(), "--steps", "10", "--ddim",
                        "--stop-at", "3", "--snapshot-every", "2"});
    REQUIRE(r.code == exit_ok);
    const json summary = json::parse(read_file(out / "sample.json"));
    CHECK(summary["samples"][0]["steps_run"] == 3);
    CHECK(summary["samples"][0]["early_stopped"] == true);
    CHECK(fs::exists(out / "test_0/trajectory/step_00001.f32"));
    CHECK_FALSE(fs::exists(out / "test_0/trajectory/step_00002.f32"));
    CHECK(fs::exists(out / "test_0/trajectory/step_00003.f32"));

    const Dataset res(out / "manifest.json");
    const auto field = res.load("test_0").phi0->disp;
    const auto last = read_f32(out / "test_0/trajectory/step_00003.f32", field.size(), std::nullopt);
    CHECK(testing::max_abs_diff(field, last) == 0.0);

    CHECK(cli({"sample", "-m", (t.dir / "none.ckpt").string(), "-d", t.data, "-o", out.string()}).code == exit_data);
    CHECK(cli({"sample", "-m", t.ckpt, "-d", t.data, "-o", out.string(), "--sample", "ghost"}).code == exit_data);
    CHECK(cli({"sample", "-m", t.ckpt, "-d", t.data, "-o", out.string(), "--steps", "0"}).code == exit_usage);
}

#include "diffusereg/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "diffusereg/checkpoint.hpp"
#include "diffusereg/data.hpp"
#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"
#include "diffusereg/io.hpp"
#include "diffusereg/metrics.hpp"
#include "diffusereg/service.hpp"
#include "diffusereg/trainer.hpp"

namespace dreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::atomic<bool> g_interrupt{false};

extern "C" void on_signal(int) { g_interrupt.store(true); }

Shape3 parse_shape(const std::string& text) {
    std::string s = text;
    std::replace(s.begin(), s.end(), 'x', ',');
    std::vector<int> v;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stoi(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw ArgumentError("bad shape '" + text + "'");
        }
    }
    if (v.size() == 1) v = {v[0], v[0], v[0]};
    if (v.size() != 3 || *std::min_element(v.begin(), v.end()) < 1) throw ArgumentError("bad shape '" + text + "'");
    return {v[0], v[1], v[2]};
}

json read_json_file(const fs::path& path) {
    if (!fs::exists(path)) throw DataError(path.string(), "file not found");
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw DataError(path.string(), std::string("invalid JSON: ") + e.what());
    }
}

/// Config file sections; an absent file yields empty sections.
struct ConfigFile {
    json root = json::object();

    json section(const std::string& name) const {
        if (!root.contains(name)) return json::object();
        if (!root[name].is_object()) throw ArgumentError("config: section '" + name + "' must be an object");
        return root[name];
    }
};

template <class T>
void take(const json& sec, const char* key, const CLI::Option* flag, T& dst) {
    if (flag->count() > 0 || !sec.contains(key)) return;
    try {
        dst = sec.at(key).get<T>();
    } catch (const json::exception&) {
        throw ArgumentError(std::string("config: bad value for '") + key + "'");
    }
}

std::vector<std::string> resolve_ids(const Dataset& ds, const std::vector<std::string>& ids, const std::string& split) {
    if (!ids.empty()) {
        for (const auto& id : ids) ds.index_of(id);
        return ids;
    }
    std::vector<std::size_t> idx;
    if (split == "all") {
        for (std::size_t i = 0; i < ds.size(); ++i) idx.push_back(i);
    } else if (split == "train" || split == "test") {
        idx = ds.split(split);
    } else {
        throw ArgumentError("unknown split '" + split + "'");
    }
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(ds.manifest().samples[i].id);
    if (out.empty()) throw DataError(ds.root().string(), "no samples in split '" + split + "'");
    return out;
}

DeformationField identity_field(Shape3 s) {
    DeformationField f;
    f.shape = s;
    f.disp.assign(3 * s.size(), 0.0);
    return f;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << v;
    return os.str();
}

// ---- subcommands -------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    std::string shape = "16";
    int n_train = 32;
    int n_test = 8;
    double amplitude = 5.0;
    std::uint64_t seed = 1;
    double init_error = SynthOptions{}.init_error;
    CLI::Option *o_shape, *o_train, *o_test, *o_amp, *o_seed, *o_err;
};

int cmd_synth(SynthArgs& a, const ConfigFile& cfg, std::ostream& out) {
    const json sec = cfg.section("synth");
    take(sec, "shape", a.o_shape, a.shape);
    take(sec, "n_train", a.o_train, a.n_train);
    take(sec, "n_test", a.o_test, a.n_test);
    take(sec, "amplitude", a.o_amp, a.amplitude);
    take(sec, "seed", a.o_seed, a.seed);
    take(sec, "init_error", a.o_err, a.init_error);
    if (a.n_train < 1 || a.n_test < 0) throw ArgumentError("synth: need at least one training pair");
    if (a.amplitude < 0) throw ArgumentError("synth: amplitude must be >= 0");
    SynthOptions opt;
    opt.init_error = a.init_error;
    const auto m = write_synthetic_dataset(a.out, a.n_train, a.n_test, parse_shape(a.shape), a.amplitude, a.seed, opt);
    out << "wrote " << m.samples.size() << " pairs to " << (fs::path(a.out) / "manifest.json").string() << "\n";
    return exit_ok;
}

struct IngestArgs {
    std::string pairs, out, crop, resample;
    int n_test = 0;
};

int cmd_ingest(const IngestArgs& a, std::ostream& out) {
    IngestOptions opt;
    if (!a.crop.empty()) opt.crop = parse_shape(a.crop);
    if (!a.resample.empty()) opt.resample = parse_shape(a.resample);
    opt.n_test = a.n_test;
    if (opt.n_test < 0) throw ArgumentError("ingest: n-test must be >= 0");
    const auto m = ingest_pairs(a.pairs, a.out, opt);
    out << "ingested " << m.samples.size() << " pairs";
    if (!m.stats) out << " (field statistics unavailable)";
    out << "\n";
    return exit_ok;
}

struct TrainArgs {
    std::string data, out;
    int epochs = 0, batch = 0, val_every = 0, val_pairs = 0, val_steps = 0, ckpt_every = 0;
    double lr = 0, grad_clip = 0, time_budget = 0;
    std::uint64_t seed = 0;
    bool flip = false, fresh = false, quiet = false;
    bool no_phi0 = false, no_time = false, no_mask = false, no_aux = false;
    CLI::Option *o_epochs, *o_batch, *o_val_every, *o_val_pairs, *o_val_steps, *o_ckpt_every, *o_lr, *o_clip,
        *o_budget, *o_seed;
};

int cmd_train(const TrainArgs& a, const ConfigFile& cfg, std::ostream& out) {
    TrainConfig tc = TrainConfig::from_json(cfg.section("train"));
    DenoiserConfig net;
    try {
        net = DenoiserConfig::from_json(cfg.section("net"));
    } catch (const json::exception& e) {
        throw ArgumentError(std::string("config: bad network section: ") + e.what());
    }
    if (a.o_epochs->count()) tc.max_epochs = a.epochs;
    if (a.o_batch->count()) tc.batch_size = a.batch;
    if (a.o_val_every->count()) tc.validate_every = a.val_every;
    if (a.o_val_pairs->count()) tc.val_pairs = a.val_pairs;
    if (a.o_val_steps->count()) tc.val_steps = a.val_steps;
    if (a.o_ckpt_every->count()) tc.checkpoint_every = a.ckpt_every;
    if (a.o_lr->count()) tc.lr = a.lr;
    if (a.o_clip->count()) tc.grad_clip = a.grad_clip;
    if (a.o_budget->count()) tc.time_budget_s = a.time_budget;
    if (a.o_seed->count()) tc.seed = a.seed;
    if (a.flip) tc.flip_augment = true;
    if (a.no_phi0) tc.ablations.use_phi0 = false;
    if (a.no_time) tc.ablations.time_resblocks = false;
    if (a.no_mask) tc.ablations.condition_mask = false;
    if (a.no_aux) tc.ablations.aux_losses = false;
    tc.validate();

    const Dataset ds(a.data);
    TrainOptions opt;
    opt.resume = !a.fresh;
    opt.stop_flag = &g_interrupt;
    const bool quiet = a.quiet;
    opt.on_event = [&out, quiet](const json& e) {
        if (quiet || e.value("type", "") == "step") return;
        out << e.dump() << "\n";
        out.flush();
    };
    const TrainSummary s = train(ds, tc, net, a.out, opt);
    json summary{{"epochs_done", s.epochs_done},
                 {"steps", s.steps},
                 {"best_metric", s.best_metric},
                 {"best_epoch", s.best_epoch},
                 {"resumed", s.resumed},
                 {"budget_exhausted", s.budget_exhausted},
                 {"interrupted", s.interrupted},
                 {"last_checkpoint", s.last_checkpoint.string()},
                 {"best_checkpoint", s.best_checkpoint.string()}};
    out << summary.dump() << "\n";
    return s.interrupted ? exit_runtime : exit_ok;
}

struct SampleArgs {
    std::string checkpoint, data, out, split = "test", sampler = "ddpm";
    std::vector<std::string> ids;
    int steps = kDefaultTrainSteps;
    int stop_at = 0;
    int snapshot_every = 1;
    double eta = 0.0;
    std::uint64_t seed = 0;
    bool ddim = false;
    CLI::Option *o_steps, *o_stop, *o_snap, *o_eta, *o_seed, *o_split, *o_sampler;
};

int cmd_sample(SampleArgs& a, const ConfigFile& cfg, std::ostream& out) {
    const json sec = cfg.section("sample");
    take(sec, "steps", a.o_steps, a.steps);
    take(sec, "stop_at", a.o_stop, a.stop_at);
    take(sec, "snapshot_every", a.o_snap, a.snapshot_every);
    take(sec, "eta", a.o_eta, a.eta);
    take(sec, "seed", a.o_seed, a.seed);
    take(sec, "split", a.o_split, a.split);
    take(sec, "sampler", a.o_sampler, a.sampler);
    if (a.ddim) a.sampler = "ddim";
    if (a.sampler != "ddpm" && a.sampler != "ddim") throw ArgumentError("sample: sampler must be ddpm or ddim");
    if (a.stop_at < 0) throw ArgumentError("sample: stop-at must be >= 0");
    if (a.snapshot_every < 0) throw ArgumentError("sample: snapshot-every must be >= 0");

    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const Denoiser model = denoiser_from(ck);
    const NoiseSchedule sched = ck.schedule.make();
    const Dataset ds(a.data);
    const auto ids = resolve_ids(ds, a.ids, a.split);

    SamplerConfig sc;
    sc.kind = a.sampler == "ddim" ? SamplerKind::ddim : SamplerKind::ddpm;
    sc.num_steps = a.steps;
    sc.eta = a.eta;
    sc.validate(sched);

    const fs::path root(a.out);
    fs::create_directories(root);
    DatasetManifest manifest;
    manifest.stats = ck.stats;
    json runs = json::array();
    for (std::size_t n = 0; n < ids.size(); ++n) {
        RegistrationSample s = ds.load(ids[n]);
        sc.seed = a.seed + n;
        const fs::path traj = root / s.id / "trajectory";
        fs::create_directories(traj);
        std::string index;
        auto on_step = [&](const TrajectorySnapshot& snap) {
            const int step = snap.step_index + 1;
            const bool stop = a.stop_at > 0 && step >= a.stop_at;
            const bool last = step == snap.total_steps;
            if (a.snapshot_every > 0 && (snap.step_index % a.snapshot_every == 0 || stop || last)) {
                char name[32];
                std::snprintf(name, sizeof name, "step_%05d.f32", step);
                const DeformationField phys = denormalize_field(snap.phi0_hat, ck.stats);
                const auto crc = write_f32(traj / name, phys.disp);
                json line{{"v", kProtocolVersion}, {"step", step},          {"t", snap.t},
                          {"alpha_bar", snap.alpha_bar},               {"residual_noise", residual_noise(snap)},
                          {"file", name},                              {"crc32", crc}};
                index += line.dump() + "\n";
            }
            return stop ? StepAction::stop : StepAction::proceed;
        };
        const SampleResult r = sample(model.predictor(), s.fixed, s.moving, sc, sched, ck.stats, on_step);
        write_file_atomic(traj / "index.jsonl", index);

        RegistrationEvalInputs in;
        in.fixed = &s.fixed;
        in.moving = &s.moving;
        in.field = &r.field;
        if (s.fixed_mask && s.moving_mask) {
            in.fixed_mask = &*s.fixed_mask;
            in.moving_mask = &*s.moving_mask;
        }
        const MetricsReport rep = evaluate_registration(in);
        s.phi0 = r.field;
        write_sample(root, s, manifest);
        manifest.test.push_back(s.id);
        runs.push_back({{"id", s.id},
                        {"seed", sc.seed},
                        {"steps_run", r.steps_run},
                        {"early_stopped", r.early_stopped},
                        {"last_t", r.last_t},
                        {"metrics", rep.to_json()}});
        out << s.id << ": " << r.steps_run << " steps";
        if (rep.has("dice_overall")) out << ", dice " << fmt(rep.get("dice_overall"));
        out << ", njd " << fmt(rep.get("njd")) << "%\n";
    }
    save_manifest(root, manifest);
    const json summary{{"v", kProtocolVersion},
                       {"checkpoint", fs::absolute(a.checkpoint).string()},
                       {"sampler", {{"kind", a.sampler}, {"steps", a.steps}, {"eta", a.eta}, {"seed", a.seed}}},
                       {"stop_at", a.stop_at},
                       {"samples", runs}};
    write_file_atomic(root / "sample.json", summary.dump(2));
    return exit_ok;
}

struct EvalArgs {
    std::string data, out, field = "phi0", split = "all";
    std::vector<std::string> ids;
    int ssim_kernel = 9;
    CLI::Option *o_kernel, *o_field, *o_split;
};

int cmd_eval(EvalArgs& a, const ConfigFile& cfg, std::ostream& out) {
    const json sec = cfg.section("eval");
    take(sec, "ssim_kernel", a.o_kernel, a.ssim_kernel);
    take(sec, "field", a.o_field, a.field);
    take(sec, "split", a.o_split, a.split);
    if (a.field != "phi0" && a.field != "identity" && a.field != "gt")
        throw ArgumentError("eval: field must be phi0, identity or gt");
    if (a.ssim_kernel < 3 || a.ssim_kernel % 2 == 0) throw ArgumentError("eval: ssim kernel must be odd and >= 3");

    const Dataset ds(a.data);
    const auto ids = resolve_ids(ds, a.ids, a.split);
    std::vector<MetricsReport> reps, base;
    json per = json::object();
    for (const auto& id : ids) {
        const RegistrationSample s = ds.load(id);
        const DeformationField ident = identity_field(s.fixed.shape);
        const DeformationField* field = &ident;
        if (a.field == "phi0") {
            if (!s.phi0) throw DataError(id, "sample has no phi0 field");
            field = &*s.phi0;
        } else if (a.field == "gt") {
            if (!s.phi_gt) throw DataError(id, "sample has no ground-truth field");
            field = &*s.phi_gt;
        }
        RegistrationEvalInputs in;
        in.fixed = &s.fixed;
        in.moving = &s.moving;
        in.field = field;
        in.ssim_kernel = a.ssim_kernel;
        if (s.fixed_mask && s.moving_mask) {
            in.fixed_mask = &*s.fixed_mask;
            in.moving_mask = &*s.moving_mask;
        }
        reps.push_back(evaluate_registration(in));
        in.field = &ident;
        base.push_back(evaluate_registration(in));
        per[id] = reps.back().to_json();
    }
    const MetricsReport mean = average_reports(reps);
    const MetricsReport baseline = average_reports(base);
    const json doc{{"v", kMetricsSchemaVersion},
                   {"dataset", fs::absolute(a.data).string()},
                   {"field", a.field},
                   {"count", ids.size()},
                   {"mean", mean.to_json()},
                   {"identity", baseline.to_json()},
                   {"samples", per}};
    if (!a.out.empty()) write_file_atomic(a.out, doc.dump(2));

    out << std::left << std::setw(16) << "metric" << std::setw(12) << a.field << "identity\n";
    for (const auto& [k, v] : mean.values) {
        out << std::setw(16) << k << std::setw(12) << fmt(v);
        out << (baseline.has(k) ? fmt(baseline.get(k)) : "-") << "\n";
    }
    return exit_ok;
}

struct ServeArgs {
    std::string host = "127.0.0.1", results = "runs";
    int port = 8080, slots = 1;
    CLI::Option *o_host, *o_port, *o_results, *o_slots;
};

int cmd_serve(ServeArgs& a, const ConfigFile& cfg, std::ostream& out) {
    const json sec = cfg.section("serve");
    take(sec, "host", a.o_host, a.host);
    take(sec, "port", a.o_port, a.port);
    take(sec, "results", a.o_results, a.results);
    take(sec, "slots", a.o_slots, a.slots);
    if (a.port < 0 || a.port > 65535) throw ArgumentError("serve: bad port");
    if (a.slots < 1) throw ArgumentError("serve: slots must be >= 1");
    ServerOptions opt;
    opt.host = a.host;
    opt.port = a.port;
    opt.results_root = a.results;
    opt.slots = a.slots;
    SteeringServer server(opt);
    const int port = server.start();
    out << "listening on " << a.host << ":" << port << "\n";
    out.flush();
    while (!g_interrupt.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    return exit_ok;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Diffusion-based deformable image registration"};
    app.name("diffusereg");
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    app.add_option("-c,--config", config_path, "JSON config file; flags override its values");

    SynthArgs sy;
    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset with known deformations");
    synth->add_option("-o,--out", sy.out, "Output directory")->required();
    sy.o_shape = synth->add_option("--shape", sy.shape, "Grid shape: N or D,H,W");
    sy.o_train = synth->add_option("--train", sy.n_train, "Training pairs");
    sy.o_test = synth->add_option("--test", sy.n_test, "Held-out pairs");
    sy.o_amp = synth->add_option("--amplitude", sy.amplitude, "Largest displacement in voxels");
    sy.o_seed = synth->add_option("--seed", sy.seed);
    sy.o_err = synth->add_option("--init-error", sy.init_error, "Initial field error relative to amplitude");

    IngestArgs in;
    auto* ingest = app.add_subcommand("ingest", "Convert NIfTI pairs listed in a CSV into a dataset");
    ingest->add_option("pairs", in.pairs, "CSV: id,fixed,moving[,fixed_mask,moving_mask[,phi0]]")->required();
    ingest->add_option("-o,--out", in.out, "Output directory")->required();
    ingest->add_option("--crop", in.crop, "Centre crop D,H,W");
    ingest->add_option("--resample", in.resample, "Resample to D,H,W");
    ingest->add_option("--n-test", in.n_test, "Last n pairs form the test split");

    TrainArgs tr;
    auto* trainc = app.add_subcommand("train", "Train a denoiser");
    trainc->add_option("-d,--data", tr.data, "Dataset manifest")->required();
    trainc->add_option("-o,--out", tr.out, "Run directory")->required();
    tr.o_epochs = trainc->add_option("--epochs", tr.epochs);
    tr.o_batch = trainc->add_option("--batch", tr.batch);
    tr.o_lr = trainc->add_option("--lr", tr.lr);
    tr.o_seed = trainc->add_option("--seed", tr.seed);
    tr.o_val_every = trainc->add_option("--val-every", tr.val_every, "Epochs between validations; 0 disables");
    tr.o_val_pairs = trainc->add_option("--val-pairs", tr.val_pairs);
    tr.o_val_steps = trainc->add_option("--val-steps", tr.val_steps);
    tr.o_ckpt_every = trainc->add_option("--checkpoint-every", tr.ckpt_every);
    tr.o_clip = trainc->add_option("--grad-clip", tr.grad_clip, "Global gradient norm limit; 0 disables");
    tr.o_budget = trainc->add_option("--time-budget", tr.time_budget, "Wall-clock limit in seconds");
    trainc->add_flag("--flip", tr.flip, "Random axis flips");
    trainc->add_flag("--fresh", tr.fresh, "Ignore an existing last.ckpt");
    trainc->add_flag("-q,--quiet", tr.quiet);
    trainc->add_flag("--no-phi0", tr.no_phi0, "Train on zero initial fields");
    trainc->add_flag("--no-time-resblocks", tr.no_time);
    trainc->add_flag("--no-condition-mask", tr.no_mask);
    trainc->add_flag("--no-aux", tr.no_aux, "Disable the similarity and smoothness losses");

    SampleArgs sa;
    auto* samplec = app.add_subcommand("sample", "Register pairs by reverse diffusion");
    samplec->add_option("-m,--checkpoint", sa.checkpoint)->required();
    samplec->add_option("-d,--data", sa.data, "Dataset manifest")->required();
    samplec->add_option("-o,--out", sa.out, "Output directory")->required();
    samplec->add_option("--sample", sa.ids, "Sample id (repeatable)");
    sa.o_split = samplec->add_option("--split", sa.split, "Split used when no --sample is given");
    sa.o_steps = samplec->add_option("--steps", sa.steps);
    samplec->add_flag("--ddim", sa.ddim, "Use the DDIM sampler");
    sa.o_sampler = samplec->add_option("--sampler", sa.sampler, "ddpm or ddim");
    sa.o_eta = samplec->add_option("--eta", sa.eta, "DDIM stochasticity");
    sa.o_stop = samplec->add_option("--stop-at", sa.stop_at, "Accept the predicted field after this many steps");
    sa.o_seed = samplec->add_option("--seed", sa.seed);
    sa.o_snap = samplec->add_option("--snapshot-every", sa.snapshot_every, "Steps between saved snapshots; 0 disables");

    EvalArgs ev;
    auto* evalc = app.add_subcommand("eval", "Compute Dice, NJD, JSD and SSIM");
    evalc->add_option("-d,--data", ev.data, "Dataset manifest")->required();
    evalc->add_option("-o,--out", ev.out, "Metrics file");
    ev.o_field = evalc->add_option("--field", ev.field, "phi0, identity or gt");
    ev.o_split = evalc->add_option("--split", ev.split, "all, train or test");
    evalc->add_option("--sample", ev.ids, "Sample id (repeatable)");
    ev.o_kernel = evalc->add_option("--ssim-kernel", ev.ssim_kernel);

    ServeArgs sv;
    auto* serve = app.add_subcommand("serve", "Run the steering server");
    sv.o_host = serve->add_option("--host", sv.host);
    sv.o_port = serve->add_option("--port", sv.port, "0 picks a free port");
    sv.o_results = serve->add_option("--results", sv.results, "Directory for run results");
    sv.o_slots = serve->add_option("--slots", sv.slots, "Concurrent runs");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_usage;
    }

    g_interrupt.store(false);
    auto prev_int = std::signal(SIGINT, on_signal);
    auto prev_term = std::signal(SIGTERM, on_signal);
    int code = exit_ok;
    try {
        ConfigFile cfg;
        if (!config_path.empty()) {
            cfg.root = read_json_file(config_path);
            if (!cfg.root.is_object()) throw DataError(config_path, "config must be a JSON object");
        }
        if (*synth) code = cmd_synth(sy, cfg, out);
        else if (*ingest) code = cmd_ingest(in, out);
        else if (*trainc) code = cmd_train(tr, cfg, out);
        else if (*samplec) code = cmd_sample(sa, cfg, out);
        else if (*evalc) code = cmd_eval(ev, cfg, out);
        else if (*serve) code = cmd_serve(sv, cfg, out);
    } catch (const ArgumentError& e) {
        err << "error: " << e.what() << "\n";
        code = exit_usage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        code = exit_data;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        code = exit_runtime;
    }
    std::signal(SIGINT, prev_int);
    std::signal(SIGTERM, prev_term);
    return code;
}

}  // namespace dreg

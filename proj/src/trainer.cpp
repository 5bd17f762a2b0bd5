#include "diffusereg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "diffusereg/errors.hpp"
#include "diffusereg/fields.hpp"
#include "diffusereg/io.hpp"
#include "diffusereg/metrics.hpp"

namespace fs = std::filesystem;

namespace dreg {

void TrainConfig::validate() const {
    if (max_epochs < 0) throw ArgumentError("max_epochs must be >= 0");
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ArgumentError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw ArgumentError("weight_decay must be >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw ArgumentError("Adam betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ArgumentError("adam_eps must be positive");
    if (checkpoint_every < 1) throw ArgumentError("checkpoint_every must be >= 1");
    if (validate_every < 0 || val_pairs < 0 || keep_every < 0) throw ArgumentError("negative validation settings");
    if (val_steps < 1) throw ArgumentError("val_steps must be >= 1");
    if (!(grad_clip >= 0.0) || !(time_budget_s >= 0.0)) throw ArgumentError("grad_clip and time_budget_s must be >= 0");
    loss.validate();
}

nlohmann::json TrainConfig::to_json() const {
    return {{"max_epochs", max_epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"seed", seed},
            {"ablations",
             {{"use_phi0", ablations.use_phi0},
              {"time_resblocks", ablations.time_resblocks},
              {"condition_mask", ablations.condition_mask},
              {"aux_losses", ablations.aux_losses}}},
            {"loss", {{"lambda1", loss.lambda1}, {"lambda2", loss.lambda2}, {"ssim_kernel", loss.ssim_kernel}}},
            {"checkpoint_every", checkpoint_every},
            {"validate_every", validate_every},
            {"val_pairs", val_pairs},
            {"val_steps", val_steps},
            {"keep_every", keep_every},
            {"grad_clip", grad_clip},
            {"flip_augment", flip_augment},
            {"time_budget_s", time_budget_s}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
        c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.seed = j.value("seed", c.seed);
        if (j.contains("ablations")) {
            const auto& a = j["ablations"];
            c.ablations.use_phi0 = a.value("use_phi0", c.ablations.use_phi0);
            c.ablations.time_resblocks = a.value("time_resblocks", c.ablations.time_resblocks);
            c.ablations.condition_mask = a.value("condition_mask", c.ablations.condition_mask);
            c.ablations.aux_losses = a.value("aux_losses", c.ablations.aux_losses);
        }
        if (j.contains("loss")) {
            const auto& l = j["loss"];
            c.loss.lambda1 = l.value("lambda1", c.loss.lambda1);
            c.loss.lambda2 = l.value("lambda2", c.loss.lambda2);
            c.loss.ssim_kernel = l.value("ssim_kernel", c.loss.ssim_kernel);
        }
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.validate_every = j.value("validate_every", c.validate_every);
        c.val_pairs = j.value("val_pairs", c.val_pairs);
        c.val_steps = j.value("val_steps", c.val_steps);
        c.keep_every = j.value("keep_every", c.keep_every);
        c.grad_clip = j.value("grad_clip", c.grad_clip);
        c.flip_augment = j.value("flip_augment", c.flip_augment);
        c.time_budget_s = j.value("time_budget_s", c.time_budget_s);
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

double cosine_lr(double base, int epoch, int max_epochs) {
    if (max_epochs <= 0) return base;
    return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / max_epochs));
}

AdamW::AdamW(const TrainConfig& cfg)
    : beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {}

void AdamW::step(DenoiserParams& params, double lr) {
    ++state_.step;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
    for (auto& [name, p] : params.tensors()) {
        auto& m = state_.m[name];
        auto& v = state_.v[name];
        if (m.size() != p.size()) {
            m.assign(p.size(), 0.0);
            v.assign(p.size(), 0.0);
        }
        auto& w = p.mutable_value();
        const auto& g = p.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] -= lr * weight_decay_ * w[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

RegistrationSample flip_sample(const RegistrationSample& s, int axis) {
    if (axis < 0 || axis > 2) throw ArgumentError("flip axis must be 0, 1 or 2");
    const Shape3 sh = s.fixed.shape;
    auto src = [&](int z, int y, int x) {
        int p[3] = {z, y, x};
        p[axis] = sh[axis] - 1 - p[axis];
        return sh.index(p[0], p[1], p[2]);
    };
    RegistrationSample out = s;
    for (int z = 0; z < sh.d; ++z)
        for (int y = 0; y < sh.h; ++y)
            for (int x = 0; x < sh.w; ++x) {
                const std::size_t i = sh.index(z, y, x), j = src(z, y, x);
                out.fixed.data[i] = s.fixed.data[j];
                out.moving.data[i] = s.moving.data[j];
                if (s.fixed_mask) out.fixed_mask->labels[i] = s.fixed_mask->labels[j];
                if (s.moving_mask) out.moving_mask->labels[i] = s.moving_mask->labels[j];
                for (int c = 0; c < 3; ++c) {
                    const double sign = c == axis ? -1.0 : 1.0;
                    if (s.phi0) out.phi0->channel(c)[i] = sign * s.phi0->channel(c)[j];
                    if (s.phi_gt) out.phi_gt->channel(c)[i] = sign * s.phi_gt->channel(c)[j];
                }
            }
    return out;
}

DenoiserConfig apply_ablations(DenoiserConfig net, const Ablations& ab) {
    net.time_resblocks = ab.time_resblocks;
    if (!ab.condition_mask) net.mask_mode = MaskMode::none;
    return net;
}

StepLoss train_step(const std::vector<const RegistrationSample*>& batch, const TrainForward& model,
                    DenoiserParams* params, AdamW* opt, const NoiseSchedule& sched, const FieldStats& stats,
                    const TrainConfig& cfg, double lr, Rng& rng) {
    if (batch.empty()) throw ArgumentError("train_step: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    StepLoss out;
    for (const RegistrationSample* raw : batch) {
        RegistrationSample flipped;
        const RegistrationSample* s = raw;
        if (cfg.flip_augment) {
            const int bits = rng.uniform_int(0, 7);
            if (bits != 0) {
                flipped = *raw;
                for (int a = 0; a < 3; ++a)
                    if (bits & (1 << a)) flipped = flip_sample(flipped, a);
                s = &flipped;
            }
        }
        const Shape3 shape = s->fixed.shape;
        DeformationField phi0n;
        if (cfg.ablations.use_phi0) {
            if (!s->phi0) throw DataError(s->id, "training with use_phi0 needs a phi0 field");
            phi0n = normalize_field(*s->phi0, stats);
        } else {
            phi0n = normalize_field(DeformationField(shape), stats);
        }
        const int t = rng.uniform_int(1, sched.steps);
        const DeformationField eps = random_normal_field(shape, rng, true);
        const DeformationField phi_t = q_sample(phi0n, t, eps, sched);

        const ad::Tensor eps_hat = model(s->fixed, s->moving, phi_t, t);
        LossInputs in{&s->fixed, &s->moving, &phi_t, &eps, t, &sched, &stats};
        LossBreakdown lb = loss_total(eps_hat, in, cfg.loss, cfg.ablations.aux_losses);
        if (!std::isfinite(lb.total_value)) {
            nlohmann::json diag{{"sample", s->id}, {"t", t}, {"loss", std::to_string(lb.total_value)},
                                {"diffuse", std::to_string(lb.diffuse)}, {"sim", std::to_string(lb.sim)},
                                {"reg", std::to_string(lb.reg)},
                                {"params_finite", params ? params->all_finite() : true}};
            if (params) params->zero_grad();
            throw TrainingError("non-finite loss: " + diag.dump());
        }
        if (params && opt) ad::backward(batch.size() == 1 ? lb.total : ad::affine(lb.total, inv_b));
        out.t = t;
        out.total += lb.total_value * inv_b;
        out.diffuse += lb.diffuse * inv_b;
        out.sim += lb.sim * inv_b;
        out.reg += lb.reg * inv_b;
    }
    if (params && opt) {
        double sq = 0.0;
        for (auto& [name, p] : params->tensors())
            for (double g : p.grad()) sq += g * g;
        out.grad_norm = std::sqrt(sq);
        if (!std::isfinite(out.grad_norm)) {
            params->zero_grad();
            throw TrainingError("non-finite gradient: " +
                                nlohmann::json{{"sample", batch.front()->id}, {"t", out.t}, {"loss", out.total}}.dump());
        }
        if (cfg.grad_clip > 0.0 && out.grad_norm > cfg.grad_clip) {
            const double scale = cfg.grad_clip / out.grad_norm;
            for (auto& [name, p] : params->tensors())
                for (double& g : p.mutable_grad()) g *= scale;
        }
        opt->step(*params, lr);
        params->zero_grad();
    }
    return out;
}

double validation_score(const Denoiser& model, const std::vector<RegistrationSample>& pairs, int steps,
                        const NoiseSchedule& sched, const FieldStats& stats, std::uint64_t seed) {
    if (pairs.empty()) return -1.0;
    SamplerConfig sc;
    sc.kind = SamplerKind::ddim;
    sc.num_steps = steps;
    sc.eta = 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        sc.seed = seed + i;
        const SampleResult r = sample(model.predictor(), p.fixed, p.moving, sc, sched, stats);
        if (p.fixed_mask && p.moving_mask) {
            const SegMask warped = warp_mask(*p.moving_mask, r.field);
            acc += dice_overall(warped, *p.fixed_mask, p.fixed_mask->label_ids);
        } else {
            acc += ssim3d(p.fixed, warp(p.moving, r.field), std::min(9, p.fixed.shape.min_edge() | 1));
        }
    }
    return acc / static_cast<double>(pairs.size());
}

namespace {

/// Settings that may change between an interrupted run and its resumption.
nlohmann::json resume_key(const TrainConfig& c) {
    nlohmann::json j = c.to_json();
    for (const char* k : {"checkpoint_every", "validate_every", "keep_every", "time_budget_s"}) j.erase(k);
    return j;
}

class JsonlLog {
public:
    explicit JsonlLog(const fs::path& p) : out_(p, std::ios::app) {
        if (!out_) throw DataError(p.string(), "cannot open training log");
    }
    void write(const nlohmann::json& j) {
        out_ << j.dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

}  // namespace

TrainSummary train(const Dataset& ds, const TrainConfig& cfg, const DenoiserConfig& net_in, const fs::path& out_dir,
                   const TrainOptions& opt) {
    cfg.validate();
    const DenoiserConfig net = apply_ablations(net_in, cfg.ablations);
    net.validate();
    fs::create_directories(out_dir);
    const auto start = std::chrono::steady_clock::now();
    const ScheduleMeta schedule_meta;
    const NoiseSchedule sched = schedule_meta.make();
    const FieldStats stats = ds.manifest().stats.value_or(FieldStats::acdc());

    std::vector<RegistrationSample> train_set, val_set;
    for (std::size_t i : ds.split("train")) train_set.push_back(ds.load(i));
    if (train_set.empty() && cfg.max_epochs > 0) throw DataError(ds.root().string(), "training split is empty");
    {
        auto val_idx = ds.split("test");
        if (val_idx.empty()) val_idx = ds.split("train");
        for (std::size_t k = 0; k < val_idx.size() && static_cast<int>(k) < cfg.val_pairs; ++k)
            val_set.push_back(ds.load(val_idx[k]));
    }
    for (const auto& s : train_set)
        if (s.fixed.shape.min_edge() < 2) throw DataError(s.id, "volume too small to train on");

    const fs::path last_path = out_dir / "last.ckpt", best_path = out_dir / "best.ckpt";
    TrainSummary summary;
    summary.last_checkpoint = last_path;

    std::unique_ptr<Denoiser> model;
    AdamW adam(cfg);
    Rng rng(cfg.seed);
    TrainState state;
    if (opt.resume && fs::exists(last_path)) {
        Checkpoint ck = load_checkpoint(last_path);
        if (!ck.train) throw DataError(last_path.string(), "checkpoint carries no training state");
        if (resume_key(TrainConfig::from_json(ck.train->train_config)) != resume_key(cfg))
            throw ArgumentError("cannot resume " + last_path.string() + ": training configuration differs");
        if (ck.config.to_json() != net.to_json())
            throw ArgumentError("cannot resume " + last_path.string() + ": network configuration differs");
        state = *ck.train;
        adam.state() = state.adam;
        rng.restore(state.rng_state);
        model = std::make_unique<Denoiser>(ck.config, std::move(ck.params));
        summary.resumed = true;
    } else {
        model = std::make_unique<Denoiser>(net, cfg.seed);
        state.rng_state = rng.state();
    }
    JsonlLog log(out_dir / "train_log.jsonl");
    auto emit = [&](nlohmann::json j) {
        j["v"] = 1;
        log.write(j);
        if (opt.on_event) opt.on_event(j);
    };

    auto make_ckpt = [&](bool with_state) {
        Checkpoint ck;
        ck.config = model->config();
        ck.params = model->params().clone();
        ck.schedule = schedule_meta;
        ck.stats = stats;
        ck.meta = {{"epochs_done", state.epochs_done}, {"global_step", state.global_step}};
        if (with_state) {
            state.rng_state = rng.state();
            state.train_config = cfg.to_json();
            state.adam = adam.state();
            ck.train = state;
        }
        return ck;
    };
    auto save_last = [&] {
        save_checkpoint(last_path, make_ckpt(true));
        emit({{"type", "checkpoint"}, {"epoch", state.epochs_done}, {"path", last_path.string()}});
    };

    if (!summary.resumed) save_last();

    const TrainForward forward = [&](const Volume& f, const Volume& m, const DeformationField& phi_t, int t) {
        return model->forward(f, m, phi_t, t);
    };
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

    std::vector<std::size_t> order(train_set.size());
    while (state.epochs_done < cfg.max_epochs) {
        const int epoch = state.epochs_done;
        const double lr = cosine_lr(cfg.lr, epoch, cfg.max_epochs);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<const RegistrationSample*> batch;
            for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) batch.push_back(&train_set[order[k]]);
            StepLoss sl;
            try {
                sl = train_step(batch, forward, &model->params(), &adam, sched, stats, cfg, lr, rng);
            } catch (const TrainingError& e) {
                write_file_atomic(out_dir / "nan_diagnostic.json",
                                  nlohmann::json{{"epoch", epoch}, {"step", state.global_step}, {"error", e.what()}}.dump(2));
                throw;
            }
            ++state.global_step;
            emit({{"type", "step"}, {"epoch", epoch}, {"step", state.global_step}, {"t", sl.t}, {"lr", lr},
                  {"loss", sl.total}, {"diffuse", sl.diffuse}, {"sim", sl.sim}, {"reg", sl.reg},
                  {"grad_norm", sl.grad_norm}, {"sample", batch.front()->id}});
        }
        state.epochs_done = epoch + 1;

        const bool last_epoch = state.epochs_done == cfg.max_epochs;
        const bool out_of_time = cfg.time_budget_s > 0.0 && elapsed() >= cfg.time_budget_s;
        const bool stop_requested = (opt.stop_flag && opt.stop_flag->load()) ||
                                    (opt.stop_after_epochs >= 0 && state.epochs_done >= opt.stop_after_epochs);
        const bool final_pass = last_epoch || out_of_time || stop_requested;

        if (cfg.validate_every > 0 && !val_set.empty() && (state.epochs_done % cfg.validate_every == 0 || final_pass)) {
            const double score = validation_score(*model, val_set, cfg.val_steps, sched, stats, cfg.seed + 7919);
            const bool improved = score > state.best_metric;
            if (improved) {
                state.best_metric = score;
                state.best_epoch = state.epochs_done;
                save_checkpoint(best_path, make_ckpt(false));
            }
            emit({{"type", "val"}, {"epoch", state.epochs_done}, {"metric", score}, {"best", state.best_metric},
                  {"improved", improved}, {"elapsed_s", elapsed()}});
        }
        if (cfg.keep_every > 0 && state.epochs_done % cfg.keep_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%05d.ckpt", state.epochs_done);
            save_checkpoint(out_dir / name, make_ckpt(false));
        }
        if (state.epochs_done % cfg.checkpoint_every == 0 || final_pass) save_last();
        if (out_of_time && !last_epoch) {
            summary.budget_exhausted = true;
            break;
        }
        if (stop_requested && !last_epoch) {
            summary.interrupted = true;
            break;
        }
    }
    summary.epochs_done = state.epochs_done;
    summary.steps = state.global_step;
    summary.best_metric = state.best_metric;
    summary.best_epoch = state.best_epoch;
    if (fs::exists(best_path)) summary.best_checkpoint = best_path;
    return summary;
}

}  // namespace dreg

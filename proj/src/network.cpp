#include "diffusereg/network.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "diffusereg/errors.hpp"
#include "diffusereg/random.hpp"

namespace dreg {

using ad::Tensor;
using Index = std::shared_ptr<const std::vector<int>>;

std::string to_string(MaskMode m) {
    switch (m) {
        case MaskMode::colocated: return "colocated";
        case MaskMode::band: return "band";
        case MaskMode::none: return "none";
    }
    return "colocated";
}

MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "colocated") return MaskMode::colocated;
    if (s == "band") return MaskMode::band;
    if (s == "none") return MaskMode::none;
    throw ArgumentError("unknown mask mode '" + s + "' (expected colocated, band or none)");
}

void DenoiserConfig::validate() const {
    if (patch_size < 1) throw ArgumentError("patch_size must be >= 1");
    if (embed_dim < 2 || embed_dim % 2) throw ArgumentError("embed_dim must be an even number >= 2");
    if (depths.empty()) throw ArgumentError("depths must not be empty");
    if (depths.size() != num_heads.size()) throw ArgumentError("depths and num_heads must have the same length");
    for (int s = 0; s < stages(); ++s) {
        if (depths[s] < 1) throw ArgumentError("every stage needs at least one block");
        if (num_heads[s] < 1 || stage_dim(s) % num_heads[s])
            throw ArgumentError("stage " + std::to_string(s) + " width " + std::to_string(stage_dim(s)) +
                                " is not divisible by " + std::to_string(num_heads[s]) + " heads");
    }
    if (window_size < 1) throw ArgumentError("window_size must be >= 1");
    if (time_embed_dim < 2) throw ArgumentError("time_embed_dim must be >= 2");
    if (in_channels_image < 1 || in_channels_field != 3) throw ArgumentError("expected image channels >= 1 and 3 field channels");
    if (mlp_ratio < 1) throw ArgumentError("mlp_ratio must be >= 1");
}

nlohmann::json DenoiserConfig::to_json() const {
    return {{"patch_size", patch_size},
            {"embed_dim", embed_dim},
            {"depths", depths},
            {"num_heads", num_heads},
            {"window_size", window_size},
            {"time_embed_dim", time_embed_dim},
            {"in_channels_image", in_channels_image},
            {"in_channels_field", in_channels_field},
            {"mlp_ratio", mlp_ratio},
            {"shared_image_encoder", shared_image_encoder},
            {"time_resblocks", time_resblocks},
            {"mask_mode", to_string(mask_mode)}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depths = j.value("depths", c.depths);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.window_size = j.value("window_size", c.window_size);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.in_channels_image = j.value("in_channels_image", c.in_channels_image);
    c.in_channels_field = j.value("in_channels_field", c.in_channels_field);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.shared_image_encoder = j.value("shared_image_encoder", c.shared_image_encoder);
    c.time_resblocks = j.value("time_resblocks", c.time_resblocks);
    c.mask_mode = mask_mode_from_string(j.value("mask_mode", to_string(c.mask_mode)));
    c.validate();
    return c;
}

// ---- parameters ---------------------------------------------------------------

ad::Tensor& DenoiserParams::add(const std::string& name, int rows, int cols, std::vector<double> values) {
    if (tensors_.count(name)) throw StateError("duplicate parameter '" + name + "'");
    return tensors_[name] = ad::variable(rows, cols, std::move(values));
}

ad::Tensor& DenoiserParams::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw StateError("missing parameter '" + name + "'");
    return it->second;
}

const ad::Tensor& DenoiserParams::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw StateError("missing parameter '" + name + "'");
    return it->second;
}

std::size_t DenoiserParams::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [k, t] : tensors_) n += t.size();
    return n;
}

bool DenoiserParams::all_finite() const {
    for (const auto& [k, t] : tensors_)
        for (double v : t.value())
            if (!std::isfinite(v)) return false;
    return true;
}

void DenoiserParams::zero_grad() {
    for (auto& [k, t] : tensors_) t.zero_grad();
}

DenoiserParams DenoiserParams::clone() const {
    DenoiserParams p;
    for (const auto& [k, t] : tensors_) p.add(k, t.rows(), t.cols(), t.value());
    return p;
}

std::vector<double> time_embedding(int t, int dim) {
    if (dim < 2) throw ArgumentError("time embedding dimension must be >= 2");
    std::vector<double> out(dim, 0.0);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = std::sin(t * freq);
        out[half + i] = std::cos(t * freq);
    }
    return out;
}

// ---- window geometry ------------------------------------------------------------

namespace {

struct WindowGeometry {
    std::array<int, 3> grid{}, win{}, padded{}, shift{};
    int windows = 0;
    int n = 0;
    bool shifted = false;
    std::vector<int> token_of;  // windows*n -> token or -1
    std::vector<int> slot_of;   // token -> windows*n row
    std::vector<int> region;    // windows*n

    std::array<int, 3> local(int p) const { return {p / (win[1] * win[2]), (p / win[2]) % win[1], p % win[2]}; }
};

WindowGeometry make_geometry(Shape3 g, int window, bool shifted) {
    WindowGeometry geo;
    std::array<int, 3> count{};
    geo.windows = 1;
    geo.n = 1;
    for (int a = 0; a < 3; ++a) {
        geo.grid[a] = g[a];
        geo.win[a] = std::min(window, g[a]);
        geo.padded[a] = (g[a] + geo.win[a] - 1) / geo.win[a] * geo.win[a];
        geo.shift[a] = shifted && g[a] > window ? geo.win[a] / 2 : 0;
        geo.shifted = geo.shifted || geo.shift[a] > 0;
        count[a] = geo.padded[a] / geo.win[a];
        geo.windows *= count[a];
        geo.n *= geo.win[a];
    }
    const std::size_t rows = static_cast<std::size_t>(geo.windows) * geo.n;
    geo.token_of.assign(rows, -1);
    geo.region.assign(rows, 0);
    geo.slot_of.assign(g.size(), -1);
    for (int w = 0; w < geo.windows; ++w) {
        const std::array<int, 3> wc{w / (count[1] * count[2]), (w / count[2]) % count[1], w % count[2]};
        for (int p = 0; p < geo.n; ++p) {
            const auto lc = geo.local(p);
            std::array<int, 3> src{};
            bool inside = true;
            int region = 0;
            for (int a = 0; a < 3; ++a) {
                const int pos = wc[a] * geo.win[a] + lc[a];
                src[a] = (pos + geo.shift[a]) % geo.padded[a];
                inside = inside && src[a] < geo.grid[a];
                int r = 0;
                if (geo.shift[a] > 0) r = pos < geo.padded[a] - geo.win[a] ? 0 : (pos < geo.padded[a] - geo.shift[a] ? 1 : 2);
                region = region * 3 + r;
            }
            const std::size_t row = static_cast<std::size_t>(w) * geo.n + p;
            geo.region[row] = region;
            if (inside) {
                const int tok = static_cast<int>(g.index(src[0], src[1], src[2]));
                geo.token_of[row] = tok;
                geo.slot_of[tok] = static_cast<int>(row);
            }
        }
    }
    return geo;
}

int bias_span(int window) { return (2 * window - 1) * (2 * window - 1) * (2 * window - 1); }

int relative_index(const WindowGeometry& geo, int p, int q, int window) {
    const auto a = geo.local(p), b = geo.local(q);
    const int m = 2 * window - 1;
    return ((a[0] - b[0] + window - 1) * m + (a[1] - b[1] + window - 1)) * m + (a[2] - b[2] + window - 1);
}

enum Source { kTime = -1, kFixed = 0, kMoving = 1, kField = 2 };

// Sequence position -> (source, local position).
std::pair<int, int> decode(int i, int n) {
    if (i == 0) return {kTime, -1};
    return {(i - 1) / n, (i - 1) % n};
}

bool pair_allowed(int i, int j, int n, MaskMode mode, const int* region) {
    const auto [si, pi] = decode(i, n);
    const auto [sj, pj] = decode(j, n);
    if (si == kTime || sj == kTime) return true;
    if (region && region[pi] != region[pj]) return false;
    switch (mode) {
        case MaskMode::colocated: return (si == kField && sj == kField) || pi == pj;
        case MaskMode::band: return std::abs((3 * pi + si) - (3 * pj + sj)) <= 3;
        case MaskMode::none: return true;
    }
    return true;
}

ConditionAttentionMask full_mask(int n, MaskMode mode, const int* region) {
    ConditionAttentionMask m;
    m.window_tokens = n;
    const int l = m.size();
    m.allowed.assign(static_cast<std::size_t>(l) * l, 0);
    for (int i = 0; i < l; ++i)
        for (int j = 0; j < l; ++j) m.allowed[static_cast<std::size_t>(i) * l + j] = pair_allowed(i, j, n, mode, region);
    return m;
}

/// Entry r of the result (r = coarse * f^3 + child) holds the fine index of that child.
std::vector<int> space_to_depth(Shape3 fine, int f) {
    const Shape3 coarse{fine.d / f, fine.h / f, fine.w / f};
    const int f3 = f * f * f;
    std::vector<int> out(fine.size());
    for (int z = 0; z < coarse.d; ++z)
        for (int y = 0; y < coarse.h; ++y)
            for (int x = 0; x < coarse.w; ++x) {
                const std::size_t r = coarse.index(z, y, x);
                for (int k = 0; k < f3; ++k) {
                    const int dz = k / (f * f), dy = (k / f) % f, dx = k % f;
                    out[r * f3 + k] = static_cast<int>(fine.index(z * f + dz, y * f + dy, x * f + dx));
                }
            }
    return out;
}

std::vector<int> invert(const std::vector<int>& perm) {
    std::vector<int> out(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out[perm[i]] = static_cast<int>(i);
    return out;
}

Index share(std::vector<int> v) { return std::make_shared<const std::vector<int>>(std::move(v)); }

}  // namespace

struct StagePlan {
    Shape3 grid;
    WindowGeometry geo[2];
    std::shared_ptr<const ad::AttentionPlan> self_plan[2], fused_plan[2];
    Index self_index[2], fused_index[2], slot_index[2];
    Index merge_index;  // into the next stage
    Index up_index;     // depth-to-space from the next stage
};

struct ShapePlan {
    Shape3 input, padded;
    Index crop;
    Index patch_index;
    Index full_up_index;
    std::vector<StagePlan> stages;
};

ConditionAttentionMask build_condition_mask(int w, bool shifted, int grid_edge, MaskMode mode, int window_index) {
    if (w < 1) throw ArgumentError("window must be >= 1");
    if (grid_edge < 1) throw ArgumentError("grid edge must be >= 1");
    const WindowGeometry geo = make_geometry({grid_edge, grid_edge, grid_edge}, w, shifted);
    if (geo.n != w * w * w)
        throw ArgumentError("grid edge " + std::to_string(grid_edge) + " is smaller than the window " + std::to_string(w));
    const int win = window_index < 0 ? geo.windows - 1 : window_index;
    if (win >= geo.windows) throw ArgumentError("window index out of range");
    const int* region = geo.shifted ? geo.region.data() + static_cast<std::size_t>(win) * geo.n : nullptr;
    return full_mask(geo.n, mode, region);
}

// ---- single-window fused attention ---------------------------------------------

namespace {

Tensor bundle_sequence(const WindowTokenBundle& b) {
    const int n = b.window_tokens, c = b.channels;
    const std::size_t nc = static_cast<std::size_t>(n) * c;
    if (b.time_token.size() != static_cast<std::size_t>(c) || b.fixed.size() != nc || b.moving.size() != nc ||
        b.field.size() != nc)
        throw DimensionError("window token bundle: inconsistent token counts");
    std::vector<double> seq;
    seq.reserve(static_cast<std::size_t>(b.sequence_length()) * c);
    for (const auto* part : {&b.time_token, &b.fixed, &b.moving, &b.field}) seq.insert(seq.end(), part->begin(), part->end());
    return ad::constant(b.sequence_length(), c, std::move(seq));
}

std::shared_ptr<ad::AttentionPlan> single_window_plan(const WindowTokenBundle& b, const ConditionAttentionMask& mask,
                                                     int heads, int q_begin, int q_count) {
    if (mask.window_tokens != b.window_tokens) throw DimensionError("mask does not match the window size");
    if (heads < 1 || b.channels % heads) throw ArgumentError("channels must divide into heads");
    auto plan = std::make_shared<ad::AttentionPlan>();
    auto& lay = plan->layout;
    lay.windows = 1;
    lay.seq = b.sequence_length();
    lay.q_begin = q_begin;
    lay.q_count = q_count;
    lay.heads = heads;
    lay.head_dim = b.channels / heads;
    lay.scale = 1.0 / std::sqrt(static_cast<double>(lay.head_dim));
    plan->mask.assign(mask.allowed.begin() + static_cast<std::ptrdiff_t>(q_begin) * lay.seq,
                      mask.allowed.begin() + static_cast<std::ptrdiff_t>(q_begin + q_count) * lay.seq);
    return plan;
}

}  // namespace

Tensor fused_window_attention(const WindowTokenBundle& bundle, const ConditionAttentionMask& mask,
                              const FusedAttentionWeights& w) {
    const int n = bundle.window_tokens;
    auto plan = single_window_plan(bundle, mask, w.heads, 1 + 2 * n, n);
    Tensor qkv = ad::linear(bundle_sequence(bundle), w.qkv_w, w.qkv_b);
    return ad::linear(ad::window_attention(qkv, plan, {}), w.proj_w, w.proj_b);
}

std::vector<double> fused_attention_weights(const WindowTokenBundle& bundle, const ConditionAttentionMask& mask,
                                            const FusedAttentionWeights& w) {
    ad::NoGradGuard guard;
    auto plan = single_window_plan(bundle, mask, w.heads, 0, bundle.sequence_length());
    Tensor qkv = ad::linear(bundle_sequence(bundle), w.qkv_w, w.qkv_b);
    kernels::AttentionLayout lay = plan->layout;
    lay.mask = plan->mask.data();
    std::vector<double> out(static_cast<std::size_t>(lay.q_count) * lay.channels());
    std::vector<double> probs(lay.prob_count());
    kernels::window_attention_forward(lay, qkv.value().data(), out.data(), probs.data());
    return probs;
}

// ---- denoiser -------------------------------------------------------------------

Denoiser::Denoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_params(seed);
}

Denoiser::Denoiser(DenoiserConfig cfg, DenoiserParams params) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Denoiser reference(cfg_, 0);
    for (const auto& [name, t] : reference.params_.tensors()) {
        if (!params.contains(name)) throw DataError("checkpoint", "parameter '" + name + "' is missing");
        const Tensor& got = params.at(name);
        if (got.rows() != t.rows() || got.cols() != t.cols())
            throw DataError("checkpoint", "parameter '" + name + "' has the wrong shape");
    }
    if (params.tensors().size() != reference.params_.tensors().size())
        throw DataError("checkpoint", "parameter set does not match the configuration");
    params_ = std::move(params);
}

Denoiser::~Denoiser() = default;

Denoiser::Denoiser(Denoiser&& o) noexcept : cfg_(std::move(o.cfg_)), params_(std::move(o.params_)) {}

Denoiser& Denoiser::operator=(Denoiser&& o) noexcept {
    if (this != &o) {
        cfg_ = std::move(o.cfg_);
        params_ = std::move(o.params_);
        std::lock_guard lock(plan_mutex_);
        plans_.clear();
    }
    return *this;
}

void Denoiser::init_params(std::uint64_t seed) {
    Rng rng(seed);
    auto uniform = [&](std::size_t count, double bound) {
        std::vector<double> v(count);
        for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * bound;
        return v;
    };
    auto normal = [&](std::size_t count, double std) {
        std::vector<double> v(count);
        for (auto& x : v) x = rng.normal() * std;
        return v;
    };
    auto fill = [](std::size_t count, double value) { return std::vector<double>(count, value); };
    auto lin = [&](const std::string& name, int in, int out, bool bias = true) {
        params_.add(name + ".w", in, out, uniform(static_cast<std::size_t>(in) * out, 1.0 / std::sqrt(in)));
        if (bias) params_.add(name + ".b", 1, out, fill(out, 0.0));
    };
    auto norm = [&](const std::string& name, int c) {
        params_.add(name + ".g", 1, c, fill(c, 1.0));
        params_.add(name + ".b", 1, c, fill(c, 0.0));
    };
    auto conv = [&](const std::string& name, int cin, int cout) {
        params_.add(name + ".w", cout, cin * 27, uniform(static_cast<std::size_t>(cout) * cin * 27, 1.0 / std::sqrt(cin * 27.0)));
        params_.add(name + ".b", cout, 1, fill(cout, 0.0));
    };
    auto tres = [&](const std::string& name, int cin, int cout) {
        conv(name + ".conv1", cin, cout);
        conv(name + ".conv2", cout, cout);
        if (cfg_.time_resblocks) {
            params_.add(name + ".shift.w", cfg_.time_embed_dim, cout, fill(static_cast<std::size_t>(cfg_.time_embed_dim) * cout, 0.0));
            params_.add(name + ".shift.b", 1, cout, fill(cout, 0.0));
        }
        if (cin != cout)
            params_.add(name + ".skip.w", cout, cin, uniform(static_cast<std::size_t>(cout) * cin, 1.0 / std::sqrt(cin)));
    };
    const int p3 = cfg_.patch_size * cfg_.patch_size * cfg_.patch_size;
    const int last = cfg_.stages() - 1;
    const int r = bias_span(cfg_.window_size);
    auto block = [&](const std::string& name, int c, int heads, bool fused) {
        norm(name + ".ln1", c);
        if (fused) {
            norm(name + ".lnf", c);
            norm(name + ".lnm", c);
        }
        lin(name + ".qkv", c, 3 * c);
        params_.add(name + ".rpb", heads, fused ? 3 * r + 1 : r, normal(static_cast<std::size_t>(heads) * (fused ? 3 * r + 1 : r), 0.02));
        lin(name + ".proj", c, c);
        norm(name + ".ln2", c);
        lin(name + ".fc1", c, cfg_.mlp_ratio * c);
        lin(name + ".fc2", cfg_.mlp_ratio * c, c);
    };

    lin("time.fc1", cfg_.time_embed_dim, cfg_.time_embed_dim);
    lin("time.fc2", cfg_.time_embed_dim, cfg_.time_embed_dim);

    const std::vector<std::string> encoders = cfg_.shared_image_encoder ? std::vector<std::string>{"enc"}
                                                                        : std::vector<std::string>{"encf", "encm"};
    for (const auto& e : encoders) {
        lin(e + ".patch", p3 * cfg_.in_channels_image, cfg_.embed_dim);
        norm(e + ".patch_ln", cfg_.embed_dim);
        for (int s = 0; s < last; ++s) {
            const int c = cfg_.stage_dim(s);
            for (int b = 0; b < cfg_.depths[s]; ++b)
                block(e + ".s" + std::to_string(s) + ".b" + std::to_string(b), c, cfg_.num_heads[s], false);
            norm(e + ".s" + std::to_string(s) + ".merge_ln", 8 * c);
            lin(e + ".s" + std::to_string(s) + ".merge", 8 * c, 2 * c, false);
        }
    }

    lin("bb.patch", p3 * cfg_.in_channels_field, cfg_.embed_dim);
    norm("bb.patch_ln", cfg_.embed_dim);
    for (int s = 0; s <= last; ++s) {
        const int c = cfg_.stage_dim(s);
        const std::string st = "bb.s" + std::to_string(s);
        lin(st + ".time", cfg_.time_embed_dim, c);
        for (int b = 0; b < cfg_.depths[s]; ++b) block(st + ".b" + std::to_string(b), c, cfg_.num_heads[s], true);
        if (s < last) {
            norm(st + ".merge_ln", 8 * c);
            lin(st + ".merge", 8 * c, 2 * c, false);
        }
    }

    const int cf = cfg_.full_res_dim();
    tres("dec.bott", cfg_.stage_dim(last), cfg_.stage_dim(last));
    for (int k = last - 1; k >= 0; --k) {
        const std::string name = "dec.up" + std::to_string(k);
        lin(name, cfg_.stage_dim(k + 1), 8 * cfg_.stage_dim(k));
        tres(name + ".res", 2 * cfg_.stage_dim(k), cfg_.stage_dim(k));
    }
    lin("dec.full", cfg_.embed_dim, p3 * cf);
    tres("dec.in", cfg_.in_channels_field + 2 * cfg_.in_channels_image, cf);
    tres("dec.out", 2 * cf, cf);
    lin("head", cf, cfg_.in_channels_field);
}

std::shared_ptr<const ShapePlan> Denoiser::plan_for(Shape3 s) const {
    std::lock_guard lock(plan_mutex_);
    const auto key = std::make_tuple(s.d, s.h, s.w);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;

    auto plan = std::make_shared<ShapePlan>();
    const int mult = cfg_.spatial_multiple();
    auto up = [mult](int v) { return (v + mult - 1) / mult * mult; };
    plan->input = s;
    plan->padded = {up(s.d), up(s.h), up(s.w)};
    std::vector<int> crop(s.size());
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) crop[s.index(z, y, x)] = static_cast<int>(plan->padded.index(z, y, x));
    plan->crop = share(std::move(crop));
    plan->patch_index = share(space_to_depth(plan->padded, cfg_.patch_size));
    plan->full_up_index = share(invert(space_to_depth(plan->padded, cfg_.patch_size)));

    const int w = cfg_.window_size;
    const int r = bias_span(w);
    Shape3 g{plan->padded.d / cfg_.patch_size, plan->padded.h / cfg_.patch_size, plan->padded.w / cfg_.patch_size};
    for (int st = 0; st < cfg_.stages(); ++st) {
        StagePlan sp;
        sp.grid = g;
        const int heads = cfg_.num_heads[st];
        const int head_dim = cfg_.stage_dim(st) / heads;
        for (int k = 0; k < 2; ++k) {
            const WindowGeometry geo = make_geometry(g, w, k == 1);
            const int n = geo.n, l = 3 * n + 1;
            const int big_n = static_cast<int>(g.size());

            auto self = std::make_shared<ad::AttentionPlan>();
            self->layout = {geo.windows, n, 0, n, heads, head_dim, 1.0 / std::sqrt(static_cast<double>(head_dim))};
            self->layout.bias_entries = r;
            self->bias_index.resize(static_cast<std::size_t>(n) * n);
            for (int p = 0; p < n; ++p)
                for (int q = 0; q < n; ++q) self->bias_index[static_cast<std::size_t>(p) * n + q] = relative_index(geo, p, q, w);
            if (geo.shifted) {
                self->layout.mask_window_stride = static_cast<std::size_t>(n) * n;
                self->mask.resize(static_cast<std::size_t>(geo.windows) * n * n);
                for (int win = 0; win < geo.windows; ++win) {
                    const int* reg = geo.region.data() + static_cast<std::size_t>(win) * n;
                    for (int p = 0; p < n; ++p)
                        for (int q = 0; q < n; ++q)
                            self->mask[(static_cast<std::size_t>(win) * n + p) * n + q] = reg[p] == reg[q];
                }
            }

            auto fused = std::make_shared<ad::AttentionPlan>();
            fused->layout = {geo.windows, l, 1 + 2 * n, n, heads, head_dim, 1.0 / std::sqrt(static_cast<double>(head_dim))};
            fused->layout.bias_entries = 3 * r + 1;
            fused->bias_index.resize(static_cast<std::size_t>(n) * l);
            for (int p = 0; p < n; ++p)
                for (int j = 0; j < l; ++j) {
                    const auto [src, q] = decode(j, n);
                    int idx = 3 * r;
                    if (src == kField) idx = relative_index(geo, p, q, w);
                    if (src == kFixed) idx = r + relative_index(geo, p, q, w);
                    if (src == kMoving) idx = 2 * r + relative_index(geo, p, q, w);
                    fused->bias_index[static_cast<std::size_t>(p) * l + j] = idx;
                }
            const int windows_with_masks = geo.shifted ? geo.windows : 1;
            fused->layout.mask_window_stride = geo.shifted ? static_cast<std::size_t>(n) * l : 0;
            fused->mask.resize(static_cast<std::size_t>(windows_with_masks) * n * l);
            for (int win = 0; win < windows_with_masks; ++win) {
                const int* reg = geo.shifted ? geo.region.data() + static_cast<std::size_t>(win) * n : nullptr;
                for (int p = 0; p < n; ++p)
                    for (int j = 0; j < l; ++j)
                        fused->mask[(static_cast<std::size_t>(win) * n + p) * l + j] =
                            pair_allowed(1 + 2 * n + p, j, n, cfg_.mask_mode, reg);
            }

            std::vector<int> fidx(static_cast<std::size_t>(geo.windows) * l, -1);
            for (int win = 0; win < geo.windows; ++win) {
                const std::size_t base = static_cast<std::size_t>(win) * l;
                fidx[base] = 0;
                for (int p = 0; p < n; ++p) {
                    const int tok = geo.token_of[static_cast<std::size_t>(win) * n + p];
                    if (tok < 0) continue;
                    fidx[base + 1 + p] = 1 + tok;
                    fidx[base + 1 + n + p] = 1 + big_n + tok;
                    fidx[base + 1 + 2 * n + p] = 1 + 2 * big_n + tok;
                }
            }
            sp.self_plan[k] = self;
            sp.fused_plan[k] = fused;
            sp.self_index[k] = share(geo.token_of);
            sp.slot_index[k] = share(geo.slot_of);
            sp.fused_index[k] = share(std::move(fidx));
            sp.geo[k] = geo;
        }
        if (st + 1 < cfg_.stages()) {
            sp.merge_index = share(space_to_depth(g, 2));
            sp.up_index = share(invert(space_to_depth(g, 2)));
            g = {g.d / 2, g.h / 2, g.w / 2};
        }
        plan->stages.push_back(std::move(sp));
    }
    plans_.emplace(key, plan);
    return plan;
}

namespace {

struct Ops {
    const DenoiserParams& p;

    const Tensor& w(const std::string& name) const { return p.at(name); }
    Tensor lin(const Tensor& x, const std::string& name, bool bias = true) const {
        return ad::linear(x, w(name + ".w"), bias ? w(name + ".b") : Tensor{});
    }
    Tensor ln(const Tensor& x, const std::string& name) const { return ad::layer_norm(x, w(name + ".g"), w(name + ".b")); }
    Tensor mlp(const Tensor& x, const std::string& name) const {
        return lin(ad::gelu(lin(x, name + ".fc1")), name + ".fc2");
    }
};

std::vector<double> pad_channels(std::span<const double> data, int channels, Shape3 s, Shape3 padded) {
    std::vector<double> out(static_cast<std::size_t>(channels) * padded.size(), 0.0);
    for (int c = 0; c < channels; ++c)
        for (int z = 0; z < s.d; ++z)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x)
                    out[c * padded.size() + padded.index(z, y, x)] = data[c * s.size() + s.index(z, y, x)];
    return out;
}

/// Channel-first constant (C x S) -> patch tokens (N x p^3*C).
Tensor patchify(std::vector<double> channel_first, int channels, const ShapePlan& plan, int patch) {
    const int voxels = static_cast<int>(plan.padded.size());
    Tensor vol = ad::transpose(ad::constant(channels, voxels, std::move(channel_first)));
    const int p3 = patch * patch * patch;
    return ad::reshape(ad::gather_rows(vol, plan.patch_index), voxels / p3, p3 * channels);
}

Tensor merge(const Ops& o, const Tensor& x, const StagePlan& sp, const std::string& name) {
    const int c = x.cols();
    Tensor g = ad::reshape(ad::gather_rows(x, sp.merge_index), x.rows() / 8, 8 * c);
    return o.lin(o.ln(g, name + "_ln"), name, false);
}

}  // namespace

Tensor Denoiser::time_features(int t) const {
    Ops o{params_};
    Tensor e = ad::constant(1, cfg_.time_embed_dim, time_embedding(t, cfg_.time_embed_dim));
    return o.lin(ad::silu(o.lin(e, "time.fc1")), "time.fc2");
}

Tensor Denoiser::time_shift_resblock(const std::string& prefix, const Tensor& feat, const Tensor& temb, Shape3 s) const {
    Ops o{params_};
    if (static_cast<std::size_t>(feat.cols()) != s.size()) throw DimensionError("resblock: features do not match the grid");
    Tensor h = ad::normalize_rows(ad::conv3(feat, o.w(prefix + ".conv1.w"), o.w(prefix + ".conv1.b"), s));
    if (cfg_.time_resblocks) {
        Tensor shift = ad::transpose(o.lin(ad::silu(temb), prefix + ".shift"));
        h = ad::add_col_vector(h, shift);
    }
    h = ad::leaky_relu(h);
    h = ad::normalize_rows(ad::conv3(h, o.w(prefix + ".conv2.w"), o.w(prefix + ".conv2.b"), s));
    Tensor skip = params_.contains(prefix + ".skip.w") ? ad::normalize_rows(ad::linear(o.w(prefix + ".skip.w"), feat)) : feat;
    return ad::leaky_relu(ad::add(h, skip));
}

std::vector<Tensor> Denoiser::encode_image(const Volume& img, int which) const {
    if (cfg_.in_channels_image != 1) throw ArgumentError("only single-channel images are supported");
    const auto plan = plan_for(img.shape);
    Ops o{params_};
    const std::string e = cfg_.shared_image_encoder ? "enc" : (which == 0 ? "encf" : "encm");
    Tensor x = patchify(pad_channels(img.data, 1, img.shape, plan->padded), 1, *plan, cfg_.patch_size);
    x = o.ln(o.lin(x, e + ".patch"), e + ".patch_ln");
    std::vector<Tensor> feats;
    const int last = cfg_.stages() - 1;
    for (int s = 0; s <= last; ++s) {
        feats.push_back(x);
        if (s == last) break;
        const StagePlan& sp = plan->stages[s];
        for (int b = 0; b < cfg_.depths[s]; ++b) {
            const int k = b % 2;
            const std::string name = e + ".s" + std::to_string(s) + ".b" + std::to_string(b);
            Tensor seq = ad::gather_rows(o.ln(x, name + ".ln1"), sp.self_index[k]);
            Tensor att = ad::window_attention(o.lin(seq, name + ".qkv"), sp.self_plan[k], o.w(name + ".rpb"));
            x = ad::add(x, ad::gather_rows(o.lin(att, name + ".proj"), sp.slot_index[k]));
            x = ad::add(x, o.mlp(o.ln(x, name + ".ln2"), name));
        }
        x = merge(o, x, sp, e + ".s" + std::to_string(s) + ".merge");
    }
    return feats;
}

Tensor Denoiser::forward(const Volume& fixed, const Volume& moving, const DeformationField& phi_t, int t) const {
    const Shape3 s = phi_t.shape;
    if (!(fixed.shape == s) || !(moving.shape == s))
        throw DimensionError("denoiser: fixed " + fixed.shape.str() + ", moving " + moving.shape.str() + " and field " +
                             s.str() + " must share one grid");
    if (!phi_t.normalized) throw StateError("denoiser expects a normalized noisy field");
    if (t < 0) throw ArgumentError("timestep must be non-negative");
    const auto plan = plan_for(s);
    Ops o{params_};
    const int last = cfg_.stages() - 1;

    const auto f_feats = encode_image(fixed, 0);
    const auto m_feats = encode_image(moving, 1);
    const Tensor temb = time_features(t);
    const Tensor temb_act = ad::silu(temb);

    Tensor x = patchify(pad_channels(phi_t.disp, 3, s, plan->padded), 3, *plan, cfg_.patch_size);
    x = o.ln(o.lin(x, "bb.patch"), "bb.patch_ln");
    std::vector<Tensor> skips;
    for (int st = 0; st <= last; ++st) {
        const StagePlan& sp = plan->stages[st];
        const std::string sn = "bb.s" + std::to_string(st);
        const Tensor tt = o.lin(temb_act, sn + ".time");
        for (int b = 0; b < cfg_.depths[st]; ++b) {
            const int k = b % 2;
            const std::string name = sn + ".b" + std::to_string(b);
            Tensor all = ad::concat_rows({tt, o.ln(f_feats[st], name + ".lnf"), o.ln(m_feats[st], name + ".lnm"),
                                          o.ln(x, name + ".ln1")});
            Tensor seq = ad::gather_rows(all, sp.fused_index[k]);
            Tensor att = ad::window_attention(o.lin(seq, name + ".qkv"), sp.fused_plan[k], o.w(name + ".rpb"));
            x = ad::add(x, ad::gather_rows(o.lin(att, name + ".proj"), sp.slot_index[k]));
            x = ad::add(x, o.mlp(o.ln(x, name + ".ln2"), name));
        }
        skips.push_back(x);
        if (st < last) x = merge(o, x, sp, sn + ".merge");
    }

    Tensor d = time_shift_resblock("dec.bott", ad::transpose(skips[last]), temb, plan->stages[last].grid);
    for (int k = last - 1; k >= 0; --k) {
        const StagePlan& sp = plan->stages[k];
        const std::string name = "dec.up" + std::to_string(k);
        const int c = cfg_.stage_dim(k);
        Tensor u = o.lin(ad::transpose(d), name);
        u = ad::gather_rows(ad::reshape(u, u.rows() * 8, c), sp.up_index);
        Tensor cat = ad::concat_rows({ad::transpose(u), ad::transpose(skips[k])});
        d = time_shift_resblock(name + ".res", cat, temb, sp.grid);
    }

    const int cf = cfg_.full_res_dim();
    const int p3 = cfg_.patch_size * cfg_.patch_size * cfg_.patch_size;
    Tensor u = o.lin(ad::transpose(d), "dec.full");
    u = ad::transpose(ad::gather_rows(ad::reshape(u, u.rows() * p3, cf), plan->full_up_index));

    std::vector<double> raw;
    raw.reserve(5 * s.size());
    raw.insert(raw.end(), phi_t.disp.begin(), phi_t.disp.end());
    raw.insert(raw.end(), fixed.data.begin(), fixed.data.end());
    raw.insert(raw.end(), moving.data.begin(), moving.data.end());
    const int in_c = cfg_.in_channels_field + 2 * cfg_.in_channels_image;
    Tensor in = ad::constant(in_c, static_cast<int>(plan->padded.size()), pad_channels(raw, in_c, s, plan->padded));
    Tensor full = time_shift_resblock("dec.in", in, temb, plan->padded);
    Tensor out = time_shift_resblock("dec.out", ad::concat_rows({u, full}), temb, plan->padded);

    Tensor head = o.lin(ad::transpose(out), "head");
    return ad::transpose(ad::gather_rows(head, plan->crop));
}

DeformationField Denoiser::denoise(const Volume& fixed, const Volume& moving, const DeformationField& phi_t, int t) const {
    ad::NoGradGuard guard;
    Tensor eps = forward(fixed, moving, phi_t, t);
    return DeformationField(phi_t.shape, eps.value(), true);
}

std::vector<DeformationField> Denoiser::denoise_batch(const std::vector<const Volume*>& fixed,
                                                      const std::vector<const Volume*>& moving,
                                                      const std::vector<const DeformationField*>& phi_t,
                                                      const std::vector<int>& t) const {
    if (fixed.size() != moving.size() || fixed.size() != phi_t.size() || fixed.size() != t.size())
        throw DimensionError("denoise_batch: batch members have different lengths");
    std::vector<DeformationField> out;
    out.reserve(fixed.size());
    for (std::size_t i = 0; i < fixed.size(); ++i) out.push_back(denoise(*fixed[i], *moving[i], *phi_t[i], t[i]));
    return out;
}

NoisePredictor Denoiser::predictor() const {
    return [this](const Volume& f, const Volume& m, const DeformationField& phi, int t) { return denoise(f, m, phi, t); };
}

}  // namespace dreg

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffusereg/ad.hpp"
#include "diffusereg/diffusion.hpp"
#include "diffusereg/grid.hpp"

namespace dreg {

/// How field tokens see the image tokens inside a window.
enum class MaskMode {
    colocated,  ///< field p sees fixed p, moving p, every field token and the time token
    band,       ///< banded adjacency over the interleaved [fixed, moving, field] sequence
    none,       ///< unmasked attention (condition-mask ablation)
};

std::string to_string(MaskMode m);
MaskMode mask_mode_from_string(const std::string& s);

struct DenoiserConfig {
    int patch_size = 2;
    int embed_dim = 24;
    std::vector<int> depths{2, 2, 2};
    std::vector<int> num_heads{3, 6, 12};
    int window_size = 4;
    int time_embed_dim = 96;
    int in_channels_image = 1;
    int in_channels_field = 3;
    int mlp_ratio = 4;
    bool shared_image_encoder = true;
    bool time_resblocks = true;
    MaskMode mask_mode = MaskMode::colocated;

    int stages() const { return static_cast<int>(depths.size()); }
    int stage_dim(int s) const { return embed_dim << s; }
    /// Channels of the full-resolution decoder level.
    int full_res_dim() const { return embed_dim / 2 > 4 ? embed_dim / 2 : 4; }
    /// Spatial multiple every input is padded to.
    int spatial_multiple() const { return patch_size << (stages() - 1); }
    void validate() const;

    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Learned weights keyed by layer path.
class DenoiserParams {
public:
    ad::Tensor& add(const std::string& name, int rows, int cols, std::vector<double> values);
    ad::Tensor& at(const std::string& name);
    const ad::Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.count(name) > 0; }

    std::map<std::string, ad::Tensor>& tensors() { return tensors_; }
    const std::map<std::string, ad::Tensor>& tensors() const { return tensors_; }
    std::size_t scalar_count() const;
    bool all_finite() const;
    void zero_grad();
    /// Deep copy (fresh leaf tensors).
    DenoiserParams clone() const;

private:
    std::map<std::string, ad::Tensor> tensors_;
};

/// Sinusoidal embedding of a timestep (first half sines, second half cosines).
std::vector<double> time_embedding(int t, int dim);

/// Boolean (3n+1) x (3n+1) matrix over the sequence [time, fixed(n), moving(n), field(n)],
/// true where attention is allowed.
struct ConditionAttentionMask {
    int window_tokens = 0;
    std::vector<std::uint8_t> allowed;

    int size() const { return 3 * window_tokens + 1; }
    bool operator()(int i, int j) const { return allowed[static_cast<std::size_t>(i) * size() + j] != 0; }
};

/// Condition mask for a cubic window of edge w. With `shifted` set, the standard
/// shifted-window boundary mask of window `window_index` (default: the last window,
/// which straddles the roll seam) on a cubic token grid of edge `grid_edge` is ANDed in.
ConditionAttentionMask build_condition_mask(int w, bool shifted, int grid_edge, MaskMode mode = MaskMode::colocated,
                                            int window_index = -1);

/// Tokens of one window in wire order: time, fixed, moving, field.
struct WindowTokenBundle {
    std::vector<double> time_token;  // C
    std::vector<double> fixed;       // n x C
    std::vector<double> moving;      // n x C
    std::vector<double> field;       // n x C
    int channels = 0;
    int window_tokens = 0;

    int sequence_length() const { return 3 * window_tokens + 1; }
};

/// Attention weights of one fused layer: projection matrices and head count.
struct FusedAttentionWeights {
    ad::Tensor qkv_w, qkv_b, proj_w, proj_b;
    int heads = 1;
};

/// Masked MSA over the bundle; returns only the n transformed field tokens (n x C).
ad::Tensor fused_window_attention(const WindowTokenBundle& bundle, const ConditionAttentionMask& mask,
                                  const FusedAttentionWeights& w);
/// Post-softmax weights (heads x L x L) of the same layer, for inspection.
std::vector<double> fused_attention_weights(const WindowTokenBundle& bundle, const ConditionAttentionMask& mask,
                                            const FusedAttentionWeights& w);

struct ShapePlan;

class Denoiser {
public:
    Denoiser(DenoiserConfig cfg, std::uint64_t seed);
    Denoiser(DenoiserConfig cfg, DenoiserParams params);
    ~Denoiser();
    Denoiser(const Denoiser&) = delete;
    Denoiser& operator=(const Denoiser&) = delete;
    Denoiser(Denoiser&&) noexcept;
    Denoiser& operator=(Denoiser&&) noexcept;

    const DenoiserConfig& config() const { return cfg_; }
    DenoiserParams& params() { return params_; }
    const DenoiserParams& params() const { return params_; }

    /// Per-stage image features (tokens x channels), each captured before that
    /// stage's attention blocks. `which` picks the encoder when weights are not shared
    /// (0 fixed, 1 moving).
    std::vector<ad::Tensor> encode_image(const Volume& img, int which = 0) const;

    /// Differentiable noise prediction, 3 x S (channel-first).
    ad::Tensor forward(const Volume& fixed, const Volume& moving, const DeformationField& phi_t, int t) const;

    /// Noise prediction without graph recording.
    DeformationField denoise(const Volume& fixed, const Volume& moving, const DeformationField& phi_t, int t) const;

    /// Same as denoise, applied independently to every element of a batch.
    std::vector<DeformationField> denoise_batch(const std::vector<const Volume*>& fixed,
                                                const std::vector<const Volume*>& moving,
                                                const std::vector<const DeformationField*>& phi_t,
                                                const std::vector<int>& t) const;

    /// Time-conditioned residual block on channel-first features over grid `s`.
    ad::Tensor time_shift_resblock(const std::string& prefix, const ad::Tensor& feat, const ad::Tensor& temb,
                                   Shape3 s) const;
    /// Time MLP output (1 x time_embed_dim) for timestep t.
    ad::Tensor time_features(int t) const;

    NoisePredictor predictor() const;

private:
    std::shared_ptr<const ShapePlan> plan_for(Shape3 s) const;
    void init_params(std::uint64_t seed);

    DenoiserConfig cfg_;
    DenoiserParams params_;
    mutable std::mutex plan_mutex_;
    mutable std::map<std::tuple<int, int, int>, std::shared_ptr<const ShapePlan>> plans_;
};

}  // namespace dreg

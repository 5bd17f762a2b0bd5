#pragma once

// Data-parallel inner loops. Every kernel in `dreg::kernels` has a straightforward
// single-threaded counterpart in `dreg::kernels::serial`; the serial versions are
// kept as references for the tests and the benchmark, not for production use.

#include <cstdint>
#include <span>

#include "diffusereg/grid.hpp"

namespace dreg::kernels {

/// Shape of the valid-mode box window output.
inline Shape3 valid_shape(Shape3 s, int k) { return {s.d - k + 1, s.h - k + 1, s.w - k + 1}; }

/// Description of one batched windowed-attention call.
///
/// `qkv` holds windows*seq rows of [q | k | v], each C = heads*head_dim wide.
/// Only rows [q_begin, q_begin+q_count) of every window act as queries; the output
/// holds windows*q_count rows. `mask` is q_count x seq bytes per window (stride
/// `mask_window_stride`, zero when all windows share one mask); zero bytes block
/// attention. `bias_index` (q_count x seq, shared by all windows) selects an entry
/// of the per-head bias table, or -1 for no bias.
struct AttentionLayout {
    int windows = 0;
    int seq = 0;
    int q_begin = 0;
    int q_count = 0;
    int heads = 1;
    int head_dim = 1;
    double scale = 1.0;
    const std::uint8_t* mask = nullptr;
    std::size_t mask_window_stride = 0;
    const int* bias_index = nullptr;
    const double* bias_table = nullptr;  // heads x bias_entries
    int bias_entries = 0;

    int channels() const { return heads * head_dim; }
    std::size_t prob_count() const {
        return static_cast<std::size_t>(windows) * heads * q_count * seq;
    }
};

// ---- resampling -----------------------------------------------------------------

/// out(x) = img(x + disp(x)), trilinear, sample coordinates clamped to the grid.
void warp_trilinear(std::span<const double> img, Shape3 s, std::span<const double> disp,
                    std::span<double> out);
/// Adjoint of warp_trilinear. Either gradient output may be empty; both accumulate.
void warp_trilinear_backward(std::span<const double> img, Shape3 s, std::span<const double> disp,
                             std::span<const double> grad_out, std::span<double> grad_img,
                             std::span<double> grad_disp);
/// Nearest-neighbour pull of labels with the same coordinate convention as warp_trilinear.
void warp_nearest(std::span<const std::int32_t> labels, Shape3 s, std::span<const double> disp,
                  std::span<std::int32_t> out);

// ---- field analytics ------------------------------------------------------------

/// det(I + grad disp) per voxel; central differences inside, one-sided at faces.
void jacobian_determinant(std::span<const double> disp, Shape3 s, std::span<double> out);

// ---- box filters (SSIM) -----------------------------------------------------------

/// Sum over every k^3 window that fits inside the grid; output has valid_shape(s, k).
void box_sum_valid(std::span<const double> in, Shape3 s, int k, std::span<double> out);
/// Adjoint of box_sum_valid: spreads each window value back over its k^3 voxels.
void box_sum_adjoint(std::span<const double> in, Shape3 s, int k, std::span<double> out);

// ---- dense linear algebra ---------------------------------------------------------

/// Row-major C(MxN) (+)= A(MxK) * B(KxN).
void matmul(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);
/// Row-major C(MxN) (+)= A(KxM)^T * B(KxN).
void matmul_at_b(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);
/// Row-major C(MxN) (+)= A(MxK) * B(NxK)^T.
void matmul_a_bt(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);

// ---- 3x3x3 convolution, zero padding 1, stride 1, channel-first -------------------

/// y(Cout x S) = W(Cout x Cin*27) * x + bias.
void conv3_forward(const double* x, const double* weight, const double* bias, double* y,
                   int cin, int cout, Shape3 s);
/// Accumulates into grad_x / grad_w / grad_b (any may be null).
void conv3_backward(const double* x, const double* weight, const double* grad_y, double* grad_x,
                    double* grad_w, double* grad_b, int cin, int cout, Shape3 s);

// ---- windowed multi-head attention ------------------------------------------------

/// Writes windows*q_count x C outputs and the post-softmax probabilities
/// (windows x heads x q_count x seq) needed by the backward pass.
void window_attention_forward(const AttentionLayout& lay, const double* qkv, double* out,
                              double* probs);
/// Accumulates into grad_qkv (windows*seq x 3C) and grad_bias_table (heads x entries, may be null).
void window_attention_backward(const AttentionLayout& lay, const double* qkv, const double* probs,
                               const double* grad_out, double* grad_qkv, double* grad_bias_table);

namespace serial {

void warp_trilinear(std::span<const double> img, Shape3 s, std::span<const double> disp,
                    std::span<double> out);
void warp_trilinear_backward(std::span<const double> img, Shape3 s, std::span<const double> disp,
                             std::span<const double> grad_out, std::span<double> grad_img,
                             std::span<double> grad_disp);
void warp_nearest(std::span<const std::int32_t> labels, Shape3 s, std::span<const double> disp,
                  std::span<std::int32_t> out);
void jacobian_determinant(std::span<const double> disp, Shape3 s, std::span<double> out);
void box_sum_valid(std::span<const double> in, Shape3 s, int k, std::span<double> out);
void box_sum_adjoint(std::span<const double> in, Shape3 s, int k, std::span<double> out);
void matmul(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);
void matmul_at_b(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);
void matmul_a_bt(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);
void conv3_forward(const double* x, const double* weight, const double* bias, double* y,
                   int cin, int cout, Shape3 s);
void conv3_backward(const double* x, const double* weight, const double* grad_y, double* grad_x,
                    double* grad_w, double* grad_b, int cin, int cout, Shape3 s);
void window_attention_forward(const AttentionLayout& lay, const double* qkv, double* out,
                              double* probs);
void window_attention_backward(const AttentionLayout& lay, const double* qkv, const double* probs,
                               const double* grad_out, double* grad_qkv, double* grad_bias_table);

}  // namespace serial

}  // namespace dreg::kernels

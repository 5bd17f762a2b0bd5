#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "diffusereg/kernels.hpp"
#include "kernels_common.hpp"

namespace dreg::kernels::serial {

using detail::jacobian_at;
using detail::nearest_index;
using detail::trilinear;

void warp_trilinear(std::span<const double> img, Shape3 s, std::span<const double> disp,
                    std::span<double> out) {
    const std::size_t n = s.size();
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const std::size_t i = s.index(z, y, x);
                out[i] = trilinear(img.data(), s, z + disp[i], y + disp[n + i], x + disp[2 * n + i]);
            }
}

void warp_trilinear_backward(std::span<const double> img, Shape3 s, std::span<const double> disp,
                             std::span<const double> grad_out, std::span<double> grad_img,
                             std::span<double> grad_disp) {
    const std::size_t n = s.size();
    const bool want_disp = !grad_disp.empty();
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const std::size_t i = s.index(z, y, x);
                auto sink = [&](std::size_t idx, double v) {
                    if (!grad_img.empty()) grad_img[idx] += v;
                };
                detail::trilinear_adjoint(img.data(), s, z + disp[i], y + disp[n + i], x + disp[2 * n + i],
                                          grad_out[i], sink, want_disp ? &grad_disp[i] : nullptr,
                                          want_disp ? &grad_disp[n + i] : nullptr,
                                          want_disp ? &grad_disp[2 * n + i] : nullptr);
            }
}

void warp_nearest(std::span<const std::int32_t> labels, Shape3 s, std::span<const double> disp,
                  std::span<std::int32_t> out) {
    const std::size_t n = s.size();
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const std::size_t i = s.index(z, y, x);
                const int sz = nearest_index(z + disp[i], s.d);
                const int sy = nearest_index(y + disp[n + i], s.h);
                const int sx = nearest_index(x + disp[2 * n + i], s.w);
                out[i] = labels[s.index(sz, sy, sx)];
            }
}

void jacobian_determinant(std::span<const double> disp, Shape3 s, std::span<double> out) {
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) out[s.index(z, y, x)] = jacobian_at(disp.data(), s, z, y, x);
}

void box_sum_valid(std::span<const double> in, Shape3 s, int k, std::span<double> out) {
    const Shape3 v = valid_shape(s, k);
    for (int z = 0; z < v.d; ++z)
        for (int y = 0; y < v.h; ++y)
            for (int x = 0; x < v.w; ++x) {
                double acc = 0.0;
                for (int a = 0; a < k; ++a)
                    for (int b = 0; b < k; ++b)
                        for (int c = 0; c < k; ++c) acc += in[s.index(z + a, y + b, x + c)];
                out[v.index(z, y, x)] = acc;
            }
}

void box_sum_adjoint(std::span<const double> in, Shape3 s, int k, std::span<double> out) {
    const Shape3 v = valid_shape(s, k);
    std::fill(out.begin(), out.end(), 0.0);
    for (int z = 0; z < v.d; ++z)
        for (int y = 0; y < v.h; ++y)
            for (int x = 0; x < v.w; ++x) {
                const double g = in[v.index(z, y, x)];
                for (int a = 0; a < k; ++a)
                    for (int b = 0; b < k; ++b)
                        for (int c = 0; c < k; ++c) out[s.index(z + a, y + b, x + c)] += g;
            }
}

void matmul(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
        }
}

void matmul_at_b(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
        }
}

void matmul_a_bt(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
        }
}

void conv3_forward(const double* x, const double* weight, const double* bias, double* y,
                   int cin, int cout, Shape3 s) {
    const std::size_t n = s.size();
    for (int co = 0; co < cout; ++co)
        for (int z = 0; z < s.d; ++z)
            for (int yy = 0; yy < s.h; ++yy)
                for (int xx = 0; xx < s.w; ++xx) {
                    double acc = bias ? bias[co] : 0.0;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int kz = 0; kz < 3; ++kz)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int sz = z + kz - 1, sy = yy + ky - 1, sx = xx + kx - 1;
                                    if (sz < 0 || sy < 0 || sx < 0 || sz >= s.d || sy >= s.h || sx >= s.w) continue;
                                    acc += weight[(co * cin + ci) * 27 + kz * 9 + ky * 3 + kx] *
                                           x[ci * n + s.index(sz, sy, sx)];
                                }
                    y[co * n + s.index(z, yy, xx)] = acc;
                }
}

void conv3_backward(const double* x, const double* weight, const double* grad_y, double* grad_x,
                    double* grad_w, double* grad_b, int cin, int cout, Shape3 s) {
    const std::size_t n = s.size();
    for (int co = 0; co < cout; ++co)
        for (int z = 0; z < s.d; ++z)
            for (int yy = 0; yy < s.h; ++yy)
                for (int xx = 0; xx < s.w; ++xx) {
                    const double g = grad_y[co * n + s.index(z, yy, xx)];
                    if (grad_b) grad_b[co] += g;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int kz = 0; kz < 3; ++kz)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int sz = z + kz - 1, sy = yy + ky - 1, sx = xx + kx - 1;
                                    if (sz < 0 || sy < 0 || sx < 0 || sz >= s.d || sy >= s.h || sx >= s.w) continue;
                                    const std::size_t wi = (co * cin + ci) * 27 + kz * 9 + ky * 3 + kx;
                                    const std::size_t xi = ci * n + s.index(sz, sy, sx);
                                    if (grad_w) grad_w[wi] += g * x[xi];
                                    if (grad_x) grad_x[xi] += g * weight[wi];
                                }
                }
}

namespace {

double bias_at(const AttentionLayout& lay, int h, int qi, int j) {
    if (!lay.bias_index || !lay.bias_table) return 0.0;
    const int e = lay.bias_index[static_cast<std::size_t>(qi) * lay.seq + j];
    return e < 0 ? 0.0 : lay.bias_table[static_cast<std::size_t>(h) * lay.bias_entries + e];
}

}  // namespace

void window_attention_forward(const AttentionLayout& lay, const double* qkv, double* out,
                              double* probs) {
    const int c = lay.channels();
    const std::size_t row = 3 * static_cast<std::size_t>(c);
    std::vector<double> scores(lay.seq);
    for (int w = 0; w < lay.windows; ++w) {
        const std::uint8_t* mask = lay.mask ? lay.mask + w * lay.mask_window_stride : nullptr;
        for (int h = 0; h < lay.heads; ++h) {
            const int off = h * lay.head_dim;
            for (int qi = 0; qi < lay.q_count; ++qi) {
                const double* q = qkv + (static_cast<std::size_t>(w) * lay.seq + lay.q_begin + qi) * row + off;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < lay.seq; ++j) {
                    if (mask && !mask[static_cast<std::size_t>(qi) * lay.seq + j]) {
                        scores[j] = -std::numeric_limits<double>::infinity();
                        continue;
                    }
                    const double* kv = qkv + (static_cast<std::size_t>(w) * lay.seq + j) * row + c + off;
                    double dot = 0.0;
                    for (int d = 0; d < lay.head_dim; ++d) dot += q[d] * kv[d];
                    scores[j] = dot * lay.scale + bias_at(lay, h, qi, j);
                    mx = std::max(mx, scores[j]);
                }
                double* p = probs + ((static_cast<std::size_t>(w) * lay.heads + h) * lay.q_count + qi) * lay.seq;
                double sum = 0.0;
                for (int j = 0; j < lay.seq; ++j) {
                    p[j] = std::isinf(scores[j]) ? 0.0 : std::exp(scores[j] - mx);
                    sum += p[j];
                }
                for (int j = 0; j < lay.seq; ++j) p[j] = sum > 0.0 ? p[j] / sum : 0.0;
                double* o = out + (static_cast<std::size_t>(w) * lay.q_count + qi) * c + off;
                for (int d = 0; d < lay.head_dim; ++d) o[d] = 0.0;
                for (int j = 0; j < lay.seq; ++j) {
                    if (p[j] == 0.0) continue;
                    const double* v = qkv + (static_cast<std::size_t>(w) * lay.seq + j) * row + 2 * c + off;
                    for (int d = 0; d < lay.head_dim; ++d) o[d] += p[j] * v[d];
                }
            }
        }
    }
}

void window_attention_backward(const AttentionLayout& lay, const double* qkv, const double* probs,
                               const double* grad_out, double* grad_qkv, double* grad_bias_table) {
    const int c = lay.channels();
    const std::size_t row = 3 * static_cast<std::size_t>(c);
    std::vector<double> dp(lay.seq);
    for (int w = 0; w < lay.windows; ++w) {
        for (int h = 0; h < lay.heads; ++h) {
            const int off = h * lay.head_dim;
            for (int qi = 0; qi < lay.q_count; ++qi) {
                const std::size_t qrow = static_cast<std::size_t>(w) * lay.seq + lay.q_begin + qi;
                const double* q = qkv + qrow * row + off;
                const double* g = grad_out + (static_cast<std::size_t>(w) * lay.q_count + qi) * c + off;
                const double* p = probs + ((static_cast<std::size_t>(w) * lay.heads + h) * lay.q_count + qi) * lay.seq;
                double inner = 0.0;
                for (int j = 0; j < lay.seq; ++j) {
                    const std::size_t r = static_cast<std::size_t>(w) * lay.seq + j;
                    const double* v = qkv + r * row + 2 * c + off;
                    double* gv = grad_qkv + r * row + 2 * c + off;
                    double acc = 0.0;
                    for (int d = 0; d < lay.head_dim; ++d) {
                        acc += g[d] * v[d];
                        gv[d] += p[j] * g[d];
                    }
                    dp[j] = acc;
                    inner += p[j] * acc;
                }
                double* gq = grad_qkv + qrow * row + off;
                for (int j = 0; j < lay.seq; ++j) {
                    if (p[j] == 0.0) continue;
                    const double ds = p[j] * (dp[j] - inner);
                    const std::size_t r = static_cast<std::size_t>(w) * lay.seq + j;
                    const double* k = qkv + r * row + c + off;
                    double* gk = grad_qkv + r * row + c + off;
                    for (int d = 0; d < lay.head_dim; ++d) {
                        gq[d] += lay.scale * ds * k[d];
                        gk[d] += lay.scale * ds * q[d];
                    }
                    if (grad_bias_table && lay.bias_index) {
                        const int e = lay.bias_index[static_cast<std::size_t>(qi) * lay.seq + j];
                        if (e >= 0) grad_bias_table[static_cast<std::size_t>(h) * lay.bias_entries + e] += ds;
                    }
                }
            }
        }
    }
}

}  // namespace dreg::kernels::serial

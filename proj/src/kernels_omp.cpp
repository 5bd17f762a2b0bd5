#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>
#include <omp.h>

#include "diffusereg/kernels.hpp"
#include "kernels_common.hpp"

namespace dreg::kernels {

using detail::jacobian_at;
using detail::nearest_index;
using detail::trilinear;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

}  // namespace

void warp_trilinear(std::span<const double> img, Shape3 s, std::span<const double> disp,
                    std::span<double> out) {
    const std::size_t n = s.size();
#pragma omp parallel for collapse(2) schedule(static)
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
    const bool want_img = !grad_img.empty();
    const int threads = omp_get_max_threads();
    if (want_img && threads == 1) {
        serial::warp_trilinear_backward(img, s, disp, grad_out, grad_img, grad_disp);
        return;
    }
    std::vector<double> partial(want_img ? static_cast<std::size_t>(threads) * n : 0, 0.0);
#pragma omp parallel
    {
        double* mine = want_img ? partial.data() + static_cast<std::size_t>(omp_get_thread_num()) * n : nullptr;
#pragma omp for collapse(2) schedule(static)
        for (int z = 0; z < s.d; ++z)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    const std::size_t i = s.index(z, y, x);
                    auto sink = [&](std::size_t idx, double v) {
                        if (mine) mine[idx] += v;
                    };
                    detail::trilinear_adjoint(img.data(), s, z + disp[i], y + disp[n + i], x + disp[2 * n + i],
                                              grad_out[i], sink, want_disp ? &grad_disp[i] : nullptr,
                                              want_disp ? &grad_disp[n + i] : nullptr,
                                              want_disp ? &grad_disp[2 * n + i] : nullptr);
                }
        if (want_img) {
#pragma omp for schedule(static)
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int t = 0; t < threads; ++t) acc += partial[static_cast<std::size_t>(t) * n + i];
                grad_img[i] += acc;
            }
        }
    }
}

void warp_nearest(std::span<const std::int32_t> labels, Shape3 s, std::span<const double> disp,
                  std::span<std::int32_t> out) {
    const std::size_t n = s.size();
#pragma omp parallel for collapse(2) schedule(static)
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
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) out[s.index(z, y, x)] = jacobian_at(disp.data(), s, z, y, x);
}

// Separable valid-mode window sums: one 1D pass per axis, shrinking that axis.
void box_sum_valid(std::span<const double> in, Shape3 s, int k, std::span<double> out) {
    const Shape3 s1{s.d, s.h, s.w - k + 1};
    const Shape3 s2{s.d, s.h - k + 1, s.w - k + 1};
    const Shape3 s3 = valid_shape(s, k);
    std::vector<double> t1(s1.size()), t2(s2.size());
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < s1.d; ++z)
        for (int y = 0; y < s1.h; ++y)
            for (int x = 0; x < s1.w; ++x) {
                double acc = 0.0;
                for (int c = 0; c < k; ++c) acc += in[s.index(z, y, x + c)];
                t1[s1.index(z, y, x)] = acc;
            }
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < s2.d; ++z)
        for (int y = 0; y < s2.h; ++y)
            for (int x = 0; x < s2.w; ++x) {
                double acc = 0.0;
                for (int b = 0; b < k; ++b) acc += t1[s1.index(z, y + b, x)];
                t2[s2.index(z, y, x)] = acc;
            }
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < s3.d; ++z)
        for (int y = 0; y < s3.h; ++y)
            for (int x = 0; x < s3.w; ++x) {
                double acc = 0.0;
                for (int a = 0; a < k; ++a) acc += t2[s2.index(z + a, y, x)];
                out[s3.index(z, y, x)] = acc;
            }
}

void box_sum_adjoint(std::span<const double> in, Shape3 s, int k, std::span<double> out) {
    const Shape3 s3 = valid_shape(s, k);
    const Shape3 s2{s.d, s.h - k + 1, s.w - k + 1};
    const Shape3 s1{s.d, s.h, s.w - k + 1};
    std::vector<double> t2(s2.size()), t1(s1.size());
    // out[j] collects in[i] for every window start i with i <= j < i + k.
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < s2.d; ++z)
        for (int y = 0; y < s2.h; ++y)
            for (int x = 0; x < s2.w; ++x) {
                double acc = 0.0;
                const int lo = std::max(0, z - k + 1), hi = std::min(s3.d - 1, z);
                for (int a = lo; a <= hi; ++a) acc += in[s3.index(a, y, x)];
                t2[s2.index(z, y, x)] = acc;
            }
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < s1.d; ++z)
        for (int y = 0; y < s1.h; ++y)
            for (int x = 0; x < s1.w; ++x) {
                double acc = 0.0;
                const int lo = std::max(0, y - k + 1), hi = std::min(s2.h - 1, y);
                for (int b = lo; b <= hi; ++b) acc += t2[s2.index(z, b, x)];
                t1[s1.index(z, y, x)] = acc;
            }
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                double acc = 0.0;
                const int lo = std::max(0, x - k + 1), hi = std::min(s1.w - 1, x);
                for (int c = lo; c <= hi; ++c) acc += t1[s1.index(z, y, c)];
                out[s.index(z, y, x)] = acc;
            }
}

void matmul(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    Map cm(c, m, n);
    if (accumulate)
        cm.noalias() += MapC(a, m, k) * MapC(b, k, n);
    else
        cm.noalias() = MapC(a, m, k) * MapC(b, k, n);
}

void matmul_at_b(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    Map cm(c, m, n);
    if (accumulate)
        cm.noalias() += MapC(a, k, m).transpose() * MapC(b, k, n);
    else
        cm.noalias() = MapC(a, k, m).transpose() * MapC(b, k, n);
}

void matmul_a_bt(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    Map cm(c, m, n);
    if (accumulate)
        cm.noalias() += MapC(a, m, k) * MapC(b, n, k).transpose();
    else
        cm.noalias() = MapC(a, m, k) * MapC(b, n, k).transpose();
}

namespace {

// col is (cin*27) x S, row (ci*27 + tap) holds the shifted, zero-padded channel.
void im2col3(const double* x, double* col, int cin, Shape3 s) {
    const std::size_t n = s.size();
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < cin; ++ci)
        for (int tap = 0; tap < 27; ++tap) {
            const int dz = tap / 9 - 1, dy = (tap / 3) % 3 - 1, dx = tap % 3 - 1;
            double* dst = col + (static_cast<std::size_t>(ci) * 27 + tap) * n;
            const double* src = x + ci * n;
            for (int z = 0; z < s.d; ++z) {
                const int sz = z + dz;
                for (int y = 0; y < s.h; ++y) {
                    const int sy = y + dy;
                    double* row = dst + s.index(z, y, 0);
                    if (sz < 0 || sz >= s.d || sy < 0 || sy >= s.h) {
                        std::fill(row, row + s.w, 0.0);
                        continue;
                    }
                    const double* srow = src + s.index(sz, sy, 0);
                    for (int xx = 0; xx < s.w; ++xx) {
                        const int sx = xx + dx;
                        row[xx] = (sx < 0 || sx >= s.w) ? 0.0 : srow[sx];
                    }
                }
            }
        }
}

void col2im3(const double* col, double* x, int cin, Shape3 s) {
    const std::size_t n = s.size();
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < cin; ++ci) {
        double* dst = x + ci * n;
        for (int tap = 0; tap < 27; ++tap) {
            const int dz = tap / 9 - 1, dy = (tap / 3) % 3 - 1, dx = tap % 3 - 1;
            const double* src = col + (static_cast<std::size_t>(ci) * 27 + tap) * n;
            for (int z = 0; z < s.d; ++z) {
                const int sz = z + dz;
                if (sz < 0 || sz >= s.d) continue;
                for (int y = 0; y < s.h; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= s.h) continue;
                    const double* row = src + s.index(z, y, 0);
                    double* drow = dst + s.index(sz, sy, 0);
                    for (int xx = 0; xx < s.w; ++xx) {
                        const int sx = xx + dx;
                        if (sx >= 0 && sx < s.w) drow[sx] += row[xx];
                    }
                }
            }
        }
    }
}

}  // namespace

void conv3_forward(const double* x, const double* weight, const double* bias, double* y,
                   int cin, int cout, Shape3 s) {
    const int n = static_cast<int>(s.size());
    std::vector<double> col(static_cast<std::size_t>(cin) * 27 * n);
    im2col3(x, col.data(), cin, s);
    matmul(weight, col.data(), y, cout, n, cin * 27, false);
    if (bias) {
#pragma omp parallel for schedule(static)
        for (int co = 0; co < cout; ++co)
            for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(co) * n + i] += bias[co];
    }
}

void conv3_backward(const double* x, const double* weight, const double* grad_y, double* grad_x,
                    double* grad_w, double* grad_b, int cin, int cout, Shape3 s) {
    const int n = static_cast<int>(s.size());
    if (grad_b) {
#pragma omp parallel for schedule(static)
        for (int co = 0; co < cout; ++co) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += grad_y[static_cast<std::size_t>(co) * n + i];
            grad_b[co] += acc;
        }
    }
    std::vector<double> col(static_cast<std::size_t>(cin) * 27 * n);
    if (grad_w) {
        im2col3(x, col.data(), cin, s);
        matmul_a_bt(grad_y, col.data(), grad_w, cout, cin * 27, n, true);
    }
    if (grad_x) {
        matmul_at_b(weight, grad_y, col.data(), cin * 27, n, cout, false);
        col2im3(col.data(), grad_x, cin, s);
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
    const int pairs = lay.windows * lay.heads;
#pragma omp parallel
    {
        std::vector<double> scores(lay.seq);
#pragma omp for schedule(static)
        for (int wh = 0; wh < pairs; ++wh) {
            const int w = wh / lay.heads, h = wh % lay.heads;
            const std::uint8_t* mask = lay.mask ? lay.mask + w * lay.mask_window_stride : nullptr;
            const int off = h * lay.head_dim;
            const double* base = qkv + static_cast<std::size_t>(w) * lay.seq * row;
            for (int qi = 0; qi < lay.q_count; ++qi) {
                const double* q = base + static_cast<std::size_t>(lay.q_begin + qi) * row + off;
                const std::uint8_t* mrow = mask ? mask + static_cast<std::size_t>(qi) * lay.seq : nullptr;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < lay.seq; ++j) {
                    if (mrow && !mrow[j]) {
                        scores[j] = -std::numeric_limits<double>::infinity();
                        continue;
                    }
                    const double* k = base + static_cast<std::size_t>(j) * row + c + off;
                    double dot = 0.0;
                    for (int d = 0; d < lay.head_dim; ++d) dot += q[d] * k[d];
                    scores[j] = dot * lay.scale + bias_at(lay, h, qi, j);
                    mx = std::max(mx, scores[j]);
                }
                double* p = probs + (static_cast<std::size_t>(wh) * lay.q_count + qi) * lay.seq;
                double sum = 0.0;
                for (int j = 0; j < lay.seq; ++j) {
                    p[j] = std::isinf(scores[j]) ? 0.0 : std::exp(scores[j] - mx);
                    sum += p[j];
                }
                const double inv = sum > 0.0 ? 1.0 / sum : 0.0;
                double* o = out + (static_cast<std::size_t>(w) * lay.q_count + qi) * c + off;
                for (int d = 0; d < lay.head_dim; ++d) o[d] = 0.0;
                for (int j = 0; j < lay.seq; ++j) {
                    p[j] *= inv;
                    if (p[j] == 0.0) continue;
                    const double* v = base + static_cast<std::size_t>(j) * row + 2 * c + off;
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
    const int pairs = lay.windows * lay.heads;
    const bool want_bias = grad_bias_table && lay.bias_index && lay.bias_entries > 0;
#pragma omp parallel
    {
        std::vector<double> dp(lay.seq);
        std::vector<double> local_bias(want_bias ? static_cast<std::size_t>(lay.heads) * lay.bias_entries : 0, 0.0);
#pragma omp for schedule(static)
        for (int wh = 0; wh < pairs; ++wh) {
            const int w = wh / lay.heads, h = wh % lay.heads;
            const int off = h * lay.head_dim;
            const double* base = qkv + static_cast<std::size_t>(w) * lay.seq * row;
            double* gbase = grad_qkv + static_cast<std::size_t>(w) * lay.seq * row;
            for (int qi = 0; qi < lay.q_count; ++qi) {
                const double* q = base + static_cast<std::size_t>(lay.q_begin + qi) * row + off;
                double* gq = gbase + static_cast<std::size_t>(lay.q_begin + qi) * row + off;
                const double* g = grad_out + (static_cast<std::size_t>(w) * lay.q_count + qi) * c + off;
                const double* p = probs + (static_cast<std::size_t>(wh) * lay.q_count + qi) * lay.seq;
                double inner = 0.0;
                for (int j = 0; j < lay.seq; ++j) {
                    if (p[j] == 0.0) {
                        dp[j] = 0.0;
                        continue;
                    }
                    const double* v = base + static_cast<std::size_t>(j) * row + 2 * c + off;
                    double* gv = gbase + static_cast<std::size_t>(j) * row + 2 * c + off;
                    double acc = 0.0;
                    for (int d = 0; d < lay.head_dim; ++d) {
                        acc += g[d] * v[d];
                        gv[d] += p[j] * g[d];
                    }
                    dp[j] = acc;
                    inner += p[j] * acc;
                }
                for (int j = 0; j < lay.seq; ++j) {
                    if (p[j] == 0.0) continue;
                    const double ds = p[j] * (dp[j] - inner);
                    const double* k = base + static_cast<std::size_t>(j) * row + c + off;
                    double* gk = gbase + static_cast<std::size_t>(j) * row + c + off;
                    const double sds = lay.scale * ds;
                    for (int d = 0; d < lay.head_dim; ++d) {
                        gq[d] += sds * k[d];
                        gk[d] += sds * q[d];
                    }
                    if (want_bias) {
                        const int e = lay.bias_index[static_cast<std::size_t>(qi) * lay.seq + j];
                        if (e >= 0) local_bias[static_cast<std::size_t>(h) * lay.bias_entries + e] += ds;
                    }
                }
            }
        }
        if (want_bias) {
#pragma omp critical
            for (std::size_t i = 0; i < local_bias.size(); ++i) grad_bias_table[i] += local_bias[i];
        }
    }
}

}  // namespace dreg::kernels

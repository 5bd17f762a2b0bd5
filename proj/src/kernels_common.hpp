#pragma once

#include <algorithm>
#include <cmath>

#include "diffusereg/grid.hpp"

namespace dreg::kernels::detail {

/// Lower corner, upper corner and fraction along one axis for a clamped sample
/// coordinate. `inside` is false when the coordinate was clamped, in which case
/// the sample does not move with the coordinate.
struct AxisSample {
    int lo;
    int hi;
    double frac;
    bool inside;
};

inline AxisSample locate(double p, int n) {
    if (n == 1) return {0, 0, 0.0, false};
    const double top = static_cast<double>(n - 1);
    bool inside = true;
    if (!(p >= 0.0)) {
        p = 0.0;
        inside = false;
    } else if (p > top) {
        p = top;
        inside = false;
    }
    int lo = static_cast<int>(std::floor(p));
    if (lo >= n - 1) lo = n - 2;
    return {lo, lo + 1, p - lo, inside};
}

inline double trilinear(const double* img, Shape3 s, double pz, double py, double px) {
    const AxisSample az = locate(pz, s.d), ay = locate(py, s.h), ax = locate(px, s.w);
    const double wz[2] = {1.0 - az.frac, az.frac};
    const double wy[2] = {1.0 - ay.frac, ay.frac};
    const double wx[2] = {1.0 - ax.frac, ax.frac};
    const int iz[2] = {az.lo, az.hi}, iy[2] = {ay.lo, ay.hi}, ix[2] = {ax.lo, ax.hi};
    double v = 0.0;
    for (int a = 0; a < 2; ++a) {
        if (wz[a] == 0.0) continue;
        for (int b = 0; b < 2; ++b) {
            if (wy[b] == 0.0) continue;
            for (int c = 0; c < 2; ++c) {
                if (wx[c] == 0.0) continue;
                v += wz[a] * wy[b] * wx[c] * img[s.index(iz[a], iy[b], ix[c])];
            }
        }
    }
    return v;
}

/// Accumulates d(out)/d(img) and d(out)/d(p) for one trilinear sample.
template <class ImgSink>
inline void trilinear_adjoint(const double* img, Shape3 s, double pz, double py, double px, double g,
                              ImgSink&& img_sink, double* gz, double* gy, double* gx) {
    const AxisSample az = locate(pz, s.d), ay = locate(py, s.h), ax = locate(px, s.w);
    const double wz[2] = {1.0 - az.frac, az.frac};
    const double wy[2] = {1.0 - ay.frac, ay.frac};
    const double wx[2] = {1.0 - ax.frac, ax.frac};
    const double sign[2] = {-1.0, 1.0};
    const int iz[2] = {az.lo, az.hi}, iy[2] = {ay.lo, ay.hi}, ix[2] = {ax.lo, ax.hi};
    double dz = 0.0, dy = 0.0, dx = 0.0;
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
            for (int c = 0; c < 2; ++c) {
                const std::size_t idx = s.index(iz[a], iy[b], ix[c]);
                const double v = img[idx];
                img_sink(idx, g * wz[a] * wy[b] * wx[c]);
                dz += sign[a] * wy[b] * wx[c] * v;
                dy += wz[a] * sign[b] * wx[c] * v;
                dx += wz[a] * wy[b] * sign[c] * v;
            }
        }
    }
    if (gz && az.inside) *gz += g * dz;
    if (gy && ay.inside) *gy += g * dy;
    if (gx && ax.inside) *gx += g * dx;
}

inline int nearest_index(double p, int n) {
    if (!(p >= 0.0)) return 0;
    if (p >= n - 1) return n - 1;
    return static_cast<int>(std::floor(p + 0.5));
}

/// Derivative of a channel along one axis at one voxel; `stride` is the flat step.
inline double axis_derivative(const double* v, std::size_t idx, int i, int n, std::size_t stride) {
    if (i == 0) return v[idx + stride] - v[idx];
    if (i == n - 1) return v[idx] - v[idx - stride];
    return 0.5 * (v[idx + stride] - v[idx - stride]);
}

inline double det3(const double j[3][3]) {
    return j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
           j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
           j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
}

inline double jacobian_at(const double* disp, Shape3 s, int z, int y, int x) {
    const std::size_t n = s.size();
    const std::size_t idx = s.index(z, y, x);
    const std::size_t strides[3] = {static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
    const int pos[3] = {z, y, x};
    const int len[3] = {s.d, s.h, s.w};
    double j[3][3];
    for (int c = 0; c < 3; ++c) {
        const double* ch = disp + c * n;
        for (int a = 0; a < 3; ++a) {
            j[c][a] = (c == a ? 1.0 : 0.0) + axis_derivative(ch, idx, pos[a], len[a], strides[a]);
        }
    }
    return det3(j);
}

}  // namespace dreg::kernels::detail

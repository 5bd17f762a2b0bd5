#include <benchmark/benchmark.h>

#include <cstdint>
#include <random>
#include <vector>

#include "diffusereg/kernels.hpp"

namespace k = dreg::kernels;
using dreg::Shape3;

namespace {

std::vector<double> noise(std::size_t n, double scale, unsigned seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = nd(gen);
    return v;
}

Shape3 cube(const benchmark::State& st) {
    const int n = static_cast<int>(st.range(0));
    return {n, n, n};
}

template <bool Parallel>
void BM_Warp(benchmark::State& st) {
    const Shape3 s = cube(st);
    const auto img = noise(s.size(), 1.0, 1);
    const auto disp = noise(3 * s.size(), 2.0, 2);
    std::vector<double> out(s.size());
    for (auto _ : st) {
        if constexpr (Parallel) k::warp_trilinear(img, s, disp, out);
        else k::serial::warp_trilinear(img, s, disp, out);
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(s.size()));
}

template <bool Parallel>
void BM_WarpBackward(benchmark::State& st) {
    const Shape3 s = cube(st);
    const auto img = noise(s.size(), 1.0, 1);
    const auto disp = noise(3 * s.size(), 2.0, 2);
    const auto g = noise(s.size(), 1.0, 3);
    std::vector<double> gi(s.size()), gd(3 * s.size());
    for (auto _ : st) {
        if constexpr (Parallel) k::warp_trilinear_backward(img, s, disp, g, gi, gd);
        else k::serial::warp_trilinear_backward(img, s, disp, g, gi, gd);
        benchmark::DoNotOptimize(gd.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(s.size()));
}

template <bool Parallel>
void BM_Jacobian(benchmark::State& st) {
    const Shape3 s = cube(st);
    const auto disp = noise(3 * s.size(), 0.3, 4);
    std::vector<double> out(s.size());
    for (auto _ : st) {
        if constexpr (Parallel) k::jacobian_determinant(disp, s, out);
        else k::serial::jacobian_determinant(disp, s, out);
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(s.size()));
}

template <bool Parallel>
void BM_BoxSum(benchmark::State& st) {
    const Shape3 s = cube(st);
    const int ker = 9;
    const auto in = noise(s.size(), 1.0, 5);
    std::vector<double> out(k::valid_shape(s, ker).size());
    for (auto _ : st) {
        if constexpr (Parallel) k::box_sum_valid(in, s, ker, out);
        else k::serial::box_sum_valid(in, s, ker, out);
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(s.size()));
}

template <bool Parallel>
void BM_Matmul(benchmark::State& st) {
    const int n = static_cast<int>(st.range(0));
    const auto a = noise(static_cast<std::size_t>(n) * n, 1.0, 6);
    const auto b = noise(static_cast<std::size_t>(n) * n, 1.0, 7);
    std::vector<double> c(static_cast<std::size_t>(n) * n);
    for (auto _ : st) {
        if constexpr (Parallel) k::matmul(a.data(), b.data(), c.data(), n, n, n, false);
        else k::serial::matmul(a.data(), b.data(), c.data(), n, n, n, false);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * 2LL * n * n * n);
}

template <bool Parallel>
void BM_Conv3(benchmark::State& st) {
    const Shape3 s = cube(st);
    const int cin = 8, cout = 8;
    const auto x = noise(cin * s.size(), 1.0, 8);
    const auto w = noise(static_cast<std::size_t>(cout) * cin * 27, 0.1, 9);
    const auto b = noise(cout, 0.1, 10);
    std::vector<double> y(cout * s.size());
    for (auto _ : st) {
        if constexpr (Parallel) k::conv3_forward(x.data(), w.data(), b.data(), y.data(), cin, cout, s);
        else k::serial::conv3_forward(x.data(), w.data(), b.data(), y.data(), cin, cout, s);
        benchmark::DoNotOptimize(y.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(s.size()));
}

template <bool Parallel>
void BM_WindowAttention(benchmark::State& st) {
    k::AttentionLayout lay;
    lay.windows = static_cast<int>(st.range(0));
    lay.seq = 3 * 64;
    lay.q_begin = 0;
    lay.q_count = 64;
    lay.heads = 3;
    lay.head_dim = 8;
    lay.scale = 1.0 / std::sqrt(8.0);
    const int c = lay.channels();
    const auto qkv = noise(static_cast<std::size_t>(lay.windows) * lay.seq * 3 * c, 1.0, 11);
    std::vector<double> out(static_cast<std::size_t>(lay.windows) * lay.q_count * c);
    std::vector<double> probs(lay.prob_count());
    for (auto _ : st) {
        if constexpr (Parallel) k::window_attention_forward(lay, qkv.data(), out.data(), probs.data());
        else k::serial::window_attention_forward(lay, qkv.data(), out.data(), probs.data());
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * lay.windows);
}

}  // namespace

BENCHMARK(BM_Warp<false>)->Name("warp/serial")->Arg(32)->Arg(64);
BENCHMARK(BM_Warp<true>)->Name("warp/omp")->Arg(32)->Arg(64);
BENCHMARK(BM_WarpBackward<false>)->Name("warp_backward/serial")->Arg(32)->Arg(64);
BENCHMARK(BM_WarpBackward<true>)->Name("warp_backward/omp")->Arg(32)->Arg(64);
BENCHMARK(BM_Jacobian<false>)->Name("jacobian/serial")->Arg(32)->Arg(64);
BENCHMARK(BM_Jacobian<true>)->Name("jacobian/omp")->Arg(32)->Arg(64);
BENCHMARK(BM_BoxSum<false>)->Name("box_sum9/serial")->Arg(32)->Arg(64);
BENCHMARK(BM_BoxSum<true>)->Name("box_sum9/omp")->Arg(32)->Arg(64);
BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_Conv3<false>)->Name("conv3/serial")->Arg(16)->Arg(32);
BENCHMARK(BM_Conv3<true>)->Name("conv3/omp")->Arg(16)->Arg(32);
BENCHMARK(BM_WindowAttention<false>)->Name("window_attention/serial")->Arg(8)->Arg(64);
BENCHMARK(BM_WindowAttention<true>)->Name("window_attention/omp")->Arg(8)->Arg(64);

BENCHMARK_MAIN();

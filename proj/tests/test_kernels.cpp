#include <doctest.h>

#include <limits>

#include "diffusereg/kernels.hpp"
#include "support.hpp"

using namespace dreg;
using testing::max_abs_diff;

TEST_CASE("parallel warp matches the serial reference") {
    const Shape3 s{5, 6, 7};
    const auto img = testing::randu(s.size(), 1);
    const auto disp = testing::randn(3 * s.size(), 2, 1.5);
    std::vector<double> a(s.size()), b(s.size());
    kernels::warp_trilinear(img, s, disp, a);
    kernels::serial::warp_trilinear(img, s, disp, b);
    CHECK(max_abs_diff(a, b) < 1e-14);

    const auto g = testing::randn(s.size(), 3);
    std::vector<double> gi1(s.size()), gd1(3 * s.size()), gi2(s.size()), gd2(3 * s.size());
    kernels::warp_trilinear_backward(img, s, disp, g, gi1, gd1);
    kernels::serial::warp_trilinear_backward(img, s, disp, g, gi2, gd2);
    CHECK(max_abs_diff(gi1, gi2) < 1e-12);
    CHECK(max_abs_diff(gd1, gd2) < 1e-12);
}

TEST_CASE("warp adjoint satisfies <W x, y> = <x, W^T y>") {
    const Shape3 s{4, 5, 6};
    const auto x = testing::randn(s.size(), 4);
    const auto y = testing::randn(s.size(), 5);
    const auto disp = testing::randn(3 * s.size(), 6, 0.8);
    std::vector<double> wx(s.size()), wty(s.size()), unused;
    kernels::warp_trilinear(x, s, disp, wx);
    kernels::warp_trilinear_backward(x, s, disp, y, wty, {});
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        lhs += wx[i] * y[i];
        rhs += x[i] * wty[i];
    }
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("parallel nearest warp and jacobian match serial") {
    const Shape3 s{6, 5, 4};
    std::vector<std::int32_t> labels(s.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int32_t>(i % 4);
    const auto disp = testing::randn(3 * s.size(), 7, 2.0);
    std::vector<std::int32_t> a(s.size()), b(s.size());
    kernels::warp_nearest(labels, s, disp, a);
    kernels::serial::warp_nearest(labels, s, disp, b);
    CHECK(a == b);
    std::vector<double> ja(s.size()), jb(s.size());
    kernels::jacobian_determinant(disp, s, ja);
    kernels::serial::jacobian_determinant(disp, s, jb);
    CHECK(max_abs_diff(ja, jb) < 1e-12);
}

TEST_CASE("separable box sums match direct sums and their adjoint") {
    const Shape3 s{7, 8, 9};
    const int k = 3;
    const Shape3 v = kernels::valid_shape(s, k);
    const auto x = testing::randn(s.size(), 8);
    std::vector<double> a(v.size()), b(v.size());
    kernels::box_sum_valid(x, s, k, a);
    kernels::serial::box_sum_valid(x, s, k, b);
    CHECK(max_abs_diff(a, b) < 1e-12);

    const auto y = testing::randn(v.size(), 9);
    std::vector<double> ta(s.size()), tb(s.size());
    kernels::box_sum_adjoint(y, s, k, ta);
    kernels::serial::box_sum_adjoint(y, s, k, tb);
    CHECK(max_abs_diff(ta, tb) < 1e-12);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < v.size(); ++i) lhs += a[i] * y[i];
    for (std::size_t i = 0; i < s.size(); ++i) rhs += x[i] * ta[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("matmul variants agree with serial loops") {
    const int m = 7, n = 5, k = 6;
    const auto a = testing::randn(m * k, 10), b = testing::randn(k * n, 11);
    std::vector<double> c1(m * n), c2(m * n);
    kernels::matmul(a.data(), b.data(), c1.data(), m, n, k, false);
    kernels::serial::matmul(a.data(), b.data(), c2.data(), m, n, k, false);
    CHECK(max_abs_diff(c1, c2) < 1e-12);

    const auto at = testing::randn(k * m, 12);
    kernels::matmul_at_b(at.data(), b.data(), c1.data(), m, n, k, false);
    kernels::serial::matmul_at_b(at.data(), b.data(), c2.data(), m, n, k, false);
    CHECK(max_abs_diff(c1, c2) < 1e-12);

    const auto bt = testing::randn(n * k, 13);
    kernels::matmul_a_bt(a.data(), bt.data(), c1.data(), m, n, k, true);
    kernels::serial::matmul_a_bt(a.data(), bt.data(), c2.data(), m, n, k, true);
    CHECK(max_abs_diff(c1, c2) < 1e-12);
}

TEST_CASE("im2col convolution matches the direct loop") {
    const Shape3 s{4, 5, 3};
    const int cin = 2, cout = 3;
    const auto x = testing::randn(cin * s.size(), 14);
    const auto w = testing::randn(cout * cin * 27, 15);
    const auto bias = testing::randn(cout, 16);
    std::vector<double> y1(cout * s.size()), y2(cout * s.size());
    kernels::conv3_forward(x.data(), w.data(), bias.data(), y1.data(), cin, cout, s);
    kernels::serial::conv3_forward(x.data(), w.data(), bias.data(), y2.data(), cin, cout, s);
    CHECK(max_abs_diff(y1, y2) < 1e-12);

    const auto gy = testing::randn(cout * s.size(), 17);
    std::vector<double> gx1(x.size()), gw1(w.size()), gb1(cout), gx2(x.size()), gw2(w.size()), gb2(cout);
    kernels::conv3_backward(x.data(), w.data(), gy.data(), gx1.data(), gw1.data(), gb1.data(), cin, cout, s);
    kernels::serial::conv3_backward(x.data(), w.data(), gy.data(), gx2.data(), gw2.data(), gb2.data(), cin, cout, s);
    CHECK(max_abs_diff(gx1, gx2) < 1e-11);
    CHECK(max_abs_diff(gw1, gw2) < 1e-11);
    CHECK(max_abs_diff(gb1, gb2) < 1e-11);
}

TEST_CASE("windowed attention kernels agree, including masks and bias") {
    kernels::AttentionLayout lay;
    lay.windows = 3;
    lay.seq = 5;
    lay.q_begin = 2;
    lay.q_count = 3;
    lay.heads = 2;
    lay.head_dim = 3;
    lay.scale = 0.5;
    std::vector<std::uint8_t> mask(lay.windows * lay.q_count * lay.seq, 1);
    mask[1] = 0;
    mask[lay.q_count * lay.seq + 4] = 0;
    lay.mask = mask.data();
    lay.mask_window_stride = lay.q_count * lay.seq;
    std::vector<int> bias_index(lay.q_count * lay.seq);
    for (std::size_t i = 0; i < bias_index.size(); ++i) bias_index[i] = i % 3 == 0 ? -1 : static_cast<int>(i % 4);
    const auto table = testing::randn(lay.heads * 4, 18);
    lay.bias_index = bias_index.data();
    lay.bias_table = table.data();
    lay.bias_entries = 4;

    const int c = lay.channels();
    const auto qkv = testing::randn(lay.windows * lay.seq * 3 * c, 19);
    std::vector<double> o1(lay.windows * lay.q_count * c), o2(o1.size()), p1(lay.prob_count()), p2(lay.prob_count());
    kernels::window_attention_forward(lay, qkv.data(), o1.data(), p1.data());
    kernels::serial::window_attention_forward(lay, qkv.data(), o2.data(), p2.data());
    CHECK(max_abs_diff(o1, o2) < 1e-12);
    CHECK(max_abs_diff(p1, p2) < 1e-12);
    CHECK(p1[1] == 0.0);

    const auto g = testing::randn(o1.size(), 20);
    std::vector<double> gq1(qkv.size()), gq2(qkv.size()), gt1(table.size()), gt2(table.size());
    kernels::window_attention_backward(lay, qkv.data(), p1.data(), g.data(), gq1.data(), gt1.data());
    kernels::serial::window_attention_backward(lay, qkv.data(), p2.data(), g.data(), gq2.data(), gt2.data());
    CHECK(max_abs_diff(gq1, gq2) < 1e-12);
    CHECK(max_abs_diff(gt1, gt2) < 1e-12);
}

TEST_CASE("non-finite sample coordinates clamp to the first voxel") {
    const Shape3 s{3, 3, 3};
    std::vector<double> img(s.size());
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i + 1);
    std::vector<double> disp(3 * s.size(), std::numeric_limits<double>::quiet_NaN());
    std::vector<double> out(s.size()), ref(s.size());
    kernels::warp_trilinear(img, s, disp, out);
    kernels::serial::warp_trilinear(img, s, disp, ref);
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(out[i] == 1.0);
        CHECK(ref[i] == 1.0);
    }
    std::vector<std::int32_t> labels(s.size(), 0), lout(s.size(), -1);
    labels[0] = 7;
    kernels::warp_nearest(labels, s, disp, lout);
    for (auto v : lout) CHECK(v == 7);
}

#include <doctest.h>

#include <cmath>

#include "diffusereg/errors.hpp"
#include "diffusereg/network.hpp"
#include "support.hpp"

using namespace dreg;
using ad::Tensor;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig c;
    c.embed_dim = 8;
    c.depths = {2, 1};
    c.num_heads = {2, 4};
    c.window_size = 2;
    c.time_embed_dim = 16;
    return c;
}

WindowTokenBundle random_bundle(int n, int c, std::uint64_t seed) {
    WindowTokenBundle b;
    b.channels = c;
    b.window_tokens = n;
    b.time_token = testing::randn(c, seed);
    b.fixed = testing::randn(n * c, seed + 1);
    b.moving = testing::randn(n * c, seed + 2);
    b.field = testing::randn(n * c, seed + 3);
    return b;
}

FusedAttentionWeights random_weights(int c, int heads, std::uint64_t seed) {
    FusedAttentionWeights w;
    w.qkv_w = ad::constant(c, 3 * c, testing::randn(3 * c * c, seed, 0.5));
    w.qkv_b = ad::constant(1, 3 * c, testing::randn(3 * c, seed + 1, 0.1));
    w.proj_w = ad::constant(c, c, testing::randn(c * c, seed + 2, 0.5));
    w.proj_b = ad::constant(1, c, testing::randn(c, seed + 3, 0.1));
    w.heads = heads;
    return w;
}

}  // namespace

TEST_CASE("config validation and json round trip") {
    DenoiserConfig c;
    c.validate();
    const auto back = DenoiserConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    c.num_heads = {5, 6, 12};
    CHECK_THROWS_AS(c.validate(), ArgumentError);
    CHECK_THROWS_AS(mask_mode_from_string("diagonal"), ArgumentError);
}

TEST_CASE("condition mask at window edge 1") {
    const auto m = build_condition_mask(1, false, 4);
    REQUIRE(m.size() == 4);
    for (auto v : m.allowed) CHECK(v == 1);
}

TEST_CASE("condition mask structure") {
    const int w = 2, n = 8;
    const auto m = build_condition_mask(w, false, 4);
    REQUIRE(m.size() == 3 * n + 1);
    int row_sum = 0;
    for (int j = 0; j < m.size(); ++j) {
        row_sum += m(0, j);
        CHECK(m(j, 0));
    }
    CHECK(row_sum == 3 * n + 1);
    for (int p = 0; p < n; ++p)
        for (int q = 0; q < n; ++q) {
            const int field_p = 1 + 2 * n + p;
            CHECK(m(field_p, 1 + 2 * n + q));
            CHECK(m(field_p, 1 + q) == (p == q));
            CHECK(m(field_p, 1 + n + q) == (p == q));
            CHECK(m(1 + p, 1 + n + q) == (p == q));
        }
    // Relabelling window positions (same permutation for every source) leaves the mask unchanged.
    const std::vector<int> perm{3, 0, 7, 5, 1, 6, 2, 4};
    auto at = [&](int i) { return i == 0 ? 0 : 1 + ((i - 1) / n) * n + perm[(i - 1) % n]; };
    for (int i = 0; i < m.size(); ++i)
        for (int j = 0; j < m.size(); ++j) CHECK(m(i, j) == m(at(i), at(j)));
}

TEST_CASE("shifted condition mask is the AND with the boundary mask") {
    const int n = 8;
    const auto plain = build_condition_mask(2, false, 4);
    const auto shifted = build_condition_mask(2, true, 4);
    int removed = 0;
    for (int i = 0; i < plain.size(); ++i)
        for (int j = 0; j < plain.size(); ++j) {
            if (shifted(i, j)) CHECK(plain(i, j));
            removed += plain(i, j) && !shifted(i, j);
        }
    CHECK(removed > 0);
    int time_sum = 0;
    for (int j = 0; j < shifted.size(); ++j) time_sum += shifted(0, j);
    CHECK(time_sum == 3 * n + 1);
    // The first window never straddles the roll seam.
    CHECK(build_condition_mask(2, true, 4, MaskMode::colocated, 0).allowed == plain.allowed);
    // No shift happens when the grid fits in one window.
    CHECK(build_condition_mask(2, true, 2).allowed == plain.allowed);
}

TEST_CASE("alternative mask modes") {
    const auto none = build_condition_mask(2, false, 4, MaskMode::none);
    for (auto v : none.allowed) CHECK(v == 1);
    const auto band = build_condition_mask(2, false, 4, MaskMode::band);
    const int n = 8;
    CHECK(band(1 + 2 * n, 1));           // field 0 sees fixed 0
    CHECK_FALSE(band(1 + 2 * n, 1 + 5));  // but not fixed 5
}

TEST_CASE("self-only mask reduces attention to the value projection") {
    const int n = 8, c = 6, heads = 2;
    const auto b = random_bundle(n, c, 1);
    const auto w = random_weights(c, heads, 10);
    ConditionAttentionMask self;
    self.window_tokens = n;
    self.allowed.assign(static_cast<std::size_t>(self.size()) * self.size(), 0);
    for (int i = 0; i < self.size(); ++i) self.allowed[static_cast<std::size_t>(i) * self.size() + i] = 1;
    const Tensor out = fused_window_attention(b, self, w);
    REQUIRE(out.rows() == n);
    const Tensor v = ad::linear(ad::constant(n, c, b.field), w.qkv_w, w.qkv_b);
    std::vector<double> values(static_cast<std::size_t>(n) * c);
    for (int p = 0; p < n; ++p)
        for (int k = 0; k < c; ++k) values[p * c + k] = v.value()[p * 3 * c + 2 * c + k];
    const Tensor expect = ad::linear(ad::constant(n, c, values), w.proj_w, w.proj_b);
    CHECK(testing::max_abs_diff(out.value(), expect.value()) < 1e-12);
}

TEST_CASE("masked positions receive exactly zero weight") {
    const int n = 8, c = 6, heads = 3;
    const auto b = random_bundle(n, c, 2);
    const auto w = random_weights(c, heads, 20);
    const auto mask = build_condition_mask(2, true, 4);
    const auto probs = fused_attention_weights(b, mask, w);
    const int l = mask.size();
    REQUIRE(probs.size() == static_cast<std::size_t>(heads) * l * l);
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < l; ++i) {
            double row = 0.0;
            for (int j = 0; j < l; ++j) {
                const double p = probs[(static_cast<std::size_t>(h) * l + i) * l + j];
                if (!mask(i, j)) CHECK(p == 0.0);
                row += p;
            }
            CHECK(row == doctest::Approx(1.0));
        }
}

TEST_CASE("image tokens act only through masked-in positions") {
    const int n = 8, c = 6;
    auto b = random_bundle(n, c, 3);
    const auto w = random_weights(c, 2, 30);
    ConditionAttentionMask no_images = build_condition_mask(2, false, 4);
    for (int i = 0; i < no_images.size(); ++i)
        for (int j = 1; j <= 2 * n; ++j) {
            no_images.allowed[static_cast<std::size_t>(i) * no_images.size() + j] = 0;
            no_images.allowed[static_cast<std::size_t>(j) * no_images.size() + i] = i == j;
        }
    const auto colocated = build_condition_mask(2, false, 4);
    auto zeroed = b;
    std::fill(zeroed.fixed.begin(), zeroed.fixed.end(), 0.0);
    std::fill(zeroed.moving.begin(), zeroed.moving.end(), 0.0);
    CHECK(fused_window_attention(b, no_images, w).value() == fused_window_attention(zeroed, no_images, w).value());
    CHECK(fused_window_attention(b, colocated, w).value() != fused_window_attention(zeroed, colocated, w).value());
}

TEST_CASE("bundle and mask sizes must agree") {
    const auto b = random_bundle(8, 6, 4);
    CHECK_THROWS_AS(fused_window_attention(b, build_condition_mask(1, false, 4), random_weights(6, 2, 40)), DimensionError);
}

TEST_CASE("time embedding") {
    const auto a = time_embedding(17, 96);
    CHECK(a.size() == 96);
    CHECK(a == time_embedding(17, 96));
    CHECK(a != time_embedding(18, 96));
    CHECK(a[0] == doctest::Approx(std::sin(17.0)));
    CHECK(a[48] == doctest::Approx(std::cos(17.0)));
}

TEST_CASE("time-shift resblock starts unconditioned and separates timesteps once trained") {
    Denoiser net(tiny_config(), 3);
    const Shape3 s{4, 4, 4};
    const Tensor feat = ad::constant(16, 64, testing::randn(16 * 64, 5));
    ad::NoGradGuard guard;
    const auto a = net.time_shift_resblock("dec.bott", feat, net.time_features(10), s);
    const auto b = net.time_shift_resblock("dec.bott", feat, net.time_features(900), s);
    CHECK(a.value() == b.value());
    auto& shift = net.params().at("dec.bott.shift.w").mutable_value();
    shift = testing::randn(shift.size(), 6, 0.3);
    const auto c = net.time_shift_resblock("dec.bott", feat, net.time_features(10), s);
    const auto d = net.time_shift_resblock("dec.bott", feat, net.time_features(900), s);
    CHECK(c.value() != d.value());
}

TEST_CASE("without time resblocks the decoder ignores the shift path") {
    auto cfg = tiny_config();
    cfg.time_resblocks = false;
    Denoiser net(cfg, 3);
    CHECK_FALSE(net.params().contains("dec.bott.shift.w"));
}

TEST_CASE("image encoder shapes and purity") {
    Denoiser net(DenoiserConfig{}, 1);
    const Shape3 s{16, 16, 16};
    Volume img(s, testing::randu(s.size(), 7));
    ad::NoGradGuard guard;
    const auto feats = net.encode_image(img);
    REQUIRE(feats.size() == 3);
    CHECK(feats[0].rows() == 512);
    CHECK(feats[0].cols() == 24);
    CHECK(feats[1].rows() == 64);
    CHECK(feats[1].cols() == 48);
    CHECK(feats[2].rows() == 8);
    CHECK(feats[2].cols() == 96);
    CHECK(net.encode_image(img)[2].value() == feats[2].value());
    for (const auto& f : net.encode_image(Volume(s))) CHECK(std::all_of(f.value().begin(), f.value().end(), [](double v) { return std::isfinite(v); }));
}

TEST_CASE("denoise shape contract, padding and errors") {
    Denoiser net(DenoiserConfig{}, 2);
    const Shape3 s{16, 16, 16};
    Volume f(s, testing::randu(s.size(), 8)), m(s, testing::randu(s.size(), 9));
    DeformationField phi(s, testing::randn(3 * s.size(), 10), true);
    const auto eps = net.denoise(f, m, phi, 500);
    CHECK(eps.shape == s);
    CHECK(eps.normalized);
    CHECK(eps.all_finite());

    const Shape3 odd{6, 9, 11};
    Volume fo(odd, testing::randu(odd.size(), 11));
    DeformationField po(odd, testing::randn(3 * odd.size(), 12), true);
    CHECK(net.denoise(fo, fo, po, 3).shape == odd);

    CHECK_THROWS_AS(net.denoise(f, fo, phi, 3), DimensionError);
    DeformationField physical(s);
    CHECK_THROWS_AS(net.denoise(f, m, physical, 3), StateError);
}

TEST_CASE("batch elements are independent") {
    Denoiser net(tiny_config(), 4);
    const Shape3 s{8, 8, 8};
    Volume f1(s, testing::randu(s.size(), 1)), f2(s, testing::randu(s.size(), 2));
    DeformationField p1(s, testing::randn(3 * s.size(), 3), true), p2(s, testing::randn(3 * s.size(), 4), true);
    const auto ab = net.denoise_batch({&f1, &f2}, {&f2, &f1}, {&p1, &p2}, {5, 600});
    const auto ba = net.denoise_batch({&f2, &f1}, {&f1, &f2}, {&p2, &p1}, {600, 5});
    CHECK(ab[0].disp == ba[1].disp);
    CHECK(ab[1].disp == ba[0].disp);
}

TEST_CASE("noise-loss gradient with respect to weights matches finite differences") {
    Denoiser net(DenoiserConfig{}, 5);
    const Shape3 s{8, 8, 8};
    Volume f(s, testing::randu(s.size(), 1)), m(s, testing::randu(s.size(), 2));
    DeformationField phi(s, testing::randn(3 * s.size(), 3), true);
    const auto eps = ad::constant(3, 512, testing::randn(1536, 4));
    auto loss = [&]() { return ad::mse(net.forward(f, m, phi, 321), eps); };
    net.params().zero_grad();
    ad::backward(loss());
    dreg::Rng rng(6);
    double worst = 0.0;
    for (const char* name : {"head.w", "dec.out.conv1.w", "bb.s0.b1.qkv.w", "bb.s1.b0.rpb", "enc.s0.b0.fc1.w", "time.fc2.w",
                             "bb.s2.b1.fc2.w", "dec.in.shift.w"}) {
        auto& p = net.params().at(name);
        for (int k = 0; k < 2; ++k) {
            const int i = rng.uniform_int(0, static_cast<int>(p.size()) - 1);
            const double analytic = p.grad()[i];
            const double orig = p.value()[i];
            const double h = 1e-5;
            p.mutable_value()[i] = orig + h;
            double fp, fm;
            {
                ad::NoGradGuard g;
                fp = loss().item();
                p.mutable_value()[i] = orig - h;
                fm = loss().item();
            }
            p.mutable_value()[i] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double err = testing::rel_err(analytic, numeric, 1e-6);
            INFO(name << "[" << i << "] analytic " << analytic << " numeric " << numeric);
            CHECK(err < 1e-3);
            worst = std::max(worst, err);
        }
    }
    MESSAGE("worst relative gradient error " << worst);
}

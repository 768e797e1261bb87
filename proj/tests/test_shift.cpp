#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "strwkv/autodiff.hpp"
#include "strwkv/shift.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace strwkv;
using oracles::max_abs_diff;

TEST_CASE("uni_shift mix=0 identity, mix=1 delay") {
    Rng rng(60);
    Tensord seq = rng.uniform_tensor({5, 3}, -2, 2);
    CHECK(max_abs_diff(uni_shift(seq, Tensord({3}, 0.0)), seq) == doctest::Approx(0.0));

    Tensord delayed = uni_shift(seq, Tensord({3}, 1.0));
    for (int c = 0; c < 3; ++c) {
        CHECK(delayed(0, c) == doctest::Approx(0.0));
        for (int t = 1; t < 5; ++t) CHECK(delayed(t, c) == doctest::Approx(seq(t - 1, c)));
    }
}

TEST_CASE("uni_shift hand case: mix=0.5, seq=[2,4] -> [1,3]") {
    Tensord seq({2, 1}, {2.0, 4.0});
    Tensord out = uni_shift(seq, Tensord({1}, 0.5));
    CHECK(out(0, 0) == doctest::Approx(1.0));
    CHECK(out(1, 0) == doctest::Approx(3.0));
}

TEST_CASE("uni_shift param struct validates the mix range") {
    Tensord seq({3, 2});
    UniShiftParams ok{Tensord({2}, 0.5)};
    CHECK_NOTHROW(uni_shift(seq, ok));
    UniShiftParams bad{Tensord({2}, 1.5)};
    CHECK_THROWS_AS(uni_shift(seq, bad), std::invalid_argument);
}

TEST_CASE("quad_shift zero input and hot pixel") {
    Tensord zero({4, 3, 3});
    CHECK(max_abs_diff(quad_shift(zero), zero) == doctest::Approx(0.0));

    // quarter 0 shifts left: a hot pixel at (1,1) lands at (1,0)
    Tensord x({4, 3, 3});
    x(0, 1, 1) = 5.0;
    Tensord y = quad_shift(x);
    CHECK(y(0, 1, 0) == doctest::Approx(5.0));
    CHECK(y(0, 1, 1) == doctest::Approx(0.0));

    // quarter 1 shifts right, 2 up, 3 down
    Tensord x2({4, 3, 3});
    x2(1, 1, 1) = 1.0;
    x2(2, 1, 1) = 2.0;
    x2(3, 1, 1) = 3.0;
    Tensord y2 = quad_shift(x2);
    CHECK(y2(1, 1, 2) == doctest::Approx(1.0));
    CHECK(y2(2, 0, 1) == doctest::Approx(2.0));
    CHECK(y2(3, 2, 1) == doctest::Approx(3.0));
}

TEST_CASE("quad_shift opposite quarters compose to identity on the interior") {
    Rng rng(61);
    Tensord x = rng.uniform_tensor({4, 5, 5}, -1, 1);
    Tensord once = quad_shift(x);
    // move quarter-1 output (right-shifted) into quarter 0 (left shift) and
    // re-apply; interior pixels must return to their origin
    Tensord swap({4, 5, 5});
    for (int64_t y = 0; y < 5; ++y)
        for (int64_t xx = 0; xx < 5; ++xx) swap(0, y, xx) = once(1, y, xx);
    Tensord twice = quad_shift(swap);
    for (int64_t y = 0; y < 5; ++y)
        for (int64_t xx = 1; xx < 4; ++xx)
            CHECK(twice(0, y, xx) == doctest::Approx(x(1, y, xx)));
}

TEST_CASE("quad_shift rejects channel counts not divisible by 4") {
    CHECK_THROWS_AS(quad_shift(Tensord({3, 2, 2})), std::invalid_argument);
}

TEST_CASE("omni_shift center-one kernels are identity") {
    Rng rng(62);
    Tensord x = rng.uniform_tensor({3, 4, 4}, -2, 2);
    auto p = make_deform_params(3);
    CHECK(max_abs_diff(omni_shift(x, p.depthwise), x) == doctest::Approx(0.0));
}

TEST_CASE("omni_shift equals deform_shift with zero offsets bitwise") {
    Rng rng(63);
    Tensord x = rng.uniform_tensor({3, 5, 5}, -2, 2);
    auto p = make_deform_params(3);
    p.depthwise = rng.uniform_tensor({3, 3, 3}, -1, 1);  // general kernel, zero predictor
    Tensord via_omni = omni_shift(x, p.depthwise);
    Tensord via_deform = deform_shift(x, p);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(via_omni[i] == via_deform[i]);
}

TEST_CASE("omni_shift matches depthwise loop oracle") {
    Rng rng(64);
    Tensord x = rng.uniform_tensor({2, 6, 5}, -2, 2);
    Tensord kern = rng.uniform_tensor({2, 3, 3}, -1, 1);
    CHECK(oracles::max_abs_diff(omni_shift(x, kern), oracles::depthwise_loop(x, kern)) < 1e-6);
}

TEST_CASE("predict_offsets: zero-initialized predictor gives zero offsets") {
    Rng rng(65);
    Tensord x = rng.uniform_tensor({3, 4, 4}, -2, 2);
    auto p = make_deform_params(3);
    Tensord off = predict_offsets(x, p);
    CHECK(off.shape() == Shape{18, 4, 4});
    CHECK(max_abs_diff(off, Tensord({18, 4, 4})) == doctest::Approx(0.0));

    p.predictor_w = rng.uniform_tensor({18, 3, 3, 3}, -0.1, 0.1);
    Tensord off2 = predict_offsets(x, p);
    ensure_finite(off2, "offsets");
    Tensord off2_scaled = predict_offsets(x, [&] {
        auto q = p;
        q.offset_scale = 2.0;
        return q;
    }());
    CHECK(max_abs_diff(off2_scaled, scale(off2, 2.0)) < 1e-12);
}

TEST_CASE("deform_shift at initialization is the identity map") {
    Rng rng(66);
    Tensord x = rng.uniform_tensor({4, 5, 5}, -2, 2);
    auto p = make_deform_params(4);
    CHECK(max_abs_diff(deform_shift(x, p), x) == doctest::Approx(0.0));
}

TEST_CASE("deform_shift uniform (+0.5, 0) offset on a vertical ramp averages rows") {
    // image value = row index; identity kernel; offset +0.5 in y at every tap
    const int64_t H = 4, W = 4;
    Tensord x({1, H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) x(0, y, xx) = static_cast<double>(y);
    auto p = make_deform_params(1);
    Tensord off({18, H, W});
    for (int n = 0; n < 9; ++n)
        for (int64_t i = 0; i < H * W; ++i) off[(2 * n) * H * W + i] = 0.5;
    Tensord y = depthwise_sample(x, off, p.depthwise);
    for (int64_t yy = 0; yy < H - 1; ++yy)
        for (int64_t xx = 0; xx < W; ++xx)
            CHECK(y(0, yy, xx) == doctest::Approx(0.5 * (x(0, yy, xx) + x(0, yy + 1, xx))));
}

TEST_CASE("all four mechanisms are linear in x for fixed parameters") {
    Rng rng(67);
    const double a = 1.7, b = -0.6;
    Tensord x = rng.uniform_tensor({4, 4, 4}, -1, 1);
    Tensord y = rng.uniform_tensor({4, 4, 4}, -1, 1);
    Tensord comb = add(scale(x, a), scale(y, b));

    Tensord mix = rng.uniform_tensor({4}, 0, 1);
    Tensord xs = x.reshaped({16, 4}), ys = y.reshaped({16, 4}), cs = comb.reshaped({16, 4});
    CHECK(max_abs_diff(uni_shift(cs, mix),
                       add(scale(uni_shift(xs, mix), a), scale(uni_shift(ys, mix), b))) < 1e-6);

    CHECK(max_abs_diff(quad_shift(comb), add(scale(quad_shift(x), a), scale(quad_shift(y), b))) <
          1e-6);

    Tensord kern = rng.uniform_tensor({4, 3, 3}, -1, 1);
    CHECK(max_abs_diff(omni_shift(comb, kern),
                       add(scale(omni_shift(x, kern), a), scale(omni_shift(y, kern), b))) < 1e-6);

    // deform with offsets held fixed (not re-predicted)
    Tensord off = rng.uniform_tensor({18, 4, 4}, -0.8, 0.8);
    CHECK(max_abs_diff(depthwise_sample(comb, off, kern),
                       add(scale(depthwise_sample(x, off, kern), a),
                           scale(depthwise_sample(y, off, kern), b))) < 1e-6);
}

TEST_CASE("deform_shift backward matches finite differences on 1x4x4") {
    ensure_builtin_customs();
    Rng rng(68);
    for (int trial = 0; trial < 20; ++trial) {
        Tensord x0 = rng.uniform_tensor({1, 4, 4}, -1, 1);
        auto p = make_deform_params(1);
        // keep every sampling position's fractional part inside (0.1, 0.4):
        // bilinear is non-differentiable at integer coordinates, so finite
        // differences must not straddle them
        p.predictor_w = rng.uniform_tensor({18, 1, 3, 3}, -0.005, 0.005);
        p.predictor_b = rng.uniform_tensor({18}, 0.15, 0.35);
        p.depthwise = rng.uniform_tensor({1, 3, 3}, -1, 1);
        Tensord probe = rng.uniform_tensor({1, 4, 4}, -1, 1);
        Tensord scalev({1}, 1.0);

        auto eval = [&](const Tensord& x, const Tensord& pw, const Tensord& pb,
                        const Tensord& kd) {
            Tape t;
            Var y = t.custom("deform_shift", {t.leaf(x), t.leaf(pw), t.leaf(pb), t.leaf(kd),
                                              t.leaf(scalev, false)});
            return t.value(t.sum(t.mul(y, t.leaf(probe, false))))[0];
        };

        Tape t;
        Var x = t.leaf(x0, true), pw = t.leaf(p.predictor_w, true), pb = t.leaf(p.predictor_b, true),
            kd = t.leaf(p.depthwise, true);
        Var y = t.custom("deform_shift", {x, pw, pb, kd, t.leaf(scalev, false)});
        t.backward(t.sum(t.mul(y, t.leaf(probe, false))));

        CHECK(gradcheck::check_against_fd(
                  [&](const Tensord& xt) { return eval(xt, p.predictor_w, p.predictor_b, p.depthwise); },
                  x0, t.grad(x)) < 1e-4);
        CHECK(gradcheck::check_against_fd(
                  [&](const Tensord& pwt) { return eval(x0, pwt, p.predictor_b, p.depthwise); },
                  p.predictor_w, t.grad(pw)) < 1e-4);
        CHECK(gradcheck::check_against_fd(
                  [&](const Tensord& pbt) { return eval(x0, p.predictor_w, pbt, p.depthwise); },
                  p.predictor_b, t.grad(pb)) < 1e-4);
        CHECK(gradcheck::check_against_fd(
                  [&](const Tensord& kdt) { return eval(x0, p.predictor_w, p.predictor_b, kdt); },
                  p.depthwise, t.grad(kd)) < 1e-4);
    }
}

TEST_CASE("offset gradients wrt predictor weights match finite differences") {
    Rng rng(69);
    Tensord x0 = rng.uniform_tensor({2, 4, 4}, -1, 1);
    auto p = make_deform_params(2);
    p.predictor_w = rng.uniform_tensor({18, 2, 3, 3}, -0.1, 0.1);
    Tensord probe = rng.uniform_tensor({18, 4, 4}, -1, 1);

    // offsets are a conv2d; check its weight gradient through the tape
    Tape t;
    Var xv = t.leaf(x0, false);
    Var pwv = t.leaf(p.predictor_w, true);
    Var pbv = t.leaf(p.predictor_b, true);
    Var off = t.conv2d(xv, pwv, pbv, 1, 1);
    t.backward(t.sum(t.mul(off, t.leaf(probe, false))));

    auto eval = [&](const Tensord& pwt) {
        auto q = p;
        q.predictor_w = pwt;
        Tensord o = predict_offsets(x0, q);
        double acc = 0;
        for (int64_t i = 0; i < o.numel(); ++i) acc += o[i] * probe[i];
        return acc;
    };
    CHECK(gradcheck::check_against_fd(eval, p.predictor_w, t.grad(pwv)) < 1e-4);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "strwkv/train.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace strwkv;

namespace {
struct ToyParams {
    Param a, b;
    ParamRegistry reg;
    ToyParams() {
        a.value = Tensord({3}, {1.0, -2.0, 0.5});
        b.value = Tensord({2}, {4.0, 4.0});
        reg.add(a, "a");
        reg.add(b, "b");
    }
};
}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ToyParams tp;
    AdamState st;
    st.init(tp.reg);
    std::vector<Tensord> grads{Tensord({3}), Tensord({2})};
    Tensord a0 = tp.a.value, b0 = tp.b.value;
    adam_step(tp.reg, grads, st);
    CHECK(oracles::max_abs_diff(tp.a.value, a0) == doctest::Approx(0.0));
    CHECK(oracles::max_abs_diff(tp.b.value, b0) == doctest::Approx(0.0));
}

TEST_CASE("adam: first step with constant gradient moves by about lr") {
    ToyParams tp;
    AdamState st;
    st.lr = 1e-3;
    st.init(tp.reg);
    std::vector<Tensord> grads{Tensord({3}, 0.7), Tensord({2}, -0.3)};
    Tensord a0 = tp.a.value, b0 = tp.b.value;
    adam_step(tp.reg, grads, st);
    for (int i = 0; i < 3; ++i)
        CHECK(tp.a.value[i] == doctest::Approx(a0[i] - st.lr).epsilon(1e-6));
    for (int i = 0; i < 2; ++i)
        CHECK(tp.b.value[i] == doctest::Approx(b0[i] + st.lr).epsilon(1e-6));
}

TEST_CASE("adam: two steps with fixed gradient match the hand-unrolled recurrence") {
    ToyParams tp;
    AdamState st;
    st.lr = 0.01;
    st.init(tp.reg);
    const double g = 0.5;
    std::vector<Tensord> grads{Tensord({3}, g), Tensord({2}, g)};

    double p = tp.a.value[0];
    double m = 0, v = 0;
    for (int step = 1; step <= 2; ++step) {
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, step));
        const double vhat = v / (1.0 - std::pow(0.999, step));
        p -= st.lr * mhat / (std::sqrt(vhat) + 1e-8);
        adam_step(tp.reg, grads, st);
        CHECK(tp.a.value[0] == doctest::Approx(p).epsilon(1e-12));
    }
}

TEST_CASE("adam: shape mismatch is rejected") {
    ToyParams tp;
    AdamState st;
    st.init(tp.reg);
    std::vector<Tensord> bad{Tensord({3}), Tensord({5})};
    CHECK_THROWS_AS(adam_step(tp.reg, bad, st), std::invalid_argument);
}

TEST_CASE("clip_global_norm only rescales above the threshold") {
    std::vector<Tensord> grads{Tensord({2}, {3.0, 4.0})};  // norm 5
    clip_global_norm(grads, 1.0);
    CHECK(std::sqrt(grads[0][0] * grads[0][0] + grads[0][1] * grads[0][1]) ==
          doctest::Approx(1.0));
    std::vector<Tensord> small{Tensord({2}, {0.3, 0.4})};  // norm 0.5
    clip_global_norm(small, 1.0);
    CHECK(small[0][0] == doctest::Approx(0.3));
}

TEST_CASE("train_toy: steps=0 gives the single initial loss") {
    Tensord c = make_synthetic_image(16, 16, 200);
    Tensord s = make_synthetic_image(16, 16, 201);
    TinyFeatureNet fe;
    TrainResult r = train_toy(tiny_config(), c, s, 0, 7, fe);
    CHECK(r.curve.size() == 1);
    CHECK(r.curve[0] > 0.0);
}

TEST_CASE("train_toy: lr=0 keeps the loss constant") {
    Tensord c = make_synthetic_image(16, 16, 202);
    Tensord s = make_synthetic_image(16, 16, 203);
    TinyFeatureNet fe;
    TrainResult r = train_toy(tiny_config(), c, s, 2, 7, fe, {}, 0.0);
    REQUIRE(r.curve.size() == 3);
    CHECK(r.curve[1] == r.curve[0]);
    CHECK(r.curve[2] == r.curve[0]);
}

TEST_CASE("train_toy: identical seeds give bitwise identical curves") {
    Tensord c = make_synthetic_image(16, 16, 204);
    Tensord s = make_synthetic_image(16, 16, 205);
    TinyFeatureNet fe;
    TrainResult r1 = train_toy(tiny_config(), c, s, 4, 99, fe);
    TrainResult r2 = train_toy(tiny_config(), c, s, 4, 99, fe);
    REQUIRE(r1.curve.size() == r2.curve.size());
    for (size_t i = 0; i < r1.curve.size(); ++i) CHECK(r1.curve[i] == r2.curve[i]);
    CHECK(r1.curve.back() < r1.curve.front());
}

TEST_CASE("train_toy: loss decreases over a short run") {
    Tensord c = make_synthetic_image(16, 16, 206);
    Tensord s = make_synthetic_image(16, 16, 207);
    TinyFeatureNet fe;
    TrainResult r = train_toy(tiny_config(), c, s, 10, 11, fe);
    CHECK(r.curve.back() < 0.95 * r.curve.front());
    for (double v : r.curve) CHECK(std::isfinite(v));
}

TEST_CASE("train_toy: divergent learning rate aborts with a diagnostic") {
    Tensord c = make_synthetic_image(16, 16, 208);
    Tensord s = make_synthetic_image(16, 16, 209);
    TinyFeatureNet fe;
    CHECK_THROWS_AS(train_toy(tiny_config(), c, s, 6, 13, fe, {}, 1e5), std::runtime_error);
}

TEST_CASE("train_toy rejects non-toy configurations") {
    Tensord c = make_synthetic_image(16, 16, 210);
    TinyFeatureNet fe;
    ModelConfig big = tiny_config();
    big.base_width = 16;
    CHECK_THROWS_AS(train_toy(big, c, c, 1, 1, fe), std::invalid_argument);
    Tensord huge = make_synthetic_image(80, 80, 211);
    CHECK_THROWS_AS(train_toy(tiny_config(), huge, huge, 1, 1, fe), std::invalid_argument);
}

TEST_CASE("full toy-model loss gradients match finite differences on a parameter slice") {
    Tensord c = make_synthetic_image(16, 16, 212);
    Tensord s = make_synthetic_image(16, 16, 213);
    TinyFeatureNet fe;
    ModelConfig cfg = tiny_config();
    cfg.init_seed = 31;
    StyleRwkvModel model(cfg);

    // move deform predictors off integer-coordinate kinks (finite differences
    // are invalid exactly there)
    Rng nrng(214);
    auto& reg = model.params();
    for (size_t i = 0; i < reg.size(); ++i) {
        Param& p = reg.param(i);
        if (p.value.ndim() == 1 && p.value.numel() == kOffsetChannels)
            p.value = nrng.uniform_tensor({kOffsetChannels}, 0.15, 0.35);
        if (p.value.ndim() == 4 && p.value.dim(0) == kOffsetChannels)
            p.value = nrng.uniform_tensor(p.value.shape(), -0.002, 0.002);
    }

    auto loss_now = [&]() {
        Tape t;
        Binding b = model.bind(t, false);
        Var vc = t.leaf(c, false), vs = t.leaf(s, false);
        Var io = model.forward(t, b, vc, vs);
        Var icc = model.forward(t, b, vc, vc);
        Var iss = model.forward(t, b, vs, vs);
        Var lc = content_loss(t, io, vc, fe);
        Var ls = style_loss(t, io, vs, fe);
        auto [id1, id2] = identity_losses(t, icc, vc, iss, vs, fe);
        return t.value(total_loss(t, lc, ls, id1, id2, {}))[0];
    };

    Tape t;
    Binding b = model.bind(t, true);
    Var vc = t.leaf(c, false), vs = t.leaf(s, false);
    Var io = model.forward(t, b, vc, vs);
    Var icc = model.forward(t, b, vc, vc);
    Var iss = model.forward(t, b, vs, vs);
    Var lc = content_loss(t, io, vc, fe);
    Var ls = style_loss(t, io, vs, fe);
    auto [id1, id2] = identity_losses(t, icc, vc, iss, vs, fe);
    t.backward(total_loss(t, lc, ls, id1, id2, {}));

    // one coordinate from four parameters spread across the model
    const size_t picks[4] = {0, reg.size() / 3, 2 * reg.size() / 3, reg.size() - 1};
    for (size_t pi : picks) {
        Param& p = reg.param(pi);
        const double analytic = t.grad(b.vars[static_cast<size_t>(p.idx)])[0];
        const double h = 1e-5;
        const double orig = p.value[0];
        p.value[0] = orig + h;
        const double fp = loss_now();
        p.value[0] = orig - h;
        const double fm = loss_now();
        p.value[0] = orig;
        CHECK(gradcheck::rel_err(analytic, (fp - fm) / (2 * h)) < 1e-3);
    }
}

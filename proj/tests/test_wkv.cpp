#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "strwkv/wkv.hpp"
#include "support/dual.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace strwkv;

namespace {

struct RandomInstance {
    Tensord k, v, w, u;
};

RandomInstance random_instance(Rng& rng, int64_t T, int64_t C) {
    RandomInstance in;
    in.k = rng.uniform_tensor({T, C}, -1.5, 1.5);
    in.v = rng.uniform_tensor({T, C}, -2, 2);
    in.w = rng.uniform_tensor({C}, 0.0, 2.0);
    in.u = rng.uniform_tensor({C}, -1, 1);
    return in;
}

// |scan - naive| relative to the larger of |naive| and the channel's value
// scale (outputs are convex combinations of v, so that is the natural scale).
template <class S>
double scan_vs_naive_err(const Tensor<S>& scan, const Tensor<S>& naive, const Tensor<S>& v) {
    const int64_t T = naive.dim(0), C = naive.dim(1);
    double worst = 0;
    for (int64_t c = 0; c < C; ++c) {
        double vmax = 0;
        for (int64_t t = 0; t < T; ++t) vmax = std::max(vmax, std::abs(static_cast<double>(v(t, c))));
        for (int64_t t = 0; t < T; ++t) {
            const double d = std::abs(static_cast<double>(scan(t, c)) - static_cast<double>(naive(t, c)));
            worst = std::max(worst, d / std::max(std::abs(static_cast<double>(naive(t, c))), vmax));
        }
    }
    return worst;
}

// The naive formula over one channel, generic in the number type so the dual
// oracle can differentiate it.
template <class Num>
std::vector<Num> naive_channel(const std::vector<Num>& k, const std::vector<Num>& v, Num w, Num u) {
    const int64_t T = static_cast<int64_t>(k.size());
    std::vector<Num> out(static_cast<size_t>(T));
    const Num invT(1.0 / static_cast<double>(T));
    for (int64_t t = 0; t < T; ++t) {
        Num num(0.0), den(0.0);
        for (int64_t i = 0; i < T; ++i) {
            Num x = i == t ? dual::exp(u + k[static_cast<size_t>(t)])
                           : dual::exp(Num(-static_cast<double>(std::llabs(t - i) - 1)) * invT * w +
                                       k[static_cast<size_t>(i)]);
            num = num + x * v[static_cast<size_t>(i)];
            den = den + x;
        }
        out[static_cast<size_t>(t)] = num / den;
    }
    return out;
}

}  // namespace

TEST_CASE("T=1 returns v for any parameters") {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        auto in = random_instance(rng, 1, 4);
        WkvSequence seq{in.k, in.v};
        WkvParams p{in.w, in.u};
        CHECK(oracles::max_abs_diff(bi_wkv_naive(seq, p), in.v) < 1e-14);
        CHECK(oracles::max_abs_diff(bi_wkv_scan(seq, p), in.v) < 1e-14);
    }
}

TEST_CASE("T=2 hand case: w=0, u=0, k=0, v=(1,3) -> (2,2)") {
    Tensord k({2, 1}), v({2, 1}, {1.0, 3.0}), w({1}), u({1});
    WkvSequence seq{k, v};
    WkvParams p{w, u};
    Tensord y = bi_wkv_naive(seq, p);
    CHECK(y(0, 0) == doctest::Approx(2.0));
    CHECK(y(1, 0) == doctest::Approx(2.0));
    Tensord ys = bi_wkv_scan(seq, p);
    CHECK(ys(0, 0) == doctest::Approx(2.0));
    CHECK(ys(1, 0) == doctest::Approx(2.0));
}

TEST_CASE("scan equals naive over random instances, 64-bit") {
    Rng rng(32);
    double worst = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const int64_t T = rng.uniform_int(1, 256);
        const int64_t C = rng.uniform_int(1, 16);
        auto in = random_instance(rng, T, C);
        WkvSequence seq{in.k, in.v};
        WkvParams p{in.w, in.u};
        worst = std::max(worst, scan_vs_naive_err(bi_wkv_scan(seq, p), bi_wkv_naive(seq, p), in.v));
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("scan equals naive in 32-bit") {
    Rng rng(33);
    double worst = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const int64_t T = rng.uniform_int(1, 256);
        const int64_t C = rng.uniform_int(1, 16);
        auto in = random_instance(rng, T, C);
        Tensorf k = in.k.cast<float>(), v = in.v.cast<float>(), w = in.w.cast<float>(),
                u = in.u.cast<float>();
        worst = std::max(worst,
                         scan_vs_naive_err(bi_wkv_scan_t(k, v, w, u), bi_wkv_naive_t(k, v, w, u), v));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("stability: scan survives large key magnitudes that overflow exp") {
    Tensord k({3, 1}, {200.0, -200.0, 150.0});
    Tensord v({3, 1}, {1.0, 2.0, 3.0});
    Tensord w({1}, 0.5), u({1}, 0.3);
    WkvSequence seq{k, v};
    WkvParams p{w, u};
    Tensord y = bi_wkv_scan(seq, p);
    Tensord yn = bi_wkv_naive(seq, p);
    CHECK(scan_vs_naive_err(y, yn, v) < 1e-10);
}

TEST_CASE("convexity: outputs bounded by per-channel min/max of v") {
    Rng rng(34);
    auto in = random_instance(rng, 64, 8);
    WkvSequence seq{in.k, in.v};
    WkvParams p{in.w, in.u};
    Tensord y = bi_wkv_naive(seq, p);
    for (int64_t c = 0; c < 8; ++c) {
        double lo = 1e30, hi = -1e30;
        for (int64_t t = 0; t < 64; ++t) {
            lo = std::min(lo, in.v(t, c));
            hi = std::max(hi, in.v(t, c));
        }
        for (int64_t t = 0; t < 64; ++t) {
            CHECK(y(t, c) >= lo - 1e-12);
            CHECK(y(t, c) <= hi + 1e-12);
        }
    }
}

TEST_CASE("key shift invariance: k + per-channel constant leaves output unchanged") {
    Rng rng(35);
    auto in = random_instance(rng, 48, 4);
    WkvSequence seq{in.k, in.v};
    WkvParams p{in.w, in.u};
    Tensord base = bi_wkv_scan(seq, p);
    Tensord shift = rng.uniform_tensor({4}, -3, 3);
    Tensord k2 = in.k;
    for (int64_t t = 0; t < 48; ++t)
        for (int64_t c = 0; c < 4; ++c) k2(t, c) += shift[c];
    WkvSequence seq2{k2, in.v};
    CHECK(oracles::max_abs_diff(bi_wkv_scan(seq2, p), base) < 1e-6);
}

TEST_CASE("rejects negative decay and mismatched shapes") {
    Tensord k({2, 2}), v({2, 2}), u({2});
    Tensord wneg({2}, {-0.5, 1.0});
    CHECK_THROWS_AS(bi_wkv_scan(WkvSequence{k, v}, WkvParams{wneg, u}), std::invalid_argument);
    Tensord vbad({3, 2});
    Tensord w({2});
    CHECK_THROWS_AS(bi_wkv_scan(WkvSequence{k, vbad}, WkvParams{w, u}), std::invalid_argument);
}

TEST_CASE("backward matches dual-number differentiation of the naive formula") {
    Rng rng(36);
    for (int trial = 0; trial < 6; ++trial) {
        const int64_t T = rng.uniform_int(2, 9);
        auto in = random_instance(rng, T, 1);
        Tensord gy = rng.uniform_tensor({T, 1}, -1, 1);
        WkvSequence seq{in.k, in.v};
        WkvParams p{in.w, in.u};
        BiWkvGrads g = bi_wkv_backward(seq, p, gy);

        std::vector<dual::Dual> kd(static_cast<size_t>(T)), vd(static_cast<size_t>(T));
        for (int64_t t = 0; t < T; ++t) {
            kd[static_cast<size_t>(t)] = in.k(t, 0);
            vd[static_cast<size_t>(t)] = in.v(t, 0);
        }
        auto sweep = [&](dual::Dual w, dual::Dual u) {
            auto out = naive_channel(kd, vd, w, u);
            double acc = 0;
            for (int64_t t = 0; t < T; ++t) acc += gy(t, 0) * out[static_cast<size_t>(t)].d;
            return acc;
        };
        for (int64_t j = 0; j < T; ++j) {
            kd[static_cast<size_t>(j)].d = 1;
            CHECK(gradcheck::rel_err(g.dk(j, 0), sweep(in.w[0], in.u[0]), 1e-3) < 1e-5);
            kd[static_cast<size_t>(j)].d = 0;
            vd[static_cast<size_t>(j)].d = 1;
            CHECK(gradcheck::rel_err(g.dv(j, 0), sweep(in.w[0], in.u[0]), 1e-3) < 1e-5);
            vd[static_cast<size_t>(j)].d = 0;
        }
        CHECK(gradcheck::rel_err(g.dw[0], sweep(dual::Dual(in.w[0], 1.0), in.u[0]), 1e-3) < 1e-5);
        CHECK(gradcheck::rel_err(g.du[0], sweep(in.w[0], dual::Dual(in.u[0], 1.0)), 1e-3) < 1e-5);
    }
}

TEST_CASE("backward matches central finite differences") {
    Rng rng(37);
    for (int trial = 0; trial < 5; ++trial) {
        const int64_t T = rng.uniform_int(2, 12);
        const int64_t C = rng.uniform_int(1, 4);
        auto in = random_instance(rng, T, C);
        Tensord gy = rng.uniform_tensor({T, C}, -1, 1);
        WkvSequence seq{in.k, in.v};
        WkvParams p{in.w, in.u};
        BiWkvGrads g = bi_wkv_backward(seq, p, gy);

        auto loss_wrt_k = [&](const Tensord& k2) {
            Tensord y = bi_wkv_scan(WkvSequence{k2, in.v}, p);
            double acc = 0;
            for (int64_t i = 0; i < y.numel(); ++i) acc += gy[i] * y[i];
            return acc;
        };
        CHECK(gradcheck::check_against_fd(loss_wrt_k, in.k, g.dk) < 1e-4);

        auto loss_wrt_w = [&](const Tensord& w2) {
            Tensord y = bi_wkv_scan(seq, WkvParams{w2, in.u});
            double acc = 0;
            for (int64_t i = 0; i < y.numel(); ++i) acc += gy[i] * y[i];
            return acc;
        };
        CHECK(gradcheck::check_against_fd(loss_wrt_w, in.w, g.dw) < 1e-4);
    }
}

TEST_CASE("backward T=1: dv = grad, dk = dw = 0") {
    Rng rng(38);
    auto in = random_instance(rng, 1, 3);
    Tensord gy = rng.uniform_tensor({1, 3}, -1, 1);
    BiWkvGrads g = bi_wkv_backward(WkvSequence{in.k, in.v}, WkvParams{in.w, in.u}, gy);
    CHECK(oracles::max_abs_diff(g.dv, gy) < 1e-12);
    for (int c = 0; c < 3; ++c) {
        CHECK(std::abs(g.dk(0, c)) < 1e-12);
        CHECK(std::abs(g.dw[c]) < 1e-12);
        CHECK(std::abs(g.du[c]) < 1e-12);
    }
}

TEST_CASE("saved-normalizer and recompute backward paths are identical") {
    Rng rng(39);
    auto in = random_instance(rng, 33, 5);
    WkvSequence seq{in.k, in.v};
    WkvParams p{in.w, in.u};
    Tensord gy = rng.uniform_tensor({33, 5}, -1, 1);
    BiWkvContext ctx;
    bi_wkv_scan(seq, p, &ctx);
    BiWkvGrads saved = bi_wkv_backward(seq, p, gy, &ctx);
    BiWkvGrads recomputed = bi_wkv_backward(seq, p, gy, nullptr);
    for (int64_t i = 0; i < saved.dk.numel(); ++i) {
        CHECK(saved.dk[i] == recomputed.dk[i]);
        CHECK(saved.dv[i] == recomputed.dv[i]);
    }
    for (int64_t c = 0; c < 5; ++c) {
        CHECK(saved.dw[c] == recomputed.dw[c]);
        CHECK(saved.du[c] == recomputed.du[c]);
    }
}

TEST_CASE("re_wkv with q=1 and identity plan equals bi_wkv_scan exactly") {
    Rng rng(40);
    auto in = random_instance(rng, 24, 3);
    WkvSequence seq{in.k, in.v};
    WkvParams p{in.w, in.u};
    Tensord direct = bi_wkv_scan(seq, p);
    Tensord rec = re_wkv(seq, p, 1, {make_identity_plan(24)});
    for (int64_t i = 0; i < direct.numel(); ++i) CHECK(rec[i] == direct[i]);
}

TEST_CASE("re_wkv T=1 is identity on values for any q") {
    Rng rng(41);
    auto in = random_instance(rng, 1, 4);
    for (int q : {1, 2, 5}) {
        Tensord y = re_wkv(WkvSequence{in.k, in.v}, WkvParams{in.w, in.u}, q,
                           {make_identity_plan(1)});
        CHECK(oracles::max_abs_diff(y, in.v) < 1e-12);
    }
}

TEST_CASE("re_wkv q=2 equals manual composition under the same permutations") {
    Rng rng(42);
    auto in = random_instance(rng, 16, 3);
    WkvParams p{in.w, in.u};
    auto plan1 = make_identity_plan(16);
    auto plan2 = reversed_plan(plan1);

    Tensord got = re_wkv(WkvSequence{in.k, in.v}, p, 2, {plan1, plan2});

    // manual: Bi-WKV under plan1, then Bi-WKV of the permuted intermediate
    // under plan2, all through the naive oracle
    auto apply = [&](const Tensord& vals, const ScanPlan& plan) {
        auto perm = permutation(plan);
        Tensord kp = gather_rows(in.k, perm);
        Tensord vp = gather_rows(vals, perm);
        Tensord y = bi_wkv_naive_t(kp, vp, in.w, in.u);
        return scatter_rows(y, perm);
    };
    Tensord want = apply(apply(in.v, plan1), plan2);
    CHECK(oracles::max_rel_err(got, want, 1e-6) < 1e-9);
}

TEST_CASE("results are identical at any thread count") {
    Rng rng(44);
    auto in = random_instance(rng, 96, 7);
    WkvSequence seq{in.k, in.v};
    WkvParams p{in.w, in.u};
    Tensord gy = rng.uniform_tensor({96, 7}, -1, 1);
    Tensord y1, y4;
    BiWkvGrads g1, g4;
    {
        ThreadLimitGuard one(1);
        y1 = bi_wkv_scan(seq, p);
        g1 = bi_wkv_backward(seq, p, gy);
    }
    {
        ThreadLimitGuard four(4);
        y4 = bi_wkv_scan(seq, p);
        g4 = bi_wkv_backward(seq, p, gy);
    }
    for (int64_t i = 0; i < y1.numel(); ++i) {
        CHECK(y1[i] == y4[i]);
        CHECK(g1.dk[i] == g4.dk[i]);
    }
    for (int64_t c = 0; c < 7; ++c) CHECK(g1.dw[c] == g4.dw[c]);
}

TEST_CASE("re_wkv rejects bad arguments") {
    Rng rng(43);
    auto in = random_instance(rng, 8, 2);
    WkvSequence seq{in.k, in.v};
    WkvParams p{in.w, in.u};
    CHECK_THROWS_AS(re_wkv(seq, p, 0, {make_identity_plan(8)}), std::invalid_argument);
    CHECK_THROWS_AS(re_wkv(seq, p, 1, {}), std::invalid_argument);
    CHECK_THROWS_AS(re_wkv(seq, p, 1, {make_identity_plan(9)}), std::invalid_argument);
}

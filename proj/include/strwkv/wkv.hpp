#pragma once

// Bidirectional WKV attention. Every token attends to every other token with
// a per-channel weight exp(-(|t-i|-1)/T * w + k_i), plus a bonus weight
// exp(u + k_t) for the current token; the output is the weighted average of
// the v features. Channels are fully independent.
//
// Two evaluators are provided:
//   bi_wkv_naive - direct O(T^2 C) double loop with per-token max-exponent
//                  subtraction; the correctness oracle.
//   bi_wkv_scan  - O(T C) forward prefix scan (i < t terms) plus suffix scan
//                  (i > t terms). Each scan carries its state as
//                  (log-scale m, rescaled numerator a, rescaled denominator b)
//                  and rescales by exp(old m - new m) on update, so exponents
//                  never overflow; the bonus term is merged at readout with
//                  the same trick.
//
// bi_wkv_backward produces exact analytic gradients of the same map in
// O(T C): dv and dk reuse the two-scan structure over rescaled upstream
// gradients, dw uses coupled distance-weighted scans, du is elementwise. All
// of them consume the per-token log-denominators, which the forward can save
// (T <= kWkvSaveStateThreshold) or the backward recomputes.
//
// The recurrent wrapper re_wkv applies Bi-WKV q times, feeding each output
// back in as the values while the keys stay fixed; iteration j runs under
// token order plans[(j-1) mod plans.size()].

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "strwkv/scan.hpp"
#include "strwkv/tensor.hpp"

namespace strwkv {

struct WkvParams {
    Tensord w;  // [C] channel-wise spatial decay, >= 0 elementwise
    Tensord u;  // [C] bonus for the current token
};

struct WkvSequence {
    Tensord k;  // [T x C]
    Tensord v;  // [T x C]
};

// Above this length the forward no longer saves per-token normalizers and the
// backward recomputes them in a second pass.
inline constexpr int64_t kWkvSaveStateThreshold = 4096;

struct BiWkvContext {
    Tensord y;        // [T x C] forward output
    Tensord log_den;  // [T x C] log of the attention denominator
    bool valid() const { return !y.empty(); }
};

namespace detail {

template <class S>
inline void check_wkv_args(const Tensor<S>& k, const Tensor<S>& v, const Tensor<S>& w,
                           const Tensor<S>& u) {
    if (k.ndim() != 2 || !k.same_shape(v))
        throw std::invalid_argument("bi_wkv: k and v must both be [T x C]");
    const int64_t C = k.dim(1);
    if (w.numel() != C || u.numel() != C)
        throw std::invalid_argument("bi_wkv: w/u length must equal channel count");
    for (int64_t c = 0; c < C; ++c)
        if (!(static_cast<double>(w[c]) >= 0.0))
            throw std::invalid_argument("bi_wkv: decay w must be non-negative");
}

}  // namespace detail

// Direct evaluation of the attention formula, one (t, i) pair at a time.
// Terms are accumulated in ascending i with the bonus term first, so the
// reduction order is fixed.
template <class S>
inline Tensor<S> bi_wkv_naive_t(const Tensor<S>& k, const Tensor<S>& v, const Tensor<S>& w,
                                const Tensor<S>& u) {
    detail::check_wkv_args(k, v, w, u);
    const int64_t T = k.dim(0), C = k.dim(1);
    Tensor<S> out({T, C});
    parallel_for(C, [&](int64_t c) {
        const S wT = static_cast<S>(static_cast<double>(w[c]) / static_cast<double>(T));
        for (int64_t t = 0; t < T; ++t) {
            S me = u[c] + k(t, c);
            for (int64_t i = 0; i < T; ++i) {
                if (i == t) continue;
                const S d = static_cast<S>(std::llabs(t - i) - 1);
                const S e = -d * wT + k(i, c);
                if (e > me) me = e;
            }
            S num = std::exp(u[c] + k(t, c) - me) * v(t, c);
            S den = std::exp(u[c] + k(t, c) - me);
            for (int64_t i = 0; i < T; ++i) {
                if (i == t) continue;
                const S d = static_cast<S>(std::llabs(t - i) - 1);
                const S x = std::exp(-d * wT + k(i, c) - me);
                num += x * v(i, c);
                den += x;
            }
            out(t, c) = num / den;
        }
    });
    ensure_finite(out, "bi_wkv_naive");
    return out;
}

// Linear-time evaluation. The forward sweep materializes the prefix state
// (m, a, b) for every t; the suffix sweep then combines prefix, suffix and
// bonus contributions at readout. log_den_out, when non-null, receives the
// per-token log-denominator for the backward pass.
template <class S>
inline Tensor<S> bi_wkv_scan_t(const Tensor<S>& k, const Tensor<S>& v, const Tensor<S>& w,
                               const Tensor<S>& u, Tensor<S>* log_den_out = nullptr) {
    detail::check_wkv_args(k, v, w, u);
    const int64_t T = k.dim(0), C = k.dim(1);
    const S ninf = -std::numeric_limits<S>::infinity();
    Tensor<S> out({T, C});
    parallel_for(C, [&](int64_t c) {
        const S wT = static_cast<S>(static_cast<double>(w[c]) / static_cast<double>(T));
        std::vector<S> mf(static_cast<size_t>(T)), af(static_cast<size_t>(T)),
            bf(static_cast<size_t>(T));
        S m = ninf, a = S(0), b = S(0);
        for (int64_t t = 0; t < T; ++t) {
            mf[static_cast<size_t>(t)] = m;
            af[static_cast<size_t>(t)] = a;
            bf[static_cast<size_t>(t)] = b;
            const S kk = k(t, c);
            const S md = m - wT;
            const S mn = md > kk ? md : kk;
            const S r1 = std::exp(md - mn);
            const S r2 = std::exp(kk - mn);
            a = r1 * a + r2 * v(t, c);
            b = r1 * b + r2;
            m = mn;
        }
        m = ninf;
        a = S(0);
        b = S(0);
        for (int64_t t = T - 1; t >= 0; --t) {
            const S eb = u[c] + k(t, c);
            S mm = mf[static_cast<size_t>(t)] > m ? mf[static_cast<size_t>(t)] : m;
            if (eb > mm) mm = eb;
            const S x1 = std::exp(mf[static_cast<size_t>(t)] - mm);
            const S x2 = std::exp(m - mm);
            const S x3 = std::exp(eb - mm);
            const S num = x1 * af[static_cast<size_t>(t)] + x2 * a + x3 * v(t, c);
            const S den = x1 * bf[static_cast<size_t>(t)] + x2 * b + x3;
            out(t, c) = num / den;
            if (log_den_out) (*log_den_out)(t, c) = mm + std::log(den);
            const S kk = k(t, c);
            const S md = m - wT;
            const S mn = md > kk ? md : kk;
            const S r1 = std::exp(md - mn);
            const S r2 = std::exp(kk - mn);
            a = r1 * a + r2 * v(t, c);
            b = r1 * b + r2;
            m = mn;
        }
    });
    ensure_finite(out, "bi_wkv_scan");
    return out;
}

inline Tensord bi_wkv_naive(const WkvSequence& seq, const WkvParams& p) {
    return bi_wkv_naive_t(seq.k, seq.v, p.w, p.u);
}

inline Tensord bi_wkv_scan(const WkvSequence& seq, const WkvParams& p,
                           BiWkvContext* ctx = nullptr) {
    if (ctx) {
        ctx->log_den = Tensord(seq.k.shape());
        ctx->y = bi_wkv_scan_t(seq.k, seq.v, p.w, p.u, &ctx->log_den);
        return ctx->y;
    }
    return bi_wkv_scan_t(seq.k, seq.v, p.w, p.u);
}

struct BiWkvGrads {
    Tensord dk, dv;  // [T x C]
    Tensord dw, du;  // [C]
};

// Analytic adjoint of the attention map. With D_t the denominator, y_t the
// output, h_t = g_t / D_t and h2_t = g_t y_t / D_t:
//   dv_j = e^{k_j} (Sf_j + Sb_j) + e^{u+k_j} h_j
//   dk_j = v_j dv_j - e^{k_j} (S2f_j + S2b_j) - e^{u+k_j} h2_j
//   du   = sum_t e^{u+k_t} h_t (v_t - y_t)
//   dw   = -(1/T) sum_t g_t [ (P_t + Q_t) - y_t (Pt~ + Qt~) ] / D_t
// where Sf/Sb are decay-only prefix/suffix scans over h (S2 over h2), and
// P/Q are distance-weighted prefix/suffix sums sharing the forward scans'
// log-scale rescaling.
inline BiWkvGrads bi_wkv_backward(const WkvSequence& seq, const WkvParams& p, const Tensord& gy,
                                  const BiWkvContext* ctx = nullptr) {
    detail::check_wkv_args(seq.k, seq.v, p.w, p.u);
    const Tensord& k = seq.k;
    const Tensord& v = seq.v;
    if (!gy.same_shape(k)) throw std::invalid_argument("bi_wkv_backward: grad shape mismatch");
    const int64_t T = k.dim(0), C = k.dim(1);

    BiWkvContext local;
    if (!ctx || !ctx->valid()) {
        local.log_den = Tensord(k.shape());
        local.y = bi_wkv_scan_t(k, v, p.w, p.u, &local.log_den);
        ctx = &local;
    }
    const Tensord& y = ctx->y;
    const Tensord& logD = ctx->log_den;

    BiWkvGrads g;
    g.dk = Tensord({T, C});
    g.dv = Tensord({T, C});
    g.dw = Tensord({C});
    g.du = Tensord({C});
    const double ninf = -std::numeric_limits<double>::infinity();

    parallel_for(C, [&](int64_t c) {
        const double wT = p.w[c] / static_cast<double>(T);
        const double dec = std::exp(-wT);

        std::vector<double> h(static_cast<size_t>(T)), h2(static_cast<size_t>(T));
        for (int64_t t = 0; t < T; ++t) {
            h[static_cast<size_t>(t)] = gy(t, c) * std::exp(-logD(t, c));
            h2[static_cast<size_t>(t)] = h[static_cast<size_t>(t)] * y(t, c);
        }

        // decay-only scans over h and h2
        std::vector<double> sf(static_cast<size_t>(T)), sb(static_cast<size_t>(T)),
            s2f(static_cast<size_t>(T)), s2b(static_cast<size_t>(T));
        double accf = 0, acc2f = 0;
        for (int64_t t = 0; t < T; ++t) {
            sf[static_cast<size_t>(t)] = accf;
            s2f[static_cast<size_t>(t)] = acc2f;
            accf = dec * accf + h[static_cast<size_t>(t)];
            acc2f = dec * acc2f + h2[static_cast<size_t>(t)];
        }
        double accb = 0, acc2b = 0;
        for (int64_t t = T - 1; t >= 0; --t) {
            sb[static_cast<size_t>(t)] = accb;
            s2b[static_cast<size_t>(t)] = acc2b;
            accb = dec * accb + h[static_cast<size_t>(t)];
            acc2b = dec * acc2b + h2[static_cast<size_t>(t)];
        }

        double du = 0;
        for (int64_t t = 0; t < T; ++t) {
            const double ek = std::exp(k(t, c));
            const double ebD = std::exp(p.u[c] + k(t, c) - logD(t, c));
            const double dv = ek * (sf[static_cast<size_t>(t)] + sb[static_cast<size_t>(t)]) +
                              ebD * gy(t, c);
            g.dv(t, c) = dv;
            g.dk(t, c) = v(t, c) * dv -
                         ek * (s2f[static_cast<size_t>(t)] + s2b[static_cast<size_t>(t)]) -
                         ebD * gy(t, c) * y(t, c);
            du += ebD * gy(t, c) * (v(t, c) - y(t, c));
        }
        g.du[c] = du;

        // distance-weighted scans for dw; (a, pa) and (b, pb) share scale m
        double dw = 0;
        double m = ninf, a = 0, b = 0, pa = 0, pb = 0;
        for (int64_t t = 0; t < T; ++t) {
            if (std::isfinite(m))
                dw += std::exp(m - logD(t, c)) * (pa - y(t, c) * pb) * gy(t, c);
            const double kk = k(t, c);
            const double md = m - wT;
            const double mn = md > kk ? md : kk;
            const double r1 = std::exp(md - mn);
            const double r2 = std::exp(kk - mn);
            const double pa_next = r1 * (pa + a);
            const double pb_next = r1 * (pb + b);
            a = r1 * a + r2 * v(t, c);
            b = r1 * b + r2;
            pa = pa_next;
            pb = pb_next;
            m = mn;
        }
        m = ninf;
        a = b = pa = pb = 0;
        for (int64_t t = T - 1; t >= 0; --t) {
            if (std::isfinite(m))
                dw += std::exp(m - logD(t, c)) * (pa - y(t, c) * pb) * gy(t, c);
            const double kk = k(t, c);
            const double md = m - wT;
            const double mn = md > kk ? md : kk;
            const double r1 = std::exp(md - mn);
            const double r2 = std::exp(kk - mn);
            const double pa_next = r1 * (pa + a);
            const double pb_next = r1 * (pb + b);
            a = r1 * a + r2 * v(t, c);
            b = r1 * b + r2;
            pa = pa_next;
            pb = pb_next;
            m = mn;
        }
        g.dw[c] = -dw / static_cast<double>(T);
    });

    ensure_finite(g.dk, "bi_wkv_backward dk");
    ensure_finite(g.dv, "bi_wkv_backward dv");
    ensure_finite(g.dw, "bi_wkv_backward dw");
    ensure_finite(g.du, "bi_wkv_backward du");
    return g;
}

// Recurrent Bi-WKV: wkv^(0) = V, wkv^(j) = Bi-WKV(K, wkv^(j-1)), return
// wkv^(q). Iteration j gathers tokens into plans[(j-1) mod n] order, runs the
// scan kernel, and scatters back, so successive iterations attend along
// rotating directions.
inline Tensord re_wkv(const WkvSequence& seq, const WkvParams& p, int q,
                      const std::vector<ScanPlan>& plans) {
    if (q < 1) throw std::invalid_argument("re_wkv: q must be >= 1");
    if (plans.empty()) throw std::invalid_argument("re_wkv: plans must be nonempty");
    const int64_t T = seq.k.dim(0);
    Tensord cur = seq.v;
    for (int j = 0; j < q; ++j) {
        const ScanPlan& plan = plans[static_cast<size_t>(j) % plans.size()];
        if (plan.tokens() != T) throw std::invalid_argument("re_wkv: plan token count mismatch");
        const auto perm = permutation(plan);
        Tensord kp = gather_rows(seq.k, perm);
        Tensord vp = gather_rows(cur, perm);
        Tensord yp = bi_wkv_scan_t(kp, vp, p.w, p.u);
        cur = scatter_rows(yp, perm);
    }
    return cur;
}

}  // namespace strwkv

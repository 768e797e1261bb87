#pragma once

// Analytic FLOP counts and wall-time measurement for the attention kernels
// and the model forward, reproducing the linear-vs-quadratic scaling
// comparison.
//
// FLOP convention: one multiply, add/subtract, divide, or exp counts as one
// FLOP; an indexed move inside a permutation counts as one. Counts are
// leading-order monomials (per-channel setup and per-token constants are
// excluded), so count(scan, 2T) = 2 count(scan, T) and
// count(naive, 2T) = 4 count(naive, T) hold exactly.
//
// Per-step tallies, matching the kernel inner loops:
//   scan update (per t, c, per direction): 3 sub + 2 exp + 3 mul + 2 add = 10
//   scan readout (per t, c): 1 add + 3*(sub+exp) + 5 + 4 + 1 div = 17
//     -> bi_wkv_scan: (10 + 10 + 17) T C = 37 T C
//   naive pair (per t, i, c): 3 exponent + 2 exp-subtract + 3 accumulate = 8
//     -> bi_wkv_naive: 8 T^2 C
//   re_wkv: q * (scan + 2 permutations of T C moves) = q (37 + 2) T C
//   quadratic reference: scores 2 T^2 C + softmax 3 T^2 + mix 2 T^2 C

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "strwkv/model.hpp"
#include "strwkv/scan.hpp"
#include "strwkv/tensor.hpp"
#include "strwkv/wkv.hpp"

namespace strwkv {

inline constexpr int64_t kScanFlopsPerTokenChannel = 37;
inline constexpr int64_t kNaiveFlopsPerPairChannel = 8;
inline constexpr int64_t kPermuteFlopsPerTokenChannel = 1;

inline int64_t count_flops(const std::string& kernel, int64_t T, int64_t C, int q = 1) {
    if (kernel == "bi_wkv_scan") return kScanFlopsPerTokenChannel * T * C;
    if (kernel == "bi_wkv_naive") return kNaiveFlopsPerPairChannel * T * T * C;
    if (kernel == "re_wkv")
        return static_cast<int64_t>(q) *
               (kScanFlopsPerTokenChannel + 2 * kPermuteFlopsPerTokenChannel) * T * C;
    if (kernel == "quadratic_attention_reference") return 4 * T * T * C + 3 * T * T;
    throw std::invalid_argument("count_flops: unknown kernel " + kernel);
}

// Plain softmax attention with queries = keys, the quadratic baseline for the
// scaling plots. Streams one score row at a time.
template <class S>
inline Tensor<S> quadratic_attention_reference(const Tensor<S>& k, const Tensor<S>& v) {
    const int64_t T = k.dim(0), C = k.dim(1);
    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(C));
    Tensor<S> out({T, C});
    std::vector<double> scores(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        double mx = -1e300;
        for (int64_t i = 0; i < T; ++i) {
            double s = 0;
            for (int64_t c = 0; c < C; ++c)
                s += static_cast<double>(k(t, c)) * static_cast<double>(k(i, c));
            s *= inv_sqrt_c;
            scores[static_cast<size_t>(i)] = s;
            mx = std::max(mx, s);
        }
        double den = 0;
        for (int64_t i = 0; i < T; ++i) {
            scores[static_cast<size_t>(i)] = std::exp(scores[static_cast<size_t>(i)] - mx);
            den += scores[static_cast<size_t>(i)];
        }
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0;
            for (int64_t i = 0; i < T; ++i)
                acc += scores[static_cast<size_t>(i)] * static_cast<double>(v(i, c));
            out(t, c) = static_cast<S>(acc / den);
        }
    }
    return out;
}

struct BenchRecord {
    std::string kernel;
    int64_t T = 0;
    int64_t C = 0;
    int64_t wall_ns = 0;     // median over the timed repetitions
    int64_t flops = 0;       // analytic
    int64_t peak_bytes = 0;  // analytic working set allocated by the kernel
};

namespace detail {

inline int64_t time_once(const std::function<void()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
}

inline int64_t median_time(const std::function<void()>& fn, int repeats) {
    fn();  // warm-up, excluded
    std::vector<int64_t> times;
    times.reserve(static_cast<size_t>(repeats));
    for (int i = 0; i < repeats; ++i) times.push_back(time_once(fn));
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

}  // namespace detail

// Times one kernel at one size on deterministic inputs. Kernels run
// single-threaded while timed.
inline BenchRecord bench_kernel(const std::string& kernel, int64_t T, int64_t C, int q,
                                int repeats = 5) {
    ThreadLimitGuard single(1);
    Rng rng(0x5742u ^ static_cast<uint64_t>(T * 1315423911) ^ static_cast<uint64_t>(C));
    Tensord k = rng.uniform_tensor({T, C}, -1, 1);
    Tensord v = rng.uniform_tensor({T, C}, -1, 1);
    Tensord w = rng.uniform_tensor({C}, 0.0, 1.5);
    Tensord u = rng.uniform_tensor({C}, -1, 1);
    WkvSequence seq{k, v};
    WkvParams p{w, u};

    BenchRecord rec;
    rec.kernel = kernel;
    rec.T = T;
    rec.C = C;
    rec.flops = count_flops(kernel, T, C, q);

    volatile double sink = 0;
    if (kernel == "bi_wkv_scan") {
        rec.peak_bytes = (3 * T + T * C) * static_cast<int64_t>(sizeof(double));
        rec.wall_ns = detail::median_time([&] { sink = sink + bi_wkv_scan(seq, p)[0]; }, repeats);
    } else if (kernel == "bi_wkv_naive") {
        rec.peak_bytes = T * C * static_cast<int64_t>(sizeof(double));
        rec.wall_ns = detail::median_time([&] { sink = sink + bi_wkv_naive(seq, p)[0]; }, repeats);
    } else if (kernel == "re_wkv") {
        rec.peak_bytes = (3 * T + 3 * T * C) * static_cast<int64_t>(sizeof(double));
        std::vector<ScanPlan> plans{make_identity_plan(T), reversed_plan(make_identity_plan(T))};
        rec.wall_ns = detail::median_time([&] { sink = sink + re_wkv(seq, p, q, plans)[0]; }, repeats);
    } else if (kernel == "quadratic_attention_reference") {
        rec.peak_bytes = (T + T * C) * static_cast<int64_t>(sizeof(double));
        rec.wall_ns =
            detail::median_time([&] { sink = sink + quadratic_attention_reference(k, v)[0]; }, repeats);
    } else {
        throw std::invalid_argument("bench_kernel: unknown kernel " + kernel);
    }
    (void)sink;
    return rec;
}

inline std::vector<BenchRecord> sweep(const std::vector<std::string>& kernels,
                                      const std::vector<int64_t>& lengths, int64_t C, int q,
                                      int repeats = 5) {
    for (size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw std::invalid_argument("sweep: lengths must be ascending");
    std::vector<BenchRecord> records;
    for (const auto& kernel : kernels)
        for (int64_t T : lengths) records.push_back(bench_kernel(kernel, T, C, q, repeats));
    return records;
}

inline void write_bench_csv(const std::vector<BenchRecord>& records, std::ostream& os) {
    os << "kernel,T,C,wall_ns,flops,peak_bytes\n";
    for (const auto& r : records)
        os << r.kernel << ',' << r.T << ',' << r.C << ',' << r.wall_ns << ',' << r.flops << ','
           << r.peak_bytes << '\n';
}

// R^2 of the least-squares line y = a + b x.
inline double linear_fit_r2(const std::vector<double>& xs, const std::vector<double>& ys) {
    const size_t n = xs.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    const double nx = static_cast<double>(n);
    const double b = (nx * sxy - sx * sy) / (nx * sxx - sx * sx);
    const double a = (sy - b * sx) / nx;
    double ss_res = 0, ss_tot = 0;
    const double mean_y = sy / nx;
    for (size_t i = 0; i < n; ++i) {
        const double fit = a + b * xs[i];
        ss_res += (ys[i] - fit) * (ys[i] - fit);
        ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
    }
    return 1.0 - ss_res / ss_tot;
}

// ---------------------------------------------------------------------------
// analytic model FLOPs, built from the same convention:
//   matmul 2 T Cin Cout; conv HoWo Cout (2 Cin k^2 + 1); layer norm 8/elem;
//   sigmoid 4/elem; squared relu 2/elem; elementwise 1/elem;
//   shifts per element: uni 4, quad 1, omni 18,
//   deform: predictor conv + 9 taps * (11 bilinear + 2 mix) + 18 offset adds

inline int64_t flops_conv2d(int64_t cin, int64_t cout, int64_t k, int64_t ho, int64_t wo) {
    return ho * wo * cout * (2 * cin * k * k + 1);
}

inline int64_t flops_shift(ShiftVariant variant, int64_t C, int64_t T) {
    switch (variant) {
        case ShiftVariant::uni: return 4 * C * T;
        case ShiftVariant::quad: return C * T;
        case ShiftVariant::omni: return 18 * C * T;
        case ShiftVariant::deform:
            return flops_conv2d(C, kOffsetChannels, 3, 1, T)  // offsets (T pixels total)
                   + C * T * (9 * 13 + 18);
    }
    return 0;
}

inline int64_t flops_spatial_mix(int64_t C, int64_t T, int q, ShiftVariant shift) {
    int64_t f = 8 * C * T;                         // layer norm
    f += 3 * flops_shift(shift, C, T);             // three shifted paths
    f += 3 * 2 * T * C * C;                        // R/K/V projections
    f += static_cast<int64_t>(q) *
         (kScanFlopsPerTokenChannel + 2 * kPermuteFlopsPerTokenChannel) * T * C;  // Re-WKV
    f += 5 * T * C;                                // sigmoid gate + multiply
    f += 2 * T * C * C;                            // output projection
    return f;
}

inline int64_t flops_channel_mix(int64_t C, int64_t T, int hidden_ratio, ShiftVariant shift) {
    const int64_t hc = hidden_ratio * C;
    int64_t f = 8 * C * T;
    f += 2 * flops_shift(shift, C, T);
    f += 2 * T * C * C;       // R projection
    f += 2 * T * C * hc;      // K projection
    f += 2 * T * hc;          // squared relu
    f += 2 * T * hc * C;      // V projection
    f += 5 * T * C;           // gate
    f += 2 * T * C * C;       // output projection
    return f;
}

inline int64_t flops_block(int64_t C, int64_t T, int q, int hidden_ratio, ShiftVariant shift) {
    return flops_spatial_mix(C, T, q, shift) + flops_channel_mix(C, T, hidden_ratio, shift) +
           2 * C * T;  // residuals
}

inline int64_t flops_model_forward(const ModelConfig& cfg, int64_t H, int64_t W) {
    const int64_t C = cfg.base_width;
    int64_t f = 0;
    const int64_t h2 = H / 2, w2 = W / 2;
    f += 2 * flops_conv2d(3, C, 3, h2, w2);  // both input projections
    int64_t lh = h2, lw = w2;
    for (int level = 1; level <= 3; ++level) {
        const int64_t lc = cfg.level_width(level);
        f += 2 * cfg.blocks[static_cast<size_t>(level - 1)] *
             flops_block(lc, lh * lw, cfg.q, cfg.hidden_ratio, cfg.shift);  // encoder, both images
        f += 2 * flops_conv2d(lc, lc / 2, 1, lh, lw);                       // down conv
        f += 2 * lc * lh * lw;                                              // pixel unshuffle moves
        lh /= 2;
        lw /= 2;
    }
    for (int level = 1; level <= 4; ++level) {
        const int64_t lc = cfg.level_width(level);
        const int64_t lt = (h2 >> (level - 1)) * (w2 >> (level - 1));
        f += 6 * lc * lt;  // adain: stats + affine
    }
    f += cfg.blocks[3] * flops_block(cfg.level_width(4), lh * lw, cfg.q, cfg.hidden_ratio,
                                     cfg.shift);  // bottleneck
    for (int level = 3; level >= 1; --level) {
        const int64_t lc = cfg.level_width(level);
        const int64_t uh = h2 >> (level - 1), uw = w2 >> (level - 1);
        f += lc * uh * uw;                               // pixel shuffle moves
        f += flops_conv2d(lc / 2, lc, 1, uh, uw);        // up conv
        f += flops_conv2d(2 * lc, lc, 1, uh, uw);        // fuse conv
        f += cfg.blocks[static_cast<size_t>(level - 1)] *
             flops_block(lc, uh * uw, cfg.q, cfg.hidden_ratio, cfg.shift);
    }
    f += C * H * W / 4;                       // head pixel shuffle
    f += flops_conv2d(C / 4, 3, 3, H, W);     // head conv
    return f;
}

// Times a tiny-config full forward at H = W = sqrt(T); for the bench CLI's
// "model_forward" kernel.
inline BenchRecord bench_model_forward(int64_t T, int repeats = 3) {
    const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(T))));
    if (side * side != T || side % 16 != 0)
        throw std::invalid_argument(
            "bench model_forward: T must be a square of a multiple of 16");
    ThreadLimitGuard single(1);
    ModelConfig cfg = tiny_config();
    StyleRwkvModel model(cfg);
    Tensord c = make_synthetic_image(side, side, 1);
    Tensord s = make_synthetic_image(side, side, 2);
    BenchRecord rec;
    rec.kernel = "model_forward";
    rec.T = T;
    rec.C = cfg.base_width;
    rec.flops = flops_model_forward(cfg, side, side);
    rec.peak_bytes = 0;  // dominated by tape intermediates; not modeled
    volatile double sink = 0;
    rec.wall_ns = detail::median_time([&] { sink = sink + model.stylize(c, s)[0]; }, repeats);
    (void)sink;
    return rec;
}

}  // namespace strwkv

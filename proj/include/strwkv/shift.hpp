#pragma once

// Token shifting: mixing each token with spatial neighbors before the linear
// projections. Four mechanisms:
//   uni    - per-channel interpolation with the previous sequence token
//   quad   - channel quarters shifted one pixel left/right/up/down
//   omni   - depthwise 3x3 convolution (the zero-offset special case below)
//   deform - depthwise 3x3 aggregation whose per-tap sampling positions are
//            displaced by offsets predicted from the input itself
//
// The deformable path samples at p0 + p_n + dp_n with bilinear interpolation
// and zero padding; offsets are shared across channels, one (dy, dx) pair per
// kernel tap. The offset predictor is a zero-initialized 3x3 conv and the
// depthwise kernel starts as center-one, so the whole layer is the identity
// map at initialization.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "strwkv/tensor.hpp"

namespace strwkv {

enum class ShiftVariant { uni, quad, omni, deform };

inline const char* to_string(ShiftVariant v) {
    switch (v) {
        case ShiftVariant::uni: return "uni";
        case ShiftVariant::quad: return "quad";
        case ShiftVariant::omni: return "omni";
        case ShiftVariant::deform: return "deform";
    }
    return "?";
}

inline ShiftVariant shift_variant_from_string(const std::string& s) {
    if (s == "uni") return ShiftVariant::uni;
    if (s == "quad") return ShiftVariant::quad;
    if (s == "omni") return ShiftVariant::omni;
    if (s == "deform") return ShiftVariant::deform;
    throw std::invalid_argument("unknown shift variant: " + s);
}

inline constexpr int kShiftKernel = 3;                                  // k
inline constexpr int kShiftTaps = kShiftKernel * kShiftKernel;          // 9
inline constexpr int kOffsetChannels = 2 * kShiftTaps;                  // 18

struct UniShiftParams {
    Tensord mix;  // [C], each in [0, 1]
};

struct DeformShiftParams {
    Tensord predictor_w;  // [18 x C x 3 x 3], zero-initialized
    Tensord predictor_b;  // [18], zero-initialized
    Tensord depthwise;    // [C x 3 x 3], center-one initialized
    double offset_scale = 1.0;
};

inline DeformShiftParams make_deform_params(int64_t C) {
    DeformShiftParams p;
    p.predictor_w = Tensord({kOffsetChannels, C, kShiftKernel, kShiftKernel});
    p.predictor_b = Tensord({kOffsetChannels});
    p.depthwise = Tensord({C, kShiftKernel, kShiftKernel});
    for (int64_t c = 0; c < C; ++c) p.depthwise[c * kShiftTaps + 4] = 1.0;  // center tap
    return p;
}

// ---------------------------------------------------------------------------
// uni: out_t = mix * seq_{t-1} + (1 - mix) * seq_t, with seq_{-1} = 0

template <class S>
inline Tensor<S> uni_shift(const Tensor<S>& seq, const Tensor<S>& mix) {
    if (seq.ndim() != 2) throw std::invalid_argument("uni_shift: expects [T x C]");
    const int64_t T = seq.dim(0), C = seq.dim(1);
    if (mix.numel() != C) throw std::invalid_argument("uni_shift: mix length mismatch");
    Tensor<S> out(seq.shape());
    for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < C; ++c) {
            const S prev = t > 0 ? seq(t - 1, c) : S(0);
            out(t, c) = mix[c] * prev + (S(1) - mix[c]) * seq(t, c);
        }
    return out;
}

inline Tensord uni_shift(const Tensord& seq, const UniShiftParams& p) {
    for (int64_t i = 0; i < p.mix.numel(); ++i)
        if (p.mix[i] < 0.0 || p.mix[i] > 1.0)
            throw std::invalid_argument("uni_shift: mix must lie in [0, 1]");
    return uni_shift(seq, p.mix);
}

template <class S>
inline void uni_shift_backward(const Tensor<S>& seq, const Tensor<S>& mix, const Tensor<S>& gy,
                               Tensor<S>& gseq, Tensor<S>& gmix) {
    const int64_t T = seq.dim(0), C = seq.dim(1);
    gseq = Tensor<S>(seq.shape());
    gmix = Tensor<S>({C});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < C; ++c) {
            gseq(t, c) += (S(1) - mix[c]) * gy(t, c);
            if (t + 1 < T) gseq(t, c) += mix[c] * gy(t + 1, c);
            const S prev = t > 0 ? seq(t - 1, c) : S(0);
            gmix[c] += gy(t, c) * (prev - seq(t, c));
        }
}

// ---------------------------------------------------------------------------
// quad: channel quarter 0 shifts one pixel left, 1 right, 2 up, 3 down;
// borders are zero-filled.

template <class S>
inline Tensor<S> quad_shift(const Tensor<S>& x) {
    if (x.ndim() != 3) throw std::invalid_argument("quad_shift: expects [C x H x W]");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (C % 4 != 0) throw std::invalid_argument("quad_shift: channels must be divisible by 4");
    Tensor<S> out(x.shape());
    const int64_t quarter = C / 4;
    static constexpr int64_t dy[4] = {0, 0, 1, -1};
    static constexpr int64_t dx[4] = {1, -1, 0, 0};  // out[y][x] = in[y+dy][x+dx]
    for (int64_t c = 0; c < C; ++c) {
        const int64_t q = c / quarter;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                const int64_t sy = y + dy[q], sx = xx + dx[q];
                out(c, y, xx) =
                    (sy >= 0 && sy < H && sx >= 0 && sx < W) ? x(c, sy, sx) : S(0);
            }
    }
    return out;
}

template <class S>
inline Tensor<S> quad_shift_backward(const Tensor<S>& x, const Tensor<S>& gy) {
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor<S> gx(x.shape());
    const int64_t quarter = C / 4;
    static constexpr int64_t dy[4] = {0, 0, 1, -1};
    static constexpr int64_t dx[4] = {1, -1, 0, 0};
    for (int64_t c = 0; c < C; ++c) {
        const int64_t q = c / quarter;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                const int64_t sy = y + dy[q], sx = xx + dx[q];
                if (sy >= 0 && sy < H && sx >= 0 && sx < W) gx(c, sy, sx) += gy(c, y, xx);
            }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// depthwise deformable aggregation core. offsets is [18 x H x W] (may be
// empty, meaning all-zero): channels (2n, 2n+1) hold the (dy, dx) displacement
// of tap n, taps enumerated row-major over the 3x3 grid.

template <class S>
inline Tensor<S> depthwise_sample(const Tensor<S>& x, const Tensor<S>& offsets,
                                  const Tensor<S>& kernel) {
    if (x.ndim() != 3) throw std::invalid_argument("depthwise_sample: expects [C x H x W]");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (kernel.ndim() != 3 || kernel.dim(0) != C || kernel.dim(1) != kShiftKernel ||
        kernel.dim(2) != kShiftKernel)
        throw std::invalid_argument("depthwise_sample: kernel must be [C x 3 x 3]");
    const bool has_off = !offsets.empty();
    if (has_off &&
        (offsets.ndim() != 3 || offsets.dim(0) != kOffsetChannels || offsets.dim(1) != H ||
         offsets.dim(2) != W))
        throw std::invalid_argument("depthwise_sample: offsets must be [18 x H x W]");
    Tensor<S> out(x.shape());
    parallel_for(C, [&](int64_t c) {
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                double acc = 0;
                for (int n = 0; n < kShiftTaps; ++n) {
                    const int dy = n / kShiftKernel - 1;
                    const int dx = n % kShiftKernel - 1;
                    double ys = static_cast<double>(y + dy);
                    double xs = static_cast<double>(xx + dx);
                    if (has_off) {
                        ys += static_cast<double>(offsets(2 * n, y, xx));
                        xs += static_cast<double>(offsets(2 * n + 1, y, xx));
                    }
                    // inline single-channel bilinear read, zero padded
                    const int64_t y0 = static_cast<int64_t>(std::floor(ys));
                    const int64_t x0 = static_cast<int64_t>(std::floor(xs));
                    const double fy = ys - static_cast<double>(y0);
                    const double fx = xs - static_cast<double>(x0);
                    auto at = [&](int64_t yy, int64_t xq) -> double {
                        if (yy < 0 || yy >= H || xq < 0 || xq >= W) return 0.0;
                        return static_cast<double>(x(c, yy, xq));
                    };
                    const double sample = (1 - fy) * (1 - fx) * at(y0, x0) +
                                          (1 - fy) * fx * at(y0, x0 + 1) +
                                          fy * (1 - fx) * at(y0 + 1, x0) +
                                          fy * fx * at(y0 + 1, x0 + 1);
                    acc += static_cast<double>(kernel[c * kShiftTaps + n]) * sample;
                }
                out(c, y, xx) = static_cast<S>(acc);
            }
    });
    ensure_finite(out, "depthwise_sample");
    return out;
}

template <class S>
inline Tensor<S> omni_shift(const Tensor<S>& x, const Tensor<S>& depthwise) {
    return depthwise_sample(x, Tensor<S>(), depthwise);
}

// Offsets predicted by a 3x3 conv over the input, scaled by offset_scale.
template <class S>
inline Tensor<S> predict_offsets(const Tensor<S>& x, const DeformShiftParams& p) {
    Tensor<S> pw = p.predictor_w.template cast<S>();
    Tensor<S> pb = p.predictor_b.template cast<S>();
    Tensor<S> off = conv2d(x, pw, pb, 1, 1);
    if (p.offset_scale != 1.0) off = scale(off, p.offset_scale);
    return off;
}

template <class S>
inline Tensor<S> deform_shift(const Tensor<S>& x, const DeformShiftParams& p) {
    Tensor<S> off = predict_offsets(x, p);
    Tensor<S> kd = p.depthwise.template cast<S>();
    return depthwise_sample(x, off, kd);
}

struct DeformShiftGrads {
    Tensord dx;
    Tensord dpredictor_w, dpredictor_b;
    Tensord ddepthwise;
};

// Backward through sampled values, the depthwise kernel, and the predicted
// offsets (whose gradient flows back into the predictor conv and the input).
inline DeformShiftGrads deform_shift_backward(const Tensord& x, const DeformShiftParams& p,
                                              const Tensord& gy) {
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensord off = predict_offsets(x, p);

    DeformShiftGrads g;
    g.dx = Tensord(x.shape());
    g.ddepthwise = Tensord(p.depthwise.shape());
    Tensord goff(off.shape());

    for (int64_t c = 0; c < C; ++c) {
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                const double gout = gy(c, y, xx);
                for (int n = 0; n < kShiftTaps; ++n) {
                    const int dy = n / kShiftKernel - 1;
                    const int dx = n % kShiftKernel - 1;
                    const double ys = static_cast<double>(y + dy) + off(2 * n, y, xx);
                    const double xs = static_cast<double>(xx + dx) + off(2 * n + 1, y, xx);
                    const double kw = p.depthwise[c * kShiftTaps + n];
                    const Tensord sample = bilinear_sample(x, ys, xs);
                    g.ddepthwise[c * kShiftTaps + n] += gout * sample[c];
                    bilinear_scatter(g.dx, c, ys, xs, gout * kw);
                    double dys = 0, dxs = 0;
                    bilinear_coord_grad(x, c, ys, xs, dys, dxs);
                    goff(2 * n, y, xx) += gout * kw * dys;
                    goff(2 * n + 1, y, xx) += gout * kw * dxs;
                }
            }
    }

    if (p.offset_scale != 1.0) goff = scale(goff, p.offset_scale);
    Tensord gx2, gpw, gpb;
    conv2d_backward(x, p.predictor_w, 1, 1, goff, gx2, gpw, gpb, true);
    g.dx = add(g.dx, gx2);
    g.dpredictor_w = gpw;
    g.dpredictor_b = gpb;
    return g;
}

inline void omni_shift_backward(const Tensord& x, const Tensord& depthwise, const Tensord& gy,
                                Tensord& gx, Tensord& gkernel) {
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    gx = Tensord(x.shape());
    gkernel = Tensord(depthwise.shape());
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                const double gout = gy(c, y, xx);
                for (int n = 0; n < kShiftTaps; ++n) {
                    const int64_t sy = y + n / kShiftKernel - 1;
                    const int64_t sx = xx + n % kShiftKernel - 1;
                    if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                    gkernel[c * kShiftTaps + n] += gout * x(c, sy, sx);
                    gx(c, sy, sx) += gout * depthwise[c * kShiftTaps + n];
                }
            }
}

}  // namespace strwkv

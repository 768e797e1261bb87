#pragma once

// The 4-level U-shaped encoder-decoder. A 3x3 stride-2 conv projects the
// image to width C at half resolution; three encoder levels (widths C, 2C,
// 4C) run their blocks and downsample (1x1 conv halving channels, then
// pixel-unshuffle doubling them net). The AdaIN-fused bottleneck at 8C runs
// the level-4 blocks once; each decoder stage upsamples (pixel-shuffle + 1x1
// conv), concatenates the AdaIN-fused skip, fuses back to the level width
// with a 1x1 conv, and runs that level's blocks. A pixel-shuffle and a 3x3
// conv map back to RGB at the input resolution.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "strwkv/autodiff.hpp"
#include "strwkv/block.hpp"
#include "strwkv/scan.hpp"
#include "strwkv/shift.hpp"
#include "strwkv/tensor.hpp"

namespace strwkv {

struct ModelConfig {
    int64_t base_width = 48;             // C
    std::array<int, 4> blocks{4, 6, 6, 8};
    int q = 2;                           // Re-WKV recurrence
    int p = 2;                           // skip-scan step
    ShiftVariant shift = ShiftVariant::deform;
    ScanVariant scan = ScanVariant::skip;
    int hidden_ratio = 4;                // channel-mix expansion
    double adain_eps = 1e-5;
    uint64_t init_seed = 1234;

    int64_t level_width(int level) const {  // level 1..4
        return base_width << (level - 1);
    }
};

inline ModelConfig tiny_config(ShiftVariant shift = ShiftVariant::deform,
                               ScanVariant scan = ScanVariant::skip) {
    ModelConfig cfg;
    cfg.base_width = 8;
    cfg.blocks = {1, 1, 1, 1};
    cfg.shift = shift;
    cfg.scan = scan;
    return cfg;
}

inline void validate_config(const ModelConfig& cfg) {
    if (cfg.base_width < 4 || cfg.base_width % 4 != 0)
        throw std::invalid_argument("ModelConfig: base width must be a positive multiple of 4");
    for (int n : cfg.blocks)
        if (n < 1) throw std::invalid_argument("ModelConfig: block counts must be >= 1");
    if (cfg.q < 1) throw std::invalid_argument("ModelConfig: q must be >= 1");
    if (cfg.p < 1) throw std::invalid_argument("ModelConfig: p must be >= 1");
    if (cfg.hidden_ratio < 1) throw std::invalid_argument("ModelConfig: hidden ratio must be >= 1");
    if (cfg.adain_eps <= 0) throw std::invalid_argument("ModelConfig: adain eps must be > 0");
}

// Scan plan for one level. The skip step falls back to the largest divisor of
// both dims not exceeding the configured p, so deep levels with tiny or odd
// extents stay valid.
inline ScanPlan level_plan(const ModelConfig& cfg, int64_t H, int64_t W) {
    if (cfg.scan == ScanVariant::skip) {
        int pe = cfg.p;
        while (pe > 1 && (H % pe != 0 || W % pe != 0)) --pe;
        return make_scan_plan(ScanVariant::skip, H, W, pe);
    }
    return make_scan_plan(cfg.scan, H, W);
}

// ---------------------------------------------------------------------------
// AdaIN: re-normalize content features so per-channel statistics match the
// style features. Both the scale and its inverse carry the same eps, so
// adain(x, x) is exactly x.

inline Tensord adain(const Tensord& content, const Tensord& style, double eps = 1e-5) {
    if (!content.same_shape(style)) throw std::invalid_argument("adain: shape mismatch");
    auto [mc, sc] = channel_stats(content);
    auto [ms, ss] = channel_stats(style);
    const int64_t C = content.dim(0), N = content.dim(1) * content.dim(2);
    Tensord out(content.shape());
    for (int64_t c = 0; c < C; ++c) {
        const double ratio = (ss[c] + eps) / (sc[c] + eps);
        for (int64_t i = 0; i < N; ++i)
            out[c * N + i] = ratio * (content[c * N + i] - mc[c]) + ms[c];
    }
    return out;
}

inline Var adain(Tape& t, Var content, Var style, double eps) {
    if (!t.value(content).same_shape(t.value(style)))
        throw std::invalid_argument("adain: shape mismatch");
    Var mc = t.channel_mean(content);
    Var sc = t.channel_std(content);
    Var ms = t.channel_mean(style);
    Var ss = t.channel_std(style);
    Var ratio = t.div(t.add_const(ss, eps), t.add_const(sc, eps));
    Var shift = t.sub(ms, t.mul(mc, ratio));
    return t.channel_affine(content, ratio, shift);
}

// ---------------------------------------------------------------------------
// reflection padding to a size multiple (bottom/right), with the record
// needed to crop back

struct PadRecord {
    int64_t orig_h = 0, orig_w = 0;
};

namespace detail {
inline int64_t reflect_index(int64_t j, int64_t n) {
    if (n == 1) return 0;
    const int64_t period = 2 * n;
    int64_t m = j % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}
}  // namespace detail

inline std::pair<Tensord, PadRecord> pad_reflect(const Tensord& img, int64_t multiple = 16) {
    if (img.ndim() != 3) throw std::invalid_argument("pad_reflect: expects [C x H x W]");
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const int64_t Hp = (H + multiple - 1) / multiple * multiple;
    const int64_t Wp = (W + multiple - 1) / multiple * multiple;
    PadRecord rec{H, W};
    if (Hp == H && Wp == W) return {img, rec};
    Tensord out({C, Hp, Wp});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < Hp; ++y) {
            const int64_t sy = detail::reflect_index(y, H);
            for (int64_t x = 0; x < Wp; ++x)
                out(c, y, x) = img(c, sy, detail::reflect_index(x, W));
        }
    return {out, rec};
}

inline Tensord crop_to(const Tensord& img, const PadRecord& rec) {
    const int64_t C = img.dim(0);
    Tensord out({C, rec.orig_h, rec.orig_w});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < rec.orig_h; ++y)
            for (int64_t x = 0; x < rec.orig_w; ++x) out(c, y, x) = img(c, y, x);
    return out;
}

// ---------------------------------------------------------------------------
// model

// Optional instrumentation of a forward pass.
struct ForwardTrace {
    std::vector<Var> fused;  // AdaIN-fused skip features, levels 1..4
};

class StyleRwkvModel {
public:
    explicit StyleRwkvModel(ModelConfig cfg) : cfg_(cfg) {
        validate_config(cfg_);
        Rng rng(cfg_.init_seed);
        const int64_t C = cfg_.base_width;

        in_w.value = fan_in_uniform(rng, {C, 3, 3, 3}, 3 * 9);
        in_b.value = Tensord({C});
        reg_.add(in_w, "in_proj.w");
        reg_.add(in_b, "in_proj.b");

        for (int level = 1; level <= 3; ++level) {
            const int64_t w = cfg_.level_width(level);
            auto& blocks = enc_[static_cast<size_t>(level - 1)];
            // the registry keeps pointers into these vectors; they must never
            // reallocate after registration
            blocks.reserve(static_cast<size_t>(cfg_.blocks[static_cast<size_t>(level - 1)]));
            for (int i = 0; i < cfg_.blocks[static_cast<size_t>(level - 1)]; ++i) {
                blocks.push_back(make_block(w, cfg_.hidden_ratio, cfg_.shift, rng));
                register_block(reg_, blocks.back(),
                               "enc" + std::to_string(level) + ".block" + std::to_string(i));
            }
            auto& dw = down_w_[static_cast<size_t>(level - 1)];
            auto& db = down_b_[static_cast<size_t>(level - 1)];
            dw.value = fan_in_uniform(rng, {w / 2, w, 1, 1}, w);
            db.value = Tensord({w / 2});
            reg_.add(dw, "down" + std::to_string(level) + ".w");
            reg_.add(db, "down" + std::to_string(level) + ".b");
        }

        const int64_t w4 = cfg_.level_width(4);
        bottleneck_.reserve(static_cast<size_t>(cfg_.blocks[3]));
        for (int i = 0; i < cfg_.blocks[3]; ++i) {
            bottleneck_.push_back(make_block(w4, cfg_.hidden_ratio, cfg_.shift, rng));
            register_block(reg_, bottleneck_.back(), "bottleneck.block" + std::to_string(i));
        }

        for (int level = 3; level >= 1; --level) {
            const int64_t w = cfg_.level_width(level);
            auto& d = dec_[static_cast<size_t>(level - 1)];
            // upsample conv: after pixel_shuffle(2), channels are w/2
            d.up_w.value = fan_in_uniform(rng, {w, w / 2, 1, 1}, w / 2);
            d.up_b.value = Tensord({w});
            reg_.add(d.up_w, "dec" + std::to_string(level) + ".up.w");
            reg_.add(d.up_b, "dec" + std::to_string(level) + ".up.b");
            d.fuse_w.value = fan_in_uniform(rng, {w, 2 * w, 1, 1}, 2 * w);
            d.fuse_b.value = Tensord({w});
            reg_.add(d.fuse_w, "dec" + std::to_string(level) + ".fuse.w");
            reg_.add(d.fuse_b, "dec" + std::to_string(level) + ".fuse.b");
            d.blocks.reserve(static_cast<size_t>(cfg_.blocks[static_cast<size_t>(level - 1)]));
            for (int i = 0; i < cfg_.blocks[static_cast<size_t>(level - 1)]; ++i) {
                d.blocks.push_back(make_block(w, cfg_.hidden_ratio, cfg_.shift, rng));
                register_block(reg_, d.blocks.back(),
                               "dec" + std::to_string(level) + ".block" + std::to_string(i));
            }
        }

        head_w.value = fan_in_uniform(rng, {3, C / 4, 3, 3}, C / 4 * 9);
        head_b.value = Tensord({3});
        reg_.add(head_w, "head.w");
        reg_.add(head_b, "head.b");
    }

    StyleRwkvModel(const StyleRwkvModel&) = delete;
    StyleRwkvModel& operator=(const StyleRwkvModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }
    int64_t param_count() const { return reg_.total_scalars(); }

    Binding bind(Tape& t, bool trainable) const { return strwkv::bind(t, reg_, trainable); }

    // Encoder features F0..F4: the input projection, the three block levels,
    // and the downsampled bottleneck input at 8C.
    std::array<Var, 5> encode(Tape& t, const Binding& b, Var img) const {
        check_image(t.value(img));
        std::array<Var, 5> f;
        Var x = t.conv2d(img, b[in_w], b[in_b], 2, 1);
        f[0] = x;
        for (int level = 1; level <= 3; ++level) {
            x = run_blocks(t, b, enc_[static_cast<size_t>(level - 1)], x);
            f[static_cast<size_t>(level)] = x;
            x = t.pixel_unshuffle(t.conv2d(x, b[down_w_[static_cast<size_t>(level - 1)]],
                                           b[down_b_[static_cast<size_t>(level - 1)]], 1, 0),
                                  2);
        }
        f[4] = x;
        return f;
    }

    Var forward(Tape& t, const Binding& b, Var content, Var style,
                ForwardTrace* trace = nullptr) const {
        if (!t.value(content).same_shape(t.value(style)))
            throw std::invalid_argument("forward: content/style dims mismatch");
        auto fc = encode(t, b, content);
        auto fs = encode(t, b, style);
        std::array<Var, 5> fused;
        for (int i = 1; i <= 4; ++i) {
            fused[static_cast<size_t>(i)] =
                adain(t, fc[static_cast<size_t>(i)], fs[static_cast<size_t>(i)], cfg_.adain_eps);
            if (trace) trace->fused.push_back(fused[static_cast<size_t>(i)]);
        }

        Var x = run_blocks(t, b, bottleneck_, fused[4]);
        for (int level = 3; level >= 1; --level) {
            const auto& d = dec_[static_cast<size_t>(level - 1)];
            x = t.conv2d(t.pixel_shuffle(x, 2), b[d.up_w], b[d.up_b], 1, 0);
            x = t.conv2d(t.concat_channels(x, fused[static_cast<size_t>(level)]), b[d.fuse_w],
                         b[d.fuse_b], 1, 0);
            x = run_blocks(t, b, d.blocks, x);
        }
        return t.conv2d(t.pixel_shuffle(x, 2), b[head_w], b[head_b], 1, 1);
    }

    // Inference: pads both images to multiples of 16, forwards, crops to the
    // content's original size.
    Tensord stylize(const Tensord& content, const Tensord& style) const {
        auto [cp, crec] = pad_reflect(content);
        auto [sp, srec] = pad_reflect(style);
        if (!cp.same_shape(sp))
            throw std::invalid_argument("stylize: content/style sizes incompatible after padding");
        Tape t;
        Binding b = bind(t, false);
        Var out = forward(t, b, t.leaf(cp, false), t.leaf(sp, false));
        return crop_to(t.value(out), crec);
    }

private:
    struct DecStage {
        Param up_w, up_b, fuse_w, fuse_b;
        std::vector<BlockWeights> blocks;
    };

    static void check_image(const Tensord& img) {
        if (img.ndim() != 3 || img.dim(0) != 3)
            throw std::invalid_argument("model: expects a [3 x H x W] image");
        if (img.dim(1) % 16 != 0 || img.dim(2) % 16 != 0)
            throw std::invalid_argument("model: image dims must be multiples of 16 (pad first)");
    }

    Var run_blocks(Tape& t, const Binding& b, const std::vector<BlockWeights>& blocks,
                   Var x) const {
        const auto& shape = t.value(x).shape();
        ScanPlan plan = level_plan(cfg_, shape[1], shape[2]);
        for (const auto& blk : blocks) x = block_forward(t, b, blk, x, plan, cfg_.q);
        return x;
    }

    ModelConfig cfg_;
    ParamRegistry reg_;

    Param in_w, in_b;
    std::array<std::vector<BlockWeights>, 3> enc_;
    std::array<Param, 3> down_w_, down_b_;
    std::vector<BlockWeights> bottleneck_;
    std::array<DecStage, 3> dec_;
    Param head_w, head_b;
};

// Deterministic synthetic test image in [0, 1]: smooth sinusoid fields plus a
// few seeded blobs, enough structure for the losses to bite on.
inline Tensord make_synthetic_image(int64_t H, int64_t W, uint64_t seed) {
    Rng rng(seed);
    const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
    const double phase = rng.uniform(0.0, 6.28);
    Tensord img({3, H, W});
    struct Blob {
        double cy, cx, r, amp;
        int ch;
    };
    std::vector<Blob> blobs;
    for (int i = 0; i < 4; ++i)
        blobs.push_back({rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.25),
                         rng.uniform(-0.4, 0.4), static_cast<int>(rng.uniform_int(0, 2))});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const double u = static_cast<double>(y) / static_cast<double>(H);
                const double v = static_cast<double>(x) / static_cast<double>(W);
                double val = 0.5 + 0.25 * std::sin(6.28 * (fx * u + 0.3 * c) + phase) *
                                       std::cos(6.28 * (fy * v - 0.2 * c));
                for (const auto& bl : blobs) {
                    if (bl.ch != c) continue;
                    const double d2 = (u - bl.cy) * (u - bl.cy) + (v - bl.cx) * (v - bl.cx);
                    val += bl.amp * std::exp(-d2 / (bl.r * bl.r));
                }
                img(c, y, x) = std::min(1.0, std::max(0.0, val));
            }
    return img;
}

}  // namespace strwkv

#pragma once

// One ST-RWKV block: a spatial mix (token interaction through Re-WKV over
// scanned sequences) followed by a channel mix (per-token feature fusion),
// each pre-normalized and wrapped in a residual connection by the caller of
// block_forward.
//
// Parameters are held as plain tensors inside Param slots; a ParamRegistry
// assigns every slot a stable index and name, and bind() turns the whole set
// into tape leaves once per tape so gradients accumulate in one place even
// when several forwards share a tape.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "strwkv/autodiff.hpp"
#include "strwkv/scan.hpp"
#include "strwkv/shift.hpp"
#include "strwkv/tensor.hpp"

namespace strwkv {

struct Param {
    Tensord value;
    int idx = -1;
};

class ParamRegistry {
public:
    void add(Param& p, std::string name) {
        p.idx = static_cast<int>(params_.size());
        params_.push_back(&p);
        names_.push_back(std::move(name));
    }
    size_t size() const { return params_.size(); }
    Param& param(size_t i) { return *params_[i]; }
    const Param& param(size_t i) const { return *params_[i]; }
    const std::string& name(size_t i) const { return names_[i]; }

    int64_t total_scalars() const {
        int64_t n = 0;
        for (const Param* p : params_) n += p->value.numel();
        return n;
    }

    Param& find(const std::string& name) {
        for (size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return *params_[i];
        throw std::invalid_argument("ParamRegistry: no parameter named " + name);
    }
    const Tensord& value_of(const std::string& name) const {
        for (size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return params_[i]->value;
        throw std::invalid_argument("ParamRegistry: no parameter named " + name);
    }

private:
    std::vector<Param*> params_;
    std::vector<std::string> names_;
};

// Per-tape view of a parameter set.
struct Binding {
    Tape* tape = nullptr;
    std::vector<Var> vars;

    Var operator[](const Param& p) const {
        if (p.idx < 0 || p.idx >= static_cast<int>(vars.size()))
            throw std::invalid_argument("Binding: parameter not bound");
        return vars[static_cast<size_t>(p.idx)];
    }
};

inline Binding bind(Tape& tape, const ParamRegistry& reg, bool trainable) {
    ensure_builtin_customs();
    Binding b;
    b.tape = &tape;
    b.vars.reserve(reg.size());
    for (size_t i = 0; i < reg.size(); ++i) b.vars.push_back(tape.leaf(reg.param(i).value, trainable));
    return b;
}

// ---------------------------------------------------------------------------
// shift layer: one of the four mechanisms, with the parameters that variant
// needs. Identity at initialization for every variant.

struct ShiftLayer {
    ShiftVariant variant = ShiftVariant::deform;
    Param mix;                                  // uni
    Param predictor_w, predictor_b, depthwise;  // deform; omni uses depthwise only
    double offset_scale = 1.0;
};

inline ShiftLayer make_shift_layer(ShiftVariant variant, int64_t C) {
    ShiftLayer s;
    s.variant = variant;
    switch (variant) {
        case ShiftVariant::uni:
            s.mix.value = Tensord({C});
            break;
        case ShiftVariant::quad:
            break;  // parameter-free
        case ShiftVariant::omni: {
            auto d = make_deform_params(C);
            s.depthwise.value = d.depthwise;
            break;
        }
        case ShiftVariant::deform: {
            auto d = make_deform_params(C);
            s.predictor_w.value = d.predictor_w;
            s.predictor_b.value = d.predictor_b;
            s.depthwise.value = d.depthwise;
            break;
        }
    }
    return s;
}

inline void register_shift(ParamRegistry& reg, ShiftLayer& s, const std::string& prefix) {
    switch (s.variant) {
        case ShiftVariant::uni:
            reg.add(s.mix, prefix + ".mix");
            break;
        case ShiftVariant::quad:
            break;
        case ShiftVariant::omni:
            reg.add(s.depthwise, prefix + ".depthwise");
            break;
        case ShiftVariant::deform:
            reg.add(s.predictor_w, prefix + ".predictor_w");
            reg.add(s.predictor_b, prefix + ".predictor_b");
            reg.add(s.depthwise, prefix + ".depthwise");
            break;
    }
}

inline Var apply_shift(Tape& t, const Binding& b, const ShiftLayer& s, Var x_img) {
    switch (s.variant) {
        case ShiftVariant::uni: {
            const auto& shape = t.value(x_img).shape();
            ScanPlan rm = make_scan_plan(ScanVariant::identity, shape[1], shape[2]);
            return t.s_merge(t.uni_shift(t.s_scan(x_img, rm), b[s.mix]), rm);
        }
        case ShiftVariant::quad:
            return t.quad_shift(x_img);
        case ShiftVariant::omni:
            return t.omni_shift(x_img, b[s.depthwise]);
        case ShiftVariant::deform:
            return t.custom("deform_shift",
                            {x_img, b[s.predictor_w], b[s.predictor_b], b[s.depthwise],
                             t.leaf(Tensord({1}, s.offset_scale), false)});
    }
    throw std::logic_error("apply_shift: unreachable");
}

// ---------------------------------------------------------------------------
// block weights

struct SpatialMixWeights {
    Param ln_gamma, ln_beta;
    ShiftLayer shift_r, shift_k, shift_v;
    Param w_r, w_k, w_v, w_o;  // [C x C]
    Param wkv_w_raw, wkv_u;    // [C]
    double ln_eps = 1e-5;
};

struct ChannelMixWeights {
    Param ln_gamma, ln_beta;
    ShiftLayer shift_r, shift_k;
    Param w_r;  // [C x C]
    Param w_k;  // [C x hC]
    Param w_v;  // [hC x C]
    Param w_o;  // [C x C]
    double ln_eps = 1e-5;
};

struct BlockWeights {
    SpatialMixWeights spatial;
    ChannelMixWeights channel;
};

inline BlockWeights make_block(int64_t C, int hidden_ratio, ShiftVariant variant, Rng& rng) {
    BlockWeights blk;
    auto& s = blk.spatial;
    s.ln_gamma.value = Tensord({C}, 1.0);
    s.ln_beta.value = Tensord({C});
    s.shift_r = make_shift_layer(variant, C);
    s.shift_k = make_shift_layer(variant, C);
    s.shift_v = make_shift_layer(variant, C);
    s.w_r.value = fan_in_uniform(rng, {C, C}, C);
    s.w_k.value = fan_in_uniform(rng, {C, C}, C);
    s.w_v.value = fan_in_uniform(rng, {C, C}, C);
    s.w_o.value = fan_in_uniform(rng, {C, C}, C);
    s.wkv_w_raw.value = Tensord({C}, 1.0);
    s.wkv_u.value = Tensord({C});

    auto& c = blk.channel;
    const int64_t hc = hidden_ratio * C;
    c.ln_gamma.value = Tensord({C}, 1.0);
    c.ln_beta.value = Tensord({C});
    c.shift_r = make_shift_layer(variant, C);
    c.shift_k = make_shift_layer(variant, C);
    c.w_r.value = fan_in_uniform(rng, {C, C}, C);
    c.w_k.value = fan_in_uniform(rng, {C, hc}, C);
    c.w_v.value = fan_in_uniform(rng, {hc, C}, hc);
    c.w_o.value = fan_in_uniform(rng, {C, C}, C);
    return blk;
}

inline void register_block(ParamRegistry& reg, BlockWeights& blk, const std::string& prefix) {
    auto& s = blk.spatial;
    reg.add(s.ln_gamma, prefix + ".spatial.ln_gamma");
    reg.add(s.ln_beta, prefix + ".spatial.ln_beta");
    register_shift(reg, s.shift_r, prefix + ".spatial.shift_r");
    register_shift(reg, s.shift_k, prefix + ".spatial.shift_k");
    register_shift(reg, s.shift_v, prefix + ".spatial.shift_v");
    reg.add(s.w_r, prefix + ".spatial.w_r");
    reg.add(s.w_k, prefix + ".spatial.w_k");
    reg.add(s.w_v, prefix + ".spatial.w_v");
    reg.add(s.w_o, prefix + ".spatial.w_o");
    reg.add(s.wkv_w_raw, prefix + ".spatial.wkv_w_raw");
    reg.add(s.wkv_u, prefix + ".spatial.wkv_u");

    auto& c = blk.channel;
    reg.add(c.ln_gamma, prefix + ".channel.ln_gamma");
    reg.add(c.ln_beta, prefix + ".channel.ln_beta");
    register_shift(reg, c.shift_r, prefix + ".channel.shift_r");
    register_shift(reg, c.shift_k, prefix + ".channel.shift_k");
    reg.add(c.w_r, prefix + ".channel.w_r");
    reg.add(c.w_k, prefix + ".channel.w_k");
    reg.add(c.w_v, prefix + ".channel.w_v");
    reg.add(c.w_o, prefix + ".channel.w_o");
}

// ---------------------------------------------------------------------------
// forward

// Re-WKV on the tape: q Bi-WKV applications with rotating token orders.
inline Var re_wkv_tape(Tape& t, Var k, Var v, Var w_raw, Var u, int q,
                       const std::vector<std::vector<int64_t>>& perms) {
    if (q < 1) throw std::invalid_argument("re_wkv_tape: q must be >= 1");
    if (perms.empty()) throw std::invalid_argument("re_wkv_tape: perms must be nonempty");
    Var cur = v;
    for (int j = 0; j < q; ++j) {
        const auto& perm = perms[static_cast<size_t>(j) % perms.size()];
        std::vector<int64_t> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
        Var kp = t.permute_rows(k, perm);
        Var vp = t.permute_rows(cur, perm);
        Var y = t.custom("bi_wkv", {kp, vp, w_raw, u});
        cur = t.permute_rows(y, inv);
    }
    return cur;
}

// Sequence orders Re-WKV rotates through: the scanned order itself, then its
// reverse. On the already-scanned sequence these are the identity and the
// flip.
inline std::vector<std::vector<int64_t>> rewkv_sequence_orders(int64_t T) {
    std::vector<int64_t> fwd(static_cast<size_t>(T)), rev(static_cast<size_t>(T));
    for (int64_t i = 0; i < T; ++i) {
        fwd[static_cast<size_t>(i)] = i;
        rev[static_cast<size_t>(i)] = T - 1 - i;
    }
    return {fwd, rev};
}

inline Var pre_norm(Tape& t, const Binding& b, Var x_img, const Param& gamma, const Param& beta,
                    double eps) {
    const auto& shape = t.value(x_img).shape();
    ScanPlan rm = make_scan_plan(ScanVariant::identity, shape[1], shape[2]);
    return t.s_merge(t.layer_norm(t.s_scan(x_img, rm), b[gamma], b[beta], eps), rm);
}

inline Var spatial_mix(Tape& t, const Binding& b, const SpatialMixWeights& w, Var x_img,
                       const ScanPlan& plan, int q) {
    const auto& shape = t.value(x_img).shape();
    if (shape[1] != plan.H || shape[2] != plan.W)
        throw std::invalid_argument("spatial_mix: plan does not match feature dims");
    Var xn = pre_norm(t, b, x_img, w.ln_gamma, w.ln_beta, w.ln_eps);

    Var r = t.matmul(t.s_scan(apply_shift(t, b, w.shift_r, xn), plan), b[w.w_r]);
    Var k = t.matmul(t.s_scan(apply_shift(t, b, w.shift_k, xn), plan), b[w.w_k]);
    Var v = t.matmul(t.s_scan(apply_shift(t, b, w.shift_v, xn), plan), b[w.w_v]);

    Var wkv = re_wkv_tape(t, k, v, b[w.wkv_w_raw], b[w.wkv_u], q,
                          rewkv_sequence_orders(plan.tokens()));
    Var gated = t.mul(t.sigmoid(r), wkv);
    return t.s_merge(t.matmul(gated, b[w.w_o]), plan);
}

inline Var channel_mix(Tape& t, const Binding& b, const ChannelMixWeights& w, Var x_img) {
    const auto& shape = t.value(x_img).shape();
    ScanPlan rm = make_scan_plan(ScanVariant::identity, shape[1], shape[2]);
    Var xn = pre_norm(t, b, x_img, w.ln_gamma, w.ln_beta, w.ln_eps);

    Var r = t.matmul(t.s_scan(apply_shift(t, b, w.shift_r, xn), rm), b[w.w_r]);
    Var k = t.matmul(t.s_scan(apply_shift(t, b, w.shift_k, xn), rm), b[w.w_k]);
    Var v = t.matmul(t.squared_relu(k), b[w.w_v]);
    Var gated = t.mul(t.sigmoid(r), v);
    return t.s_merge(t.matmul(gated, b[w.w_o]), rm);
}

inline Var block_forward(Tape& t, const Binding& b, const BlockWeights& blk, Var x_img,
                         const ScanPlan& plan, int q) {
    Var x = t.add(x_img, spatial_mix(t, b, blk.spatial, x_img, plan, q));
    return t.add(x, channel_mix(t, b, blk.channel, x));
}

}  // namespace strwkv

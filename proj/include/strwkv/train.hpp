#pragma once

// Adam and the toy training loop: full-batch optimization of the weighted
// loss on a single image pair, plus the (content, content) and (style, style)
// identity pairs. Deterministic for a fixed seed; any non-finite loss aborts.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "strwkv/block.hpp"
#include "strwkv/losses.hpp"
#include "strwkv/model.hpp"
#include "strwkv/tensor.hpp"

namespace strwkv {

struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::vector<Tensord> m, v;

    void init(const ParamRegistry& reg) {
        m.clear();
        v.clear();
        for (size_t i = 0; i < reg.size(); ++i) {
            m.emplace_back(reg.param(i).value.shape());
            v.emplace_back(reg.param(i).value.shape());
        }
        step = 0;
    }
};

// Bias-corrected Adam update applied to every registered parameter.
inline void adam_step(ParamRegistry& reg, const std::vector<Tensord>& grads, AdamState& st) {
    if (grads.size() != reg.size()) throw std::invalid_argument("adam_step: gradient count mismatch");
    if (st.m.size() != reg.size()) st.init(reg);
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < reg.size(); ++i) {
        Tensord& p = reg.param(i).value;
        const Tensord& g = grads[i];
        if (!p.same_shape(g)) throw std::invalid_argument("adam_step: gradient shape mismatch");
        Tensord& m = st.m[i];
        Tensord& v = st.v[i];
        for (int64_t j = 0; j < p.numel(); ++j) {
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// Scales all gradients so their global L2 norm is at most max_norm.
inline void clip_global_norm(std::vector<Tensord>& grads, double max_norm) {
    double ss = 0;
    for (const Tensord& g : grads)
        for (int64_t j = 0; j < g.numel(); ++j) ss += g[j] * g[j];
    const double norm = std::sqrt(ss);
    if (norm <= max_norm || norm == 0) return;
    const double s = max_norm / norm;
    for (Tensord& g : grads)
        for (int64_t j = 0; j < g.numel(); ++j) g[j] *= s;
}

struct TrainResult {
    // curve[0] is the initial loss, curve[i] the loss before update i+1,
    // curve[steps] the loss after the final update
    std::vector<double> curve;
    std::vector<LossReport> reports;  // same indexing
};

// The toy default is larger than the full-training 1e-4 (AdamState's
// default): at a few hundred full-batch steps on one pair, 1e-4 barely moves
// the output head.
inline constexpr double kToyLearningRate = 3e-3;

inline TrainResult train_toy(StyleRwkvModel& model, const Tensord& content, const Tensord& style,
                             int steps, const FeatureExtractor& fe, const LossWeights& weights = {},
                             double lr = kToyLearningRate) {
    const ModelConfig& cfg = model.config();
    if (cfg.base_width > 8) throw std::invalid_argument("train_toy: base width must be <= 8");
    for (int n : cfg.blocks)
        if (n != 1) throw std::invalid_argument("train_toy: block counts must all be 1");
    if (content.dim(1) > 64 || content.dim(2) > 64)
        throw std::invalid_argument("train_toy: images must be <= 64x64");

    AdamState adam;
    adam.lr = lr;
    adam.init(model.params());

    auto evaluate = [&](bool with_grads, std::vector<Tensord>* grads) {
        Tape t;
        Binding b = model.bind(t, with_grads);
        Var vc = t.leaf(content, false), vs = t.leaf(style, false);
        Var io = model.forward(t, b, vc, vs);
        Var icc = model.forward(t, b, vc, vc);
        Var iss = model.forward(t, b, vs, vs);
        Var lc = content_loss(t, io, vc, fe);
        Var ls = style_loss(t, io, vs, fe);
        auto [id1, id2] = identity_losses(t, icc, vc, iss, vs, fe);
        Var tot = total_loss(t, lc, ls, id1, id2, weights);
        const double loss = t.value(tot)[0];
        if (!std::isfinite(loss))
            throw std::runtime_error("train_toy: loss diverged to a non-finite value at step " +
                                     std::to_string(adam.step));
        if (with_grads) {
            t.backward(tot);
            grads->clear();
            for (Var pv : b.vars) grads->push_back(t.grad(pv));
        }
        return LossReport{t.value(lc)[0], t.value(ls)[0], t.value(id1)[0], t.value(id2)[0], loss};
    };

    TrainResult res;
    for (int step = 0; step < steps; ++step) {
        std::vector<Tensord> grads;
        LossReport rep = evaluate(true, &grads);
        res.curve.push_back(rep.total);
        res.reports.push_back(rep);
        clip_global_norm(grads, 1.0);
        adam_step(model.params(), grads, adam);
    }
    LossReport final_rep = evaluate(false, nullptr);
    res.curve.push_back(final_rep.total);
    res.reports.push_back(final_rep);
    return res;
}

// Config-level entry point: builds a tiny model seeded by `seed` and trains it.
inline TrainResult train_toy(const ModelConfig& cfg_in, const Tensord& content,
                             const Tensord& style, int steps, uint64_t seed,
                             const FeatureExtractor& fe, const LossWeights& weights = {},
                             double lr = kToyLearningRate) {
    ModelConfig cfg = cfg_in;
    cfg.init_seed = seed;
    StyleRwkvModel model(cfg);
    return train_toy(model, content, style, steps, fe, weights, lr);
}

}  // namespace strwkv

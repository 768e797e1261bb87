#pragma once

// Perceptual losses over a pluggable feature extractor, the identity losses,
// the weighted total, and the ArtFID combiner. The norm written ||.||_2 below
// is root-mean-square over elements, so magnitudes stay comparable across
// feature sizes.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "strwkv/autodiff.hpp"
#include "strwkv/tensor.hpp"

namespace strwkv {

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::vector<Var> features(Tape& t, Var image) const = 0;
    virtual int num_layers() const = 0;
    virtual std::string name() const = 0;

    std::vector<Tensord> features(const Tensord& image) const {
        Tape t;
        std::vector<Tensord> out;
        for (Var v : features(t, t.leaf(image, false))) out.push_back(t.value(v));
        return out;
    }
};

// The image itself as the single feature map.
class IdentityFeatures final : public FeatureExtractor {
public:
    using FeatureExtractor::features;
    std::vector<Var> features(Tape&, Var image) const override { return {image}; }
    int num_layers() const override { return 1; }
    std::string name() const override { return "identity"; }
};

// Four fixed-seed random 3x3 stride-2 conv stages, widths 8/16/32/64, frozen.
// Stands in for a pretrained backbone so the perceptual-loss math is fully
// exercised without external weights.
class TinyFeatureNet final : public FeatureExtractor {
public:
    using FeatureExtractor::features;
    explicit TinyFeatureNet(uint64_t seed = 42) {
        Rng rng(seed);
        int64_t cin = 3;
        for (int64_t cout : {8, 16, 32, 64}) {
            weights_.push_back(fan_in_uniform(rng, {cout, cin, 3, 3}, cin * 9));
            biases_.push_back(rng.uniform_tensor({cout}, -0.1, 0.1));
            cin = cout;
        }
    }

    std::vector<Var> features(Tape& t, Var image) const override {
        std::vector<Var> out;
        Var x = image;
        for (size_t i = 0; i < weights_.size(); ++i) {
            x = t.conv2d(x, t.leaf(weights_[i], false), t.leaf(biases_[i], false), 2, 1);
            out.push_back(x);
        }
        return out;
    }
    int num_layers() const override { return static_cast<int>(weights_.size()); }
    std::string name() const override { return "tiny"; }

private:
    std::vector<Tensord> weights_;
    std::vector<Tensord> biases_;
};

inline std::unique_ptr<FeatureExtractor> make_feature_extractor(const std::string& name) {
    if (name == "tiny") return std::make_unique<TinyFeatureNet>();
    if (name == "identity") return std::make_unique<IdentityFeatures>();
    throw std::invalid_argument("unknown feature extractor: " + name);
}

struct LossWeights {
    double content = 8.0;
    double style = 15.0;
    double id1 = 100.0;
    double id2 = 1.0;
};

// mean over layers of ||phi_i(a) - phi_i(b)||
inline Var feature_distance(Tape& t, Var a, Var b, const FeatureExtractor& fe) {
    auto fa = fe.features(t, a);
    auto fb = fe.features(t, b);
    Var acc;
    for (size_t i = 0; i < fa.size(); ++i) {
        Var d = t.rms(t.sub(fa[i], fb[i]));
        acc = i == 0 ? d : t.add(acc, d);
    }
    return t.scale(acc, 1.0 / static_cast<double>(fa.size()));
}

inline Var content_loss(Tape& t, Var output, Var content, const FeatureExtractor& fe) {
    return feature_distance(t, output, content, fe);
}

// mean over layers of ||mu(phi_i(o)) - mu(phi_i(s))|| + ||sigma(.) - sigma(.)||
inline Var style_loss(Tape& t, Var output, Var style, const FeatureExtractor& fe) {
    auto fo = fe.features(t, output);
    auto fs = fe.features(t, style);
    Var acc;
    for (size_t i = 0; i < fo.size(); ++i) {
        Var dm = t.rms(t.sub(t.channel_mean(fo[i]), t.channel_mean(fs[i])));
        Var ds = t.rms(t.sub(t.channel_std(fo[i]), t.channel_std(fs[i])));
        Var term = t.add(dm, ds);
        acc = i == 0 ? term : t.add(acc, term);
    }
    return t.scale(acc, 1.0 / static_cast<double>(fo.size()));
}

// L_id1 in pixel space, L_id2 through the extractor.
inline std::pair<Var, Var> identity_losses(Tape& t, Var icc, Var ic, Var iss, Var is,
                                           const FeatureExtractor& fe) {
    Var id1 = t.add(t.rms(t.sub(icc, ic)), t.rms(t.sub(iss, is)));
    Var id2 = t.add(feature_distance(t, icc, ic, fe), feature_distance(t, iss, is, fe));
    // feature_distance already divides by N_l; the sum of the two pair terms
    // shares the same per-layer averaging
    return {id1, id2};
}

inline Var total_loss(Tape& t, Var lc, Var ls, Var lid1, Var lid2, const LossWeights& w) {
    for (Var v : {lc, ls, lid1, lid2})
        ensure_finite(t.value(v), "total_loss component");
    return t.add(t.add(t.scale(lc, w.content), t.scale(ls, w.style)),
                 t.add(t.scale(lid1, w.id1), t.scale(lid2, w.id2)));
}

struct LossReport {
    double content = 0, style = 0, id1 = 0, id2 = 0, total = 0;
};

// Convenience evaluation of the full suite on plain tensors.
inline LossReport compute_losses(const Tensord& io, const Tensord& ic, const Tensord& is,
                                 const Tensord& icc, const Tensord& iss,
                                 const FeatureExtractor& fe, const LossWeights& w = {}) {
    Tape t;
    Var vio = t.leaf(io, false), vic = t.leaf(ic, false), vis = t.leaf(is, false);
    Var vicc = t.leaf(icc, false), viss = t.leaf(iss, false);
    Var lc = content_loss(t, vio, vic, fe);
    Var ls = style_loss(t, vio, vis, fe);
    auto [id1, id2] = identity_losses(t, vicc, vic, viss, vis, fe);
    Var tot = total_loss(t, lc, ls, id1, id2, w);
    return {t.value(lc)[0], t.value(ls)[0], t.value(id1)[0], t.value(id2)[0], t.value(tot)[0]};
}

// ArtFID = (1 + LPIPS) * (1 + FID). FID and LPIPS are inputs here, not
// computed by this library.
inline double artfid(double fid, double lpips) {
    if (fid < 0 || lpips < 0) throw std::invalid_argument("artfid: inputs must be non-negative");
    return (1.0 + lpips) * (1.0 + fid);
}

}  // namespace strwkv

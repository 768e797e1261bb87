#pragma once

// Reverse-mode differentiation tape over the tensor kernels. Forward values
// are computed eagerly; each recorded node carries a closure that scatters the
// upstream gradient into its inputs. backward() walks the tape once in
// reverse. A tape is single-threaded by contract; independent tapes may run
// on different threads.
//
// Ops whose backward is not expressible through the built-in set (the WKV
// attention kernel, the deformable shift) are recorded through a custom-op
// registry: register_custom_op() supplies the forward, and
// register_custom_gradient() the backward, looked up by kind at backward
// time, so recording with a kind that never got a gradient fails exactly
// there.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "strwkv/scan.hpp"
#include "strwkv/shift.hpp"
#include "strwkv/tensor.hpp"
#include "strwkv/wkv.hpp"

namespace strwkv {

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

struct CustomOpResult {
    Tensord value;
    std::vector<Tensord> saved;
};

using CustomForwardFn = std::function<CustomOpResult(const std::vector<Tensord>&)>;
// (input values, node value, saved, upstream grad) -> one grad per input
// (empty tensor = no gradient for that input)
using CustomBackwardFn = std::function<std::vector<Tensord>(
    const std::vector<Tensord>&, const Tensord&, const std::vector<Tensord>&, const Tensord&)>;

namespace detail {
inline std::map<std::string, CustomForwardFn>& custom_forwards() {
    static std::map<std::string, CustomForwardFn> m;
    return m;
}
inline std::map<std::string, CustomBackwardFn>& custom_backwards() {
    static std::map<std::string, CustomBackwardFn> m;
    return m;
}
}  // namespace detail

inline void register_custom_op(const std::string& kind, CustomForwardFn fn) {
    auto& m = detail::custom_forwards();
    if (m.count(kind)) throw std::invalid_argument("register_custom_op: duplicate kind " + kind);
    m[kind] = std::move(fn);
}

inline void register_custom_gradient(const std::string& kind, CustomBackwardFn fn) {
    auto& m = detail::custom_backwards();
    if (m.count(kind))
        throw std::invalid_argument("register_custom_gradient: duplicate kind " + kind);
    m[kind] = std::move(fn);
}

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensord value, bool requires_grad = true) {
        return push("leaf", {}, std::move(value), nullptr, requires_grad);
    }

    const Tensord& value(Var v) const {
        check_var(v);
        return values_[static_cast<size_t>(v.id)];
    }

    // Gradient of the last backward() with respect to v. Zero tensor if no
    // gradient reached v.
    Tensord grad(Var v) const {
        check_var(v);
        if (!nodes_[static_cast<size_t>(v.id)].needs_grad)
            throw std::invalid_argument("grad: node does not require gradients");
        const Tensord& g = grads_[static_cast<size_t>(v.id)];
        if (g.empty()) return Tensord(values_[static_cast<size_t>(v.id)].shape());
        return g;
    }

    size_t size() const { return nodes_.size(); }

    void backward(Var loss) {
        check_var(loss);
        if (value(loss).numel() != 1)
            throw std::invalid_argument("backward: loss must be a scalar");
        grads_.assign(nodes_.size(), Tensord());
        grads_[static_cast<size_t>(loss.id)] = Tensord(value(loss).shape(), 1.0);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (grads_[static_cast<size_t>(i)].empty()) continue;
            if (!n.backward) continue;
            bool any_input_needs = false;
            for (int in : n.inputs)
                if (nodes_[static_cast<size_t>(in)].needs_grad) any_input_needs = true;
            if (!any_input_needs) continue;
            n.backward(*this, i);
        }
    }

    // ------------------------------------------------------------------
    // generic entry point: parameter-free built-in kinds plus registered
    // custom ops

    Var record(const std::string& kind, const std::vector<Var>& inputs) {
        if (kind == "add") return add(at(inputs, 0), at(inputs, 1));
        if (kind == "sub") return sub(at(inputs, 0), at(inputs, 1));
        if (kind == "mul") return mul(at(inputs, 0), at(inputs, 1));
        if (kind == "div") return div(at(inputs, 0), at(inputs, 1));
        if (kind == "matmul") return matmul(at(inputs, 0), at(inputs, 1));
        if (kind == "sigmoid") return sigmoid(at(inputs, 0));
        if (kind == "squared_relu") return squared_relu(at(inputs, 0));
        if (detail::custom_forwards().count(kind)) return custom(kind, inputs);
        throw std::invalid_argument("record: unknown op-kind " + kind);
    }

    Var custom(const std::string& kind, const std::vector<Var>& inputs) {
        auto it = detail::custom_forwards().find(kind);
        if (it == detail::custom_forwards().end())
            throw std::invalid_argument("custom: no forward registered for " + kind);
        std::vector<int> ids = check_inputs(inputs);
        std::vector<Tensord> vals;
        vals.reserve(inputs.size());
        for (Var v : inputs) vals.push_back(value(v));
        CustomOpResult res = it->second(vals);
        Var out = push(kind, ids, std::move(res.value),
                       [kind](Tape& t, int self) {
                           auto bit = detail::custom_backwards().find(kind);
                           if (bit == detail::custom_backwards().end())
                               throw std::runtime_error(
                                   "backward: no gradient registered for custom op " + kind);
                           Node& n = t.nodes_[static_cast<size_t>(self)];
                           std::vector<Tensord> vals;
                           vals.reserve(n.inputs.size());
                           for (int in : n.inputs) vals.push_back(t.values_[static_cast<size_t>(in)]);
                           std::vector<Tensord> gs = bit->second(
                               vals, t.values_[static_cast<size_t>(self)], n.saved,
                               t.grads_[static_cast<size_t>(self)]);
                           if (gs.size() != n.inputs.size())
                               throw std::runtime_error("custom backward: gradient count mismatch");
                           for (size_t j = 0; j < gs.size(); ++j)
                               if (!gs[j].empty()) t.accumulate(n.inputs[j], gs[j]);
                       });
        nodes_.back().saved = std::move(res.saved);
        return out;
    }

    // ------------------------------------------------------------------
    // elementwise

    Var add(Var a, Var b) {
        auto ids = check_inputs({a, b});
        return push("add", ids, strwkv::add(value(a), value(b)), [](Tape& t, int self) {
            Node& n = t.node(self);
            t.accumulate(n.inputs[0], t.gout(self));
            t.accumulate(n.inputs[1], t.gout(self));
        });
    }

    Var sub(Var a, Var b) {
        auto ids = check_inputs({a, b});
        return push("sub", ids, strwkv::sub(value(a), value(b)), [](Tape& t, int self) {
            Node& n = t.node(self);
            t.accumulate(n.inputs[0], t.gout(self));
            t.accumulate(n.inputs[1], strwkv::scale(t.gout(self), -1.0));
        });
    }

    Var mul(Var a, Var b) {
        auto ids = check_inputs({a, b});
        return push("mul", ids, strwkv::mul(value(a), value(b)), [](Tape& t, int self) {
            Node& n = t.node(self);
            t.accumulate(n.inputs[0], strwkv::mul(t.gout(self), t.values_[static_cast<size_t>(n.inputs[1])]));
            t.accumulate(n.inputs[1], strwkv::mul(t.gout(self), t.values_[static_cast<size_t>(n.inputs[0])]));
        });
    }

    Var div(Var a, Var b) {
        auto ids = check_inputs({a, b});
        const Tensord& av = value(a);
        const Tensord& bv = value(b);
        if (!av.same_shape(bv)) throw std::invalid_argument("div: shape mismatch");
        Tensord out(av.shape());
        for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] / bv[i];
        ensure_finite(out, "div");
        return push("div", ids, std::move(out), [](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& g = t.gout(self);
            const Tensord& bv = t.values_[static_cast<size_t>(n.inputs[1])];
            const Tensord& z = t.values_[static_cast<size_t>(self)];
            Tensord ga(g.shape()), gb(g.shape());
            for (int64_t i = 0; i < g.numel(); ++i) {
                ga[i] = g[i] / bv[i];
                gb[i] = -g[i] * z[i] / bv[i];
            }
            t.accumulate(n.inputs[0], ga);
            t.accumulate(n.inputs[1], gb);
        });
    }

    Var scale(Var a, double s) {
        auto ids = check_inputs({a});
        return push("scale", ids, strwkv::scale(value(a), s), [s](Tape& t, int self) {
            t.accumulate(t.node(self).inputs[0], strwkv::scale(t.gout(self), s));
        });
    }

    Var add_const(Var a, double s) {
        auto ids = check_inputs({a});
        Tensord out = value(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
        return push("add_const", ids, std::move(out), [](Tape& t, int self) {
            t.accumulate(t.node(self).inputs[0], t.gout(self));
        });
    }

    Var sigmoid(Var a) {
        auto ids = check_inputs({a});
        return push("sigmoid", ids, strwkv::sigmoid(value(a)), [](Tape& t, int self) {
            const Tensord& y = t.values_[static_cast<size_t>(self)];
            const Tensord& g = t.gout(self);
            Tensord gx(y.shape());
            for (int64_t i = 0; i < y.numel(); ++i) gx[i] = g[i] * y[i] * (1.0 - y[i]);
            t.accumulate(t.node(self).inputs[0], gx);
        });
    }

    Var squared_relu(Var a) {
        auto ids = check_inputs({a});
        return push("squared_relu", ids, strwkv::squared_relu(value(a)), [](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& x = t.values_[static_cast<size_t>(n.inputs[0])];
            const Tensord& g = t.gout(self);
            Tensord gx(x.shape());
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] = x[i] > 0 ? 2.0 * x[i] * g[i] : 0.0;
            t.accumulate(n.inputs[0], gx);
        });
    }

    // ------------------------------------------------------------------
    // linear algebra

    Var matmul(Var a, Var w) {
        auto ids = check_inputs({a, w});
        return push("matmul", ids, strwkv::matmul(value(a), value(w)), [](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& a = t.values_[static_cast<size_t>(n.inputs[0])];
            const Tensord& w = t.values_[static_cast<size_t>(n.inputs[1])];
            const Tensord& g = t.gout(self);
            const int64_t T = a.dim(0), K = a.dim(1), N = w.dim(1);
            Tensord ga({T, K}), gw({K, N});
            for (int64_t t2 = 0; t2 < T; ++t2)
                for (int64_t n2 = 0; n2 < N; ++n2) {
                    const double gv = g(t2, n2);
                    for (int64_t k2 = 0; k2 < K; ++k2) {
                        ga(t2, k2) += gv * w(k2, n2);
                        gw(k2, n2) += gv * a(t2, k2);
                    }
                }
            t.accumulate(n.inputs[0], ga);
            t.accumulate(n.inputs[1], gw);
        });
    }

    // bias may be an invalid Var for a bias-free convolution
    Var conv2d(Var x, Var w, Var bias, int stride, int pad) {
        const bool has_bias = bias.valid();
        std::vector<Var> in = has_bias ? std::vector<Var>{x, w, bias} : std::vector<Var>{x, w};
        auto ids = check_inputs(in);
        Tensord out = has_bias ? strwkv::conv2d(value(x), value(w), value(bias), stride, pad)
                               : strwkv::conv2d(value(x), value(w), stride, pad);
        return push("conv2d", ids, std::move(out), [stride, pad, has_bias](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& x = t.values_[static_cast<size_t>(n.inputs[0])];
            const Tensord& w = t.values_[static_cast<size_t>(n.inputs[1])];
            Tensord gx, gw, gb;
            conv2d_backward(x, w, stride, pad, t.gout(self), gx, gw, gb, has_bias);
            t.accumulate(n.inputs[0], gx);
            t.accumulate(n.inputs[1], gw);
            if (has_bias) t.accumulate(n.inputs[2], gb);
        });
    }

    Var layer_norm(Var x, Var gamma, Var beta, double eps) {
        auto ids = check_inputs({x, gamma, beta});
        const Tensord& xv = value(x);
        Tensord out = strwkv::layer_norm(xv, value(gamma), value(beta), eps);
        // saved: xhat [T x C] and inv_std [T]
        const int64_t T = xv.dim(0), C = xv.dim(1);
        Tensord xhat({T, C}), inv_std({T});
        for (int64_t t = 0; t < T; ++t) {
            double mean = 0;
            for (int64_t c = 0; c < C; ++c) mean += xv(t, c);
            mean /= static_cast<double>(C);
            double var = 0;
            for (int64_t c = 0; c < C; ++c) {
                double d = xv(t, c) - mean;
                var += d * d;
            }
            var /= static_cast<double>(C);
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_std[t] = inv;
            for (int64_t c = 0; c < C; ++c) xhat(t, c) = (xv(t, c) - mean) * inv;
        }
        Var v = push("layer_norm", ids, std::move(out), [](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& gamma = t.values_[static_cast<size_t>(n.inputs[1])];
            const Tensord& xhat = n.saved[0];
            const Tensord& inv_std = n.saved[1];
            const Tensord& g = t.gout(self);
            const int64_t T = xhat.dim(0), C = xhat.dim(1);
            Tensord gx({T, C}), ggamma({C}), gbeta({C});
            for (int64_t t2 = 0; t2 < T; ++t2) {
                double mean_gg = 0, mean_ggx = 0;
                for (int64_t c = 0; c < C; ++c) {
                    const double gg = g(t2, c) * gamma[c];
                    mean_gg += gg;
                    mean_ggx += gg * xhat(t2, c);
                    ggamma[c] += g(t2, c) * xhat(t2, c);
                    gbeta[c] += g(t2, c);
                }
                mean_gg /= static_cast<double>(C);
                mean_ggx /= static_cast<double>(C);
                for (int64_t c = 0; c < C; ++c) {
                    const double gg = g(t2, c) * gamma[c];
                    gx(t2, c) = inv_std[t2] * (gg - mean_gg - xhat(t2, c) * mean_ggx);
                }
            }
            t.accumulate(n.inputs[0], gx);
            t.accumulate(n.inputs[1], ggamma);
            t.accumulate(n.inputs[2], gbeta);
        });
        nodes_.back().saved = {std::move(xhat), std::move(inv_std)};
        return v;
    }

    // ------------------------------------------------------------------
    // statistics and broadcast affine

    Var channel_mean(Var x) {
        auto ids = check_inputs({x});
        auto [mean, sd] = channel_stats(value(x));
        (void)sd;
        return push("channel_mean", ids, std::move(mean), [](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& x = t.values_[static_cast<size_t>(n.inputs[0])];
            const Tensord& g = t.gout(self);
            Tensord gx(x.shape());
            const bool cf = x.ndim() == 3;
            const int64_t C = cf ? x.dim(0) : x.dim(1);
            const int64_t N = x.numel() / C;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < N; ++i) {
                    const int64_t idx = cf ? c * N + i : i * C + c;
                    gx[idx] = g[c] / static_cast<double>(N);
                }
            t.accumulate(n.inputs[0], gx);
        });
    }

    Var channel_std(Var x) {
        auto ids = check_inputs({x});
        auto [mean, sd] = channel_stats(value(x));
        Var v = push("channel_std", ids, Tensord(sd), [](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& x = t.values_[static_cast<size_t>(n.inputs[0])];
            const Tensord& mean = n.saved[0];
            const Tensord& sd = t.values_[static_cast<size_t>(self)];
            const Tensord& g = t.gout(self);
            Tensord gx(x.shape());
            const bool cf = x.ndim() == 3;
            const int64_t C = cf ? x.dim(0) : x.dim(1);
            const int64_t N = x.numel() / C;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < N; ++i) {
                    const int64_t idx = cf ? c * N + i : i * C + c;
                    gx[idx] = g[c] * (x[idx] - mean[c]) / (static_cast<double>(N) * sd[c]);
                }
            t.accumulate(n.inputs[0], gx);
        });
        nodes_.back().saved = {std::move(mean)};
        return v;
    }

    // out[c, h, w] = s[c] * x[c, h, w] + b[c]
    Var channel_affine(Var x, Var s, Var b) {
        auto ids = check_inputs({x, s, b});
        const Tensord& xv = value(x);
        const Tensord& sv = value(s);
        const Tensord& bv = value(b);
        if (xv.ndim() != 3 || sv.numel() != xv.dim(0) || bv.numel() != xv.dim(0))
            throw std::invalid_argument("channel_affine: shape mismatch");
        Tensord out(xv.shape());
        const int64_t C = xv.dim(0), N = xv.dim(1) * xv.dim(2);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < N; ++i) out[c * N + i] = sv[c] * xv[c * N + i] + bv[c];
        ensure_finite(out, "channel_affine");
        return push("channel_affine", ids, std::move(out), [](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& x = t.values_[static_cast<size_t>(n.inputs[0])];
            const Tensord& s = t.values_[static_cast<size_t>(n.inputs[1])];
            const Tensord& g = t.gout(self);
            const int64_t C = x.dim(0), N = x.dim(1) * x.dim(2);
            Tensord gx(x.shape()), gs({C}), gb({C});
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < N; ++i) {
                    gx[c * N + i] = g[c * N + i] * s[c];
                    gs[c] += g[c * N + i] * x[c * N + i];
                    gb[c] += g[c * N + i];
                }
            t.accumulate(n.inputs[0], gx);
            t.accumulate(n.inputs[1], gs);
            t.accumulate(n.inputs[2], gb);
        });
    }

    Var sum(Var x) {
        auto ids = check_inputs({x});
        const Tensord& xv = value(x);
        double acc = 0;
        for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
        Tensord out({1});
        out[0] = acc;
        return push("sum", ids, std::move(out), [](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& x = t.values_[static_cast<size_t>(n.inputs[0])];
            t.accumulate(n.inputs[0], Tensord(x.shape(), t.gout(self)[0]));
        });
    }

    // root-mean-square over all elements; the norm used by the losses
    Var rms(Var x) {
        auto ids = check_inputs({x});
        const Tensord& xv = value(x);
        double ss = 0;
        for (int64_t i = 0; i < xv.numel(); ++i) ss += xv[i] * xv[i];
        const double n = static_cast<double>(xv.numel());
        Tensord out({1});
        out[0] = std::sqrt(ss / n);
        return push("rms", ids, std::move(out), [](Tape& t, int self) {
            Node& n2 = t.node(self);
            const Tensord& x = t.values_[static_cast<size_t>(n2.inputs[0])];
            const double y = t.values_[static_cast<size_t>(self)][0];
            const double g = t.gout(self)[0];
            Tensord gx(x.shape());
            if (y > 0) {
                const double s = g / (static_cast<double>(x.numel()) * y);
                for (int64_t i = 0; i < x.numel(); ++i) gx[i] = s * x[i];
            }
            t.accumulate(n2.inputs[0], gx);
        });
    }

    // ------------------------------------------------------------------
    // rearrangements

    Var pixel_shuffle(Var x, int r) {
        auto ids = check_inputs({x});
        return push("pixel_shuffle", ids, strwkv::pixel_shuffle(value(x), r),
                    [r](Tape& t, int self) {
                        t.accumulate(t.node(self).inputs[0],
                                     strwkv::pixel_unshuffle(t.gout(self), r));
                    });
    }

    Var pixel_unshuffle(Var x, int r) {
        auto ids = check_inputs({x});
        return push("pixel_unshuffle", ids, strwkv::pixel_unshuffle(value(x), r),
                    [r](Tape& t, int self) {
                        t.accumulate(t.node(self).inputs[0],
                                     strwkv::pixel_shuffle(t.gout(self), r));
                    });
    }

    Var s_scan(Var x, const ScanPlan& plan) {
        auto ids = check_inputs({x});
        return push("s_scan", ids, strwkv::s_scan(value(x), plan), [plan](Tape& t, int self) {
            t.accumulate(t.node(self).inputs[0], strwkv::s_merge(t.gout(self), plan));
        });
    }

    Var s_merge(Var x, const ScanPlan& plan) {
        auto ids = check_inputs({x});
        return push("s_merge", ids, strwkv::s_merge(value(x), plan), [plan](Tape& t, int self) {
            t.accumulate(t.node(self).inputs[0], strwkv::s_scan(t.gout(self), plan));
        });
    }

    Var permute_rows(Var x, std::vector<int64_t> perm) {
        auto ids = check_inputs({x});
        Tensord out = gather_rows(value(x), perm);
        return push("permute_rows", ids, std::move(out), [perm](Tape& t, int self) {
            t.accumulate(t.node(self).inputs[0], scatter_rows(t.gout(self), perm));
        });
    }

    Var concat_channels(Var a, Var b) {
        auto ids = check_inputs({a, b});
        const Tensord& av = value(a);
        const Tensord& bv = value(b);
        if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
            throw std::invalid_argument("concat_channels: spatial dims mismatch");
        Tensord out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
        std::copy(av.data(), av.data() + av.numel(), out.data());
        std::copy(bv.data(), bv.data() + bv.numel(), out.data() + av.numel());
        const int64_t na = av.numel();
        return push("concat_channels", ids, std::move(out), [na](Tape& t, int self) {
            Node& n = t.node(self);
            const Tensord& g = t.gout(self);
            const Tensord& av = t.values_[static_cast<size_t>(n.inputs[0])];
            const Tensord& bv = t.values_[static_cast<size_t>(n.inputs[1])];
            Tensord ga(av.shape()), gb(bv.shape());
            std::copy(g.data(), g.data() + na, ga.data());
            std::copy(g.data() + na, g.data() + g.numel(), gb.data());
            t.accumulate(n.inputs[0], ga);
            t.accumulate(n.inputs[1], gb);
        });
    }

    // ------------------------------------------------------------------
    // shifting

    Var uni_shift(Var seq, Var mix) {
        auto ids = check_inputs({seq, mix});
        return push("uni_shift", ids, strwkv::uni_shift(value(seq), value(mix)),
                    [](Tape& t, int self) {
                        Node& n = t.node(self);
                        const Tensord& seq = t.values_[static_cast<size_t>(n.inputs[0])];
                        const Tensord& mix = t.values_[static_cast<size_t>(n.inputs[1])];
                        Tensord gseq, gmix;
                        uni_shift_backward(seq, mix, t.gout(self), gseq, gmix);
                        t.accumulate(n.inputs[0], gseq);
                        t.accumulate(n.inputs[1], gmix);
                    });
    }

    Var quad_shift(Var x) {
        auto ids = check_inputs({x});
        return push("quad_shift", ids, strwkv::quad_shift(value(x)), [](Tape& t, int self) {
            Node& n = t.node(self);
            t.accumulate(n.inputs[0],
                         quad_shift_backward(t.values_[static_cast<size_t>(n.inputs[0])],
                                             t.gout(self)));
        });
    }

    Var omni_shift(Var x, Var depthwise) {
        auto ids = check_inputs({x, depthwise});
        return push("omni_shift", ids, strwkv::omni_shift(value(x), value(depthwise)),
                    [](Tape& t, int self) {
                        Node& n = t.node(self);
                        Tensord gx, gk;
                        omni_shift_backward(t.values_[static_cast<size_t>(n.inputs[0])],
                                            t.values_[static_cast<size_t>(n.inputs[1])],
                                            t.gout(self), gx, gk);
                        t.accumulate(n.inputs[0], gx);
                        t.accumulate(n.inputs[1], gk);
                    });
    }

    Var bilinear_sample(Var x, double ys, double xs) {
        auto ids = check_inputs({x});
        return push("bilinear_sample", ids, strwkv::bilinear_sample(value(x), ys, xs),
                    [ys, xs](Tape& t, int self) {
                        Node& n = t.node(self);
                        const Tensord& x = t.values_[static_cast<size_t>(n.inputs[0])];
                        const Tensord& g = t.gout(self);
                        Tensord gx(x.shape());
                        for (int64_t c = 0; c < x.dim(0); ++c)
                            bilinear_scatter(gx, c, ys, xs, g[c]);
                        t.accumulate(n.inputs[0], gx);
                    });
    }

private:
    struct Node {
        std::string kind;
        std::vector<int> inputs;
        bool needs_grad = false;
        std::function<void(Tape&, int)> backward;
        std::vector<Tensord> saved;
    };

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Tensord& gout(int id) const { return grads_[static_cast<size_t>(id)]; }

    void check_var(Var v) const {
        if (v.tape != this) throw std::invalid_argument("Var belongs to a different tape");
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("Var id out of range");
    }

    std::vector<int> check_inputs(const std::vector<Var>& inputs) const {
        std::vector<int> ids;
        ids.reserve(inputs.size());
        for (Var v : inputs) {
            check_var(v);
            ids.push_back(v.id);
        }
        return ids;
    }

    Var push(std::string kind, std::vector<int> inputs, Tensord value,
             std::function<void(Tape&, int)> backward, bool leaf_requires_grad = false) {
        Node n;
        n.kind = std::move(kind);
        n.inputs = std::move(inputs);
        n.backward = std::move(backward);
        if (n.kind == "leaf") {
            n.needs_grad = leaf_requires_grad;
        } else {
            for (int in : n.inputs)
                if (nodes_[static_cast<size_t>(in)].needs_grad) n.needs_grad = true;
        }
        nodes_.push_back(std::move(n));
        values_.push_back(std::move(value));
        grads_.emplace_back();
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    void accumulate(int id, const Tensord& g) {
        if (!nodes_[static_cast<size_t>(id)].needs_grad) return;
        Tensord& dst = grads_[static_cast<size_t>(id)];
        if (dst.empty()) {
            dst = g;
            return;
        }
        if (!dst.same_shape(g)) throw std::runtime_error("gradient shape mismatch");
        for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += g[i];
    }

    std::vector<Node> nodes_;
    std::vector<Tensord> values_;
    std::vector<Tensord> grads_;

    static Var at(const std::vector<Var>& v, size_t i) {
        if (i >= v.size()) throw std::invalid_argument("record: missing input");
        return v[i];
    }
};

// ---------------------------------------------------------------------------
// built-in custom ops: the WKV attention kernel with its analytic adjoint,
// and the deformable shift. Registered once, lazily.
//
// bi_wkv inputs: k [T x C], v [T x C], w_raw [C], u [C]. The kernel decay is
// w = softplus(w_raw), keeping it non-negative; the chain rule through
// softplus happens here so the free parameter is what the optimizer sees.
//
// deform_shift inputs: x [C x H x W], predictor_w, predictor_b, depthwise,
// offset_scale [1] (no gradient).

inline void ensure_builtin_customs() {
    static std::once_flag flag;
    std::call_once(flag, []() {
        register_custom_op("bi_wkv", [](const std::vector<Tensord>& in) {
            if (in.size() != 4) throw std::invalid_argument("bi_wkv: expects (k, v, w_raw, u)");
            const Tensord& k = in[0];
            const Tensord& v = in[1];
            Tensord w(in[2].shape());
            for (int64_t i = 0; i < w.numel(); ++i) w[i] = softplus(in[2][i]);
            CustomOpResult res;
            if (k.dim(0) <= kWkvSaveStateThreshold) {
                Tensord log_den(k.shape());
                res.value = bi_wkv_scan_t(k, v, w, in[3], &log_den);
                res.saved = {w, std::move(log_den)};
            } else {
                res.value = bi_wkv_scan_t(k, v, w, in[3]);
                res.saved = {w};
            }
            return res;
        });
        register_custom_gradient(
            "bi_wkv", [](const std::vector<Tensord>& in, const Tensord& y,
                         const std::vector<Tensord>& saved, const Tensord& g) {
                WkvSequence seq{in[0], in[1]};
                WkvParams p{saved[0], in[3]};
                BiWkvGrads grads;
                if (saved.size() >= 2) {
                    BiWkvContext ctx{y, saved[1]};
                    grads = bi_wkv_backward(seq, p, g, &ctx);
                } else {
                    grads = bi_wkv_backward(seq, p, g, nullptr);
                }
                Tensord dwraw(in[2].shape());
                for (int64_t i = 0; i < dwraw.numel(); ++i)
                    dwraw[i] = grads.dw[i] * stable_sigmoid(in[2][i]);
                return std::vector<Tensord>{grads.dk, grads.dv, dwraw, grads.du};
            });

        register_custom_op("deform_shift", [](const std::vector<Tensord>& in) {
            if (in.size() != 5)
                throw std::invalid_argument(
                    "deform_shift: expects (x, predictor_w, predictor_b, depthwise, scale)");
            DeformShiftParams p;
            p.predictor_w = in[1];
            p.predictor_b = in[2];
            p.depthwise = in[3];
            p.offset_scale = in[4][0];
            CustomOpResult res;
            res.value = deform_shift(in[0], p);
            return res;
        });
        register_custom_gradient(
            "deform_shift", [](const std::vector<Tensord>& in, const Tensord&,
                               const std::vector<Tensord>&, const Tensord& g) {
                DeformShiftParams p;
                p.predictor_w = in[1];
                p.predictor_b = in[2];
                p.depthwise = in[3];
                p.offset_scale = in[4][0];
                DeformShiftGrads grads = deform_shift_backward(in[0], p, g);
                return std::vector<Tensord>{grads.dx, grads.dpredictor_w, grads.dpredictor_b,
                                            grads.ddepthwise, Tensord()};
            });
    });
}

}  // namespace strwkv

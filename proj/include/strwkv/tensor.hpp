#pragma once

// Dense row-major tensor and the primitive numeric kernels the rest of the
// library is built from. Scalar type is a template parameter; double is the
// working precision everywhere except where a kernel is explicitly
// instantiated at float (the WKV scans). Reductions accumulate in double
// regardless of the storage type.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace strwkv {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <class S = double>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, S fill = S(0))
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {
        for (int64_t d : shape_)
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim in " + shape_str(shape_));
    }
    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw std::invalid_argument("Tensor: data size does not match shape " + shape_str(shape_));
    }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t ndim() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& vec() { return data_; }
    const std::vector<S>& vec() const { return data_; }

    S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    S operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 2-D [T x C] access
    S& operator()(int64_t t, int64_t c) { return data_[static_cast<size_t>(t * shape_[1] + c)]; }
    S operator()(int64_t t, int64_t c) const { return data_[static_cast<size_t>(t * shape_[1] + c)]; }
    // 3-D [C x H x W] access
    S& operator()(int64_t c, int64_t y, int64_t x) {
        return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
    }
    S operator()(int64_t c, int64_t y, int64_t x) const {
        return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor<S> reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("reshape: element count mismatch");
        return Tensor<S>(std::move(s), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out = Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
        return out;
    }

private:
    Shape shape_;
    std::vector<S> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// ---------------------------------------------------------------------------
// error / invariant helpers

template <class S>
inline void ensure_finite(const Tensor<S>& t, const char* what) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(static_cast<double>(t[i])))
            throw std::runtime_error(std::string(what) + ": non-finite value produced");
}

template <class S>
inline void require_shape(const Tensor<S>& t, const Shape& s, const char* what) {
    if (t.shape() != s)
        throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(s) +
                                    ", got " + shape_str(t.shape()));
}

// ---------------------------------------------------------------------------
// threading: kernels may split independent channels across threads. The
// STRWKV_THREADS environment variable caps the pool; default is 1 so that
// results and timings are trivially reproducible.

namespace detail {
inline int& thread_override() {
    thread_local int n = 0;  // 0 = use environment
    return n;
}
}  // namespace detail

inline int max_threads() {
    if (detail::thread_override() > 0) return detail::thread_override();
    if (const char* env = std::getenv("STRWKV_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

// Scoped thread cap; the bench harness pins kernels to one thread while timing.
class ThreadLimitGuard {
public:
    explicit ThreadLimitGuard(int n) : prev_(detail::thread_override()) {
        detail::thread_override() = n;
    }
    ~ThreadLimitGuard() { detail::thread_override() = prev_; }
    ThreadLimitGuard(const ThreadLimitGuard&) = delete;
    ThreadLimitGuard& operator=(const ThreadLimitGuard&) = delete;

private:
    int prev_;
};

// Runs fn(i) for i in [0, n). Each index is handled by exactly one thread, so
// results are identical for any thread count as long as iterations touch
// disjoint outputs.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    int threads = std::min<int64_t>(max_threads(), n);
    if (threads <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t]() {
            for (int64_t i = t; i < n; i += threads) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// deterministic RNG. mt19937_64 is bit-exact across platforms; the transforms
// below avoid std::uniform_real_distribution, whose output is
// implementation-defined.

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {  // Box-Muller
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive
        return lo + static_cast<int64_t>(gen_() % static_cast<uint64_t>(hi - lo + 1));
    }

    template <class S = double>
    Tensor<S> uniform_tensor(const Shape& shape, double lo, double hi) {
        Tensor<S> t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
        return t;
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline Tensord fan_in_uniform(Rng& rng, const Shape& shape, int64_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rng.uniform_tensor(shape, -bound, bound);
}

// ---------------------------------------------------------------------------
// scalar helpers

template <class S>
inline S stable_sigmoid(S x) {
    if (x >= S(0)) {
        S e = std::exp(-x);
        return S(1) / (S(1) + e);
    }
    S e = std::exp(x);
    return e / (S(1) + e);
}

inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// elementwise ops

template <class S>
inline Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch");
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    ensure_finite(out, "add");
    return out;
}

template <class S>
inline Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("sub: shape mismatch");
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    ensure_finite(out, "sub");
    return out;
}

template <class S>
inline Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mul: shape mismatch");
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    ensure_finite(out, "mul");
    return out;
}

template <class S>
inline Tensor<S> scale(const Tensor<S>& a, double s) {
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = static_cast<S>(a[i] * s);
    ensure_finite(out, "scale");
    return out;
}

template <class S>
inline Tensor<S> sigmoid(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = stable_sigmoid(a[i]);
    return out;
}

template <class S>
inline Tensor<S> squared_relu(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        S r = a[i] > S(0) ? a[i] : S(0);
        out[i] = r * r;
    }
    ensure_finite(out, "squared_relu");
    return out;
}

// ---------------------------------------------------------------------------
// matmul: [T x Cin] * [Cin x Cout] -> [T x Cout]. Inner loop runs in ascending
// k order so every output element has a fixed reduction order.

template <class S>
inline Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& w) {
    if (a.ndim() != 2 || w.ndim() != 2 || a.dim(1) != w.dim(0))
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " * " +
                                    shape_str(w.shape()));
    const int64_t T = a.dim(0), K = a.dim(1), N = w.dim(1);
    Tensor<S> out({T, N});
    for (int64_t t = 0; t < T; ++t) {
        const S* arow = a.data() + t * K;
        S* orow = out.data() + t * N;
        for (int64_t k = 0; k < K; ++k) {
            const double av = static_cast<double>(arow[k]);
            const S* wrow = w.data() + k * N;
            for (int64_t n = 0; n < N; ++n)
                orow[n] = static_cast<S>(static_cast<double>(orow[n]) + av * static_cast<double>(wrow[n]));
        }
    }
    ensure_finite(out, "matmul");
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation (no kernel flip), zero padding. x is [Cin x H x W],
// w is [Cout x Cin x k x k], optional bias [Cout]. Output spatial size is
// floor((H + 2*pad - k) / stride) + 1.

template <class S>
inline Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride,
                        int pad) {
    if (x.ndim() != 3 || w.ndim() != 4) throw std::invalid_argument("conv2d: rank mismatch");
    if (stride < 1) throw std::invalid_argument("conv2d: stride < 1");
    const int64_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t Cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != Cin || w.dim(3) != k) throw std::invalid_argument("conv2d: weight shape mismatch");
    if (k != 1 && k != 3) throw std::invalid_argument("conv2d: kernel size must be 1 or 3");
    if (!bias.empty() && (bias.ndim() != 1 || bias.dim(0) != Cout))
        throw std::invalid_argument("conv2d: bias shape mismatch");
    const int64_t Ho = (H + 2 * pad - k) / stride + 1;
    const int64_t Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: empty output");

    Tensor<S> out({Cout, Ho, Wo});
    parallel_for(Cout, [&](int64_t o) {
        for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
                double acc = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
                for (int64_t i = 0; i < Cin; ++i) {
                    for (int64_t ky = 0; ky < k; ++ky) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += static_cast<double>(x(i, iy, ix)) *
                                   static_cast<double>(w[((o * Cin + i) * k + ky) * k + kx]);
                        }
                    }
                }
                out(o, oy, ox) = static_cast<S>(acc);
            }
        }
    });
    ensure_finite(out, "conv2d");
    return out;
}

template <class S>
inline Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad) {
    return conv2d(x, w, Tensor<S>(), stride, pad);
}

// Gradients of conv2d with respect to input, weights and bias.
template <class S>
inline void conv2d_backward(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad,
                            const Tensor<S>& gy, Tensor<S>& gx, Tensor<S>& gw, Tensor<S>& gbias,
                            bool has_bias) {
    const int64_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t Cout = w.dim(0), k = w.dim(2);
    const int64_t Ho = gy.dim(1), Wo = gy.dim(2);
    gx = Tensor<S>(x.shape());
    gw = Tensor<S>(w.shape());
    gbias = has_bias ? Tensor<S>({Cout}) : Tensor<S>();
    for (int64_t o = 0; o < Cout; ++o) {
        for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
                const S g = gy(o, oy, ox);
                if (has_bias) gbias[o] += g;
                for (int64_t i = 0; i < Cin; ++i) {
                    for (int64_t ky = 0; ky < k; ++ky) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            gw[((o * Cin + i) * k + ky) * k + kx] += g * x(i, iy, ix);
                            gx(i, iy, ix) += g * w[((o * Cin + i) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// pixel shuffle / unshuffle: lossless space <-> channel rearrangement.
// unshuffle: out[(c*r*r + dy*r + dx), i, j] = x[c, i*r + dy, j*r + dx]

template <class S>
inline Tensor<S> pixel_unshuffle(const Tensor<S>& x, int r) {
    if (x.ndim() != 3) throw std::invalid_argument("pixel_unshuffle: rank mismatch");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (r < 1 || H % r != 0 || W % r != 0)
        throw std::invalid_argument("pixel_unshuffle: dims not divisible by r");
    Tensor<S> out({C * r * r, H / r, W / r});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < r; ++dy)
            for (int64_t dx = 0; dx < r; ++dx)
                for (int64_t i = 0; i < H / r; ++i)
                    for (int64_t j = 0; j < W / r; ++j)
                        out(c * r * r + dy * r + dx, i, j) = x(c, i * r + dy, j * r + dx);
    return out;
}

template <class S>
inline Tensor<S> pixel_shuffle(const Tensor<S>& x, int r) {
    if (x.ndim() != 3) throw std::invalid_argument("pixel_shuffle: rank mismatch");
    const int64_t Cr = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (r < 1 || Cr % (static_cast<int64_t>(r) * r) != 0)
        throw std::invalid_argument("pixel_shuffle: channels not divisible by r^2");
    const int64_t C = Cr / (r * r);
    Tensor<S> out({C, H * r, W * r});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < r; ++dy)
            for (int64_t dx = 0; dx < r; ++dx)
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j)
                        out(c, i * r + dy, j * r + dx) = x(c * r * r + dy * r + dx, i, j);
    return out;
}

// ---------------------------------------------------------------------------
// layer norm over the channel dimension of a [T x C] sequence

struct LayerNormParams {
    Tensord gamma;  // [C]
    Tensord beta;   // [C]
    double eps = 1e-5;
};

template <class S>
inline Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                            double eps) {
    if (x.ndim() != 2) throw std::invalid_argument("layer_norm: expects [T x C]");
    const int64_t T = x.dim(0), C = x.dim(1);
    if (gamma.numel() != C || beta.numel() != C)
        throw std::invalid_argument("layer_norm: param length mismatch");
    if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be > 0");
    Tensor<S> out(x.shape());
    for (int64_t t = 0; t < T; ++t) {
        double mean = 0;
        for (int64_t c = 0; c < C; ++c) mean += x(t, c);
        mean /= static_cast<double>(C);
        double var = 0;
        for (int64_t c = 0; c < C; ++c) {
            double d = x(t, c) - mean;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t c = 0; c < C; ++c)
            out(t, c) = static_cast<S>((x(t, c) - mean) * inv * gamma[c] + beta[c]);
    }
    ensure_finite(out, "layer_norm");
    return out;
}

inline Tensord layer_norm(const Tensord& x, const LayerNormParams& p) {
    return layer_norm(x, p.gamma, p.beta, p.eps);
}

// ---------------------------------------------------------------------------
// per-channel statistics. Accepts [T x C] (channel = dim 1) or [C x H x W]
// (channel = dim 0). Population statistics; std carries a 1e-8 stabilizer
// under the root.

inline constexpr double kChannelStdEps = 1e-8;

template <class S>
inline std::pair<Tensor<S>, Tensor<S>> channel_stats(const Tensor<S>& x) {
    int64_t C, N;
    bool channel_first;
    if (x.ndim() == 2) {
        C = x.dim(1);
        N = x.dim(0);
        channel_first = false;
    } else if (x.ndim() == 3) {
        C = x.dim(0);
        N = x.dim(1) * x.dim(2);
        channel_first = true;
    } else {
        throw std::invalid_argument("channel_stats: expects [T x C] or [C x H x W]");
    }
    Tensor<S> mean({C}), std({C});
    for (int64_t c = 0; c < C; ++c) {
        double m = 0;
        for (int64_t i = 0; i < N; ++i) m += channel_first ? x[c * N + i] : x(i, c);
        m /= static_cast<double>(N);
        double v = 0;
        for (int64_t i = 0; i < N; ++i) {
            double d = (channel_first ? x[c * N + i] : x(i, c)) - m;
            v += d * d;
        }
        v /= static_cast<double>(N);
        mean[c] = static_cast<S>(m);
        std[c] = static_cast<S>(std::sqrt(v + kChannelStdEps));
    }
    return {mean, std};
}

// ---------------------------------------------------------------------------
// bilinear sampling at a fractional location; out-of-bounds reads are zero.
// Returns one value per channel.

template <class S>
inline Tensor<S> bilinear_sample(const Tensor<S>& x, double ys, double xs) {
    if (x.ndim() != 3) throw std::invalid_argument("bilinear_sample: expects [C x H x W]");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t y0 = static_cast<int64_t>(std::floor(ys));
    const int64_t x0 = static_cast<int64_t>(std::floor(xs));
    const double fy = ys - static_cast<double>(y0);
    const double fx = xs - static_cast<double>(x0);
    Tensor<S> out({C});
    auto at = [&](int64_t c, int64_t y, int64_t xx) -> double {
        if (y < 0 || y >= H || xx < 0 || xx >= W) return 0.0;
        return static_cast<double>(x(c, y, xx));
    };
    for (int64_t c = 0; c < C; ++c) {
        double v = (1 - fy) * (1 - fx) * at(c, y0, x0) + (1 - fy) * fx * at(c, y0, x0 + 1) +
                   fy * (1 - fx) * at(c, y0 + 1, x0) + fy * fx * at(c, y0 + 1, x0 + 1);
        out[c] = static_cast<S>(v);
    }
    return out;
}

// d(bilinear)/d(ys), d(bilinear)/d(xs) for a single channel plane.
template <class S>
inline void bilinear_coord_grad(const Tensor<S>& x, int64_t c, double ys, double xs, double& dys,
                                double& dxs) {
    const int64_t H = x.dim(1), W = x.dim(2);
    const int64_t y0 = static_cast<int64_t>(std::floor(ys));
    const int64_t x0 = static_cast<int64_t>(std::floor(xs));
    const double fy = ys - static_cast<double>(y0);
    const double fx = xs - static_cast<double>(x0);
    auto at = [&](int64_t y, int64_t xx) -> double {
        if (y < 0 || y >= H || xx < 0 || xx >= W) return 0.0;
        return static_cast<double>(x(c, y, xx));
    };
    const double p00 = at(y0, x0), p01 = at(y0, x0 + 1), p10 = at(y0 + 1, x0), p11 = at(y0 + 1, x0 + 1);
    dys = (1 - fx) * (p10 - p00) + fx * (p11 - p01);
    dxs = (1 - fy) * (p01 - p00) + fy * (p11 - p10);
}

// Scatters g * weight into the four neighbors used by bilinear_sample.
template <class S>
inline void bilinear_scatter(Tensor<S>& gx, int64_t c, double ys, double xs, double g) {
    const int64_t H = gx.dim(1), W = gx.dim(2);
    const int64_t y0 = static_cast<int64_t>(std::floor(ys));
    const int64_t x0 = static_cast<int64_t>(std::floor(xs));
    const double fy = ys - static_cast<double>(y0);
    const double fx = xs - static_cast<double>(x0);
    auto acc = [&](int64_t y, int64_t xx, double w) {
        if (y < 0 || y >= H || xx < 0 || xx >= W) return;
        gx(c, y, xx) += static_cast<S>(g * w);
    };
    acc(y0, x0, (1 - fy) * (1 - fx));
    acc(y0, x0 + 1, (1 - fy) * fx);
    acc(y0 + 1, x0, fy * (1 - fx));
    acc(y0 + 1, x0 + 1, fy * fx);
}

}  // namespace strwkv

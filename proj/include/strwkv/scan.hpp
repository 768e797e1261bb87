#pragma once

// 2D -> 1D token orderings. The skip variant slices the feature map into p^2
// strided groups (offsets (a, b) in {0..p-1}^2), walks each group, and
// concatenates the groups, so spatially distant pixels become sequence
// neighbors. Bidirectional (plain row-major; its reverse comes from plan
// rotation inside Re-WKV) and zigzag (boustrophedon) are the fixed-path
// baselines.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "strwkv/tensor.hpp"

namespace strwkv {

enum class ScanVariant { skip, bidirectional, zigzag, identity };

inline const char* to_string(ScanVariant v) {
    switch (v) {
        case ScanVariant::skip: return "skip";
        case ScanVariant::bidirectional: return "bidirectional";
        case ScanVariant::zigzag: return "zigzag";
        case ScanVariant::identity: return "identity";
    }
    return "?";
}

inline ScanVariant scan_variant_from_string(const std::string& s) {
    if (s == "skip") return ScanVariant::skip;
    if (s == "bidirectional") return ScanVariant::bidirectional;
    if (s == "zigzag") return ScanVariant::zigzag;
    if (s == "identity") return ScanVariant::identity;
    throw std::invalid_argument("unknown scan variant: " + s);
}

enum class WithinGroup { row_major, reversed };

struct ScanPlan {
    ScanVariant variant = ScanVariant::identity;
    int p = 1;  // skip step
    int64_t H = 1, W = 1;
    std::vector<std::pair<int, int>> offset_order;  // skip variant group order
    WithinGroup within_group = WithinGroup::row_major;

    int64_t tokens() const { return H * W; }
};

// Row-major grid over the p^2 offsets: (0,0), (0,1), ..., (p-1,p-1).
inline std::vector<std::pair<int, int>> default_offset_order(int p) {
    std::vector<std::pair<int, int>> order;
    order.reserve(static_cast<size_t>(p) * p);
    for (int a = 0; a < p; ++a)
        for (int b = 0; b < p; ++b) order.emplace_back(a, b);
    return order;
}

inline ScanPlan make_scan_plan(ScanVariant variant, int64_t H, int64_t W, int p = 1) {
    ScanPlan plan;
    plan.variant = variant;
    plan.H = H;
    plan.W = W;
    plan.p = p;
    if (H < 1 || W < 1) throw std::invalid_argument("make_scan_plan: empty dims");
    if (variant == ScanVariant::skip) {
        if (p < 1) throw std::invalid_argument("make_scan_plan: p must be >= 1");
        if (H % p != 0 || W % p != 0)
            throw std::invalid_argument("make_scan_plan: H and W must be divisible by p");
        plan.offset_order = default_offset_order(p);
    } else {
        plan.p = 1;
    }
    return plan;
}

inline ScanPlan make_identity_plan(int64_t tokens) {
    return make_scan_plan(ScanVariant::identity, 1, tokens);
}

// A plan whose permutation is the exact reverse path of the argument's. For
// skip plans this flips both the group order and the in-group traversal; for
// the fixed-path variants the whole path is walked backwards.
inline ScanPlan reversed_plan(const ScanPlan& plan) {
    ScanPlan r = plan;
    r.within_group =
        plan.within_group == WithinGroup::row_major ? WithinGroup::reversed : WithinGroup::row_major;
    if (plan.variant == ScanVariant::skip)
        r.offset_order.assign(plan.offset_order.rbegin(), plan.offset_order.rend());
    return r;
}

inline void validate_plan(const ScanPlan& plan) {
    if (plan.H < 1 || plan.W < 1) throw std::invalid_argument("ScanPlan: empty dims");
    if (plan.variant != ScanVariant::skip) return;
    const int p = plan.p;
    if (p < 1) throw std::invalid_argument("ScanPlan: p must be >= 1");
    if (plan.H % p != 0 || plan.W % p != 0)
        throw std::invalid_argument("ScanPlan: dims not divisible by p");
    if (plan.offset_order.size() != static_cast<size_t>(p) * p)
        throw std::invalid_argument("ScanPlan: offset_order must list all p^2 groups");
    std::vector<char> seen(static_cast<size_t>(p) * p, 0);
    for (auto [a, b] : plan.offset_order) {
        if (a < 0 || a >= p || b < 0 || b >= p)
            throw std::invalid_argument("ScanPlan: offset out of range");
        if (seen[static_cast<size_t>(a) * p + b]++)
            throw std::invalid_argument("ScanPlan: duplicate offset group");
    }
}

// Fixed-path baseline orders. Bidirectional is row-major forward; zigzag walks
// even rows left-to-right and odd rows right-to-left.
inline std::vector<int64_t> baseline_order(ScanVariant variant, int64_t H, int64_t W) {
    std::vector<int64_t> perm;
    perm.reserve(static_cast<size_t>(H * W));
    if (variant == ScanVariant::bidirectional) {
        for (int64_t i = 0; i < H * W; ++i) perm.push_back(i);
    } else if (variant == ScanVariant::zigzag) {
        for (int64_t y = 0; y < H; ++y) {
            if (y % 2 == 0)
                for (int64_t x = 0; x < W; ++x) perm.push_back(y * W + x);
            else
                for (int64_t x = W - 1; x >= 0; --x) perm.push_back(y * W + x);
        }
    } else {
        throw std::invalid_argument("baseline_order: variant must be bidirectional or zigzag");
    }
    return perm;
}

// perm[t] = flat row-major image index read by output token t. Always a
// bijection on {0..H*W-1}.
inline std::vector<int64_t> permutation(const ScanPlan& plan) {
    validate_plan(plan);
    const int64_t H = plan.H, W = plan.W;
    std::vector<int64_t> perm;
    switch (plan.variant) {
        case ScanVariant::identity: {
            perm.resize(static_cast<size_t>(H * W));
            for (int64_t i = 0; i < H * W; ++i) perm[static_cast<size_t>(i)] = i;
            break;
        }
        case ScanVariant::bidirectional:
        case ScanVariant::zigzag:
            perm = baseline_order(plan.variant, H, W);
            break;
        case ScanVariant::skip: {
            const int p = plan.p;
            const int64_t gh = H / p, gw = W / p, gsize = gh * gw;
            perm.reserve(static_cast<size_t>(H * W));
            for (auto [a, b] : plan.offset_order) {
                for (int64_t j = 0; j < gsize; ++j) {
                    const int64_t jj = plan.within_group == WithinGroup::row_major ? j : gsize - 1 - j;
                    const int64_t r = jj / gw, c = jj % gw;
                    perm.push_back((a + static_cast<int64_t>(p) * r) * W + (b + static_cast<int64_t>(p) * c));
                }
            }
            break;
        }
    }
    if (plan.within_group == WithinGroup::reversed && plan.variant != ScanVariant::skip)
        std::reverse(perm.begin(), perm.end());
    return perm;
}

// [C x H x W] -> [T x C]: sequence row t carries image pixel perm[t].
template <class S>
inline Tensor<S> s_scan(const Tensor<S>& x, const ScanPlan& plan) {
    if (x.ndim() != 3 || x.dim(1) != plan.H || x.dim(2) != plan.W)
        throw std::invalid_argument("s_scan: image does not match plan dims");
    const int64_t C = x.dim(0), T = plan.tokens();
    const auto perm = permutation(plan);
    Tensor<S> out({T, C});
    for (int64_t t = 0; t < T; ++t) {
        const int64_t src = perm[static_cast<size_t>(t)];
        for (int64_t c = 0; c < C; ++c) out(t, c) = x[c * T + src];
    }
    return out;
}

// Exact inverse of s_scan.
template <class S>
inline Tensor<S> s_merge(const Tensor<S>& seq, const ScanPlan& plan) {
    if (seq.ndim() != 2 || seq.dim(0) != plan.tokens())
        throw std::invalid_argument("s_merge: sequence does not match plan dims");
    const int64_t T = plan.tokens(), C = seq.dim(1);
    const auto perm = permutation(plan);
    Tensor<S> out({C, plan.H, plan.W});
    for (int64_t t = 0; t < T; ++t) {
        const int64_t dst = perm[static_cast<size_t>(t)];
        for (int64_t c = 0; c < C; ++c) out[c * T + dst] = seq(t, c);
    }
    return out;
}

// Row gather on a [T x C] sequence: out[t] = x[perm[t]].
template <class S>
inline Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int64_t>& perm) {
    const int64_t T = x.dim(0), C = x.dim(1);
    if (static_cast<int64_t>(perm.size()) != T)
        throw std::invalid_argument("gather_rows: permutation length mismatch");
    Tensor<S> out({T, C});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < C; ++c) out(t, c) = x(perm[static_cast<size_t>(t)], c);
    return out;
}

// Inverse of gather_rows: out[perm[t]] = x[t].
template <class S>
inline Tensor<S> scatter_rows(const Tensor<S>& x, const std::vector<int64_t>& perm) {
    const int64_t T = x.dim(0), C = x.dim(1);
    if (static_cast<int64_t>(perm.size()) != T)
        throw std::invalid_argument("scatter_rows: permutation length mismatch");
    Tensor<S> out({T, C});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < C; ++c) out(perm[static_cast<size_t>(t)], c) = x(t, c);
    return out;
}

}  // namespace strwkv

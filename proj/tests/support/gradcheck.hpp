#pragma once

// Central finite differences against analytic gradients. The relative error
// uses a floored denominator so structurally-zero gradients compare against
// the finite-difference noise floor instead of dividing by zero.

#include <cmath>
#include <functional>
#include <vector>

#include "strwkv/tensor.hpp"

namespace gradcheck {

using strwkv::Tensord;

inline double rel_err(double analytic, double numeric, double floor = 1e-3) {
    return std::abs(analytic - numeric) /
           std::max(std::abs(analytic) + std::abs(numeric), floor);
}

// d loss / d x[i] by central differences; loss_fn re-evaluates the full
// pipeline for a perturbed copy of x.
inline Tensord finite_diff(const std::function<double(const Tensord&)>& loss_fn, const Tensord& x,
                           double h = 1e-5) {
    Tensord g(x.shape());
    Tensord xp = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = xp[i];
        xp[i] = orig + h;
        const double fp = loss_fn(xp);
        xp[i] = orig - h;
        const double fm = loss_fn(xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// max over elements of rel_err(analytic, finite difference)
inline double max_grad_err(const Tensord& analytic, const Tensord& numeric, double floor = 1e-3) {
    double worst = 0;
    for (int64_t i = 0; i < analytic.numel(); ++i)
        worst = std::max(worst, rel_err(analytic[i], numeric[i], floor));
    return worst;
}

inline double check_against_fd(const std::function<double(const Tensord&)>& loss_fn,
                               const Tensord& x, const Tensord& analytic, double h = 1e-5,
                               double floor = 1e-3) {
    return max_grad_err(analytic, finite_diff(loss_fn, x, h), floor);
}

}  // namespace gradcheck

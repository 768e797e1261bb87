#pragma once

// Forward-mode dual numbers, used to differentiate the naive O(T^2) WKV
// formula exactly, one input coordinate per sweep. Kept test-only so the
// gradient oracle stays independent of the analytic backward it checks.

#include <cmath>

namespace dual {

struct Dual {
    double v = 0;  // value
    double d = 0;  // derivative

    Dual() = default;
    Dual(double value) : v(value) {}
    Dual(double value, double deriv) : v(value), d(deriv) {}
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator-(Dual a) { return {-a.v, -a.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) {
    return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)};
}
inline Dual exp(Dual a) {
    const double e = std::exp(a.v);
    return {e, e * a.d};
}
inline Dual max(Dual a, Dual b) { return a.v >= b.v ? a : b; }

}  // namespace dual

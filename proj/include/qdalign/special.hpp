#pragma once

#include <cmath>
#include <numbers>

#include "qdalign/error.hpp"

namespace qdalign {

/// First zero of J1; the Airy pattern's first dark ring sits at rho = kAiryFirstZero.
inline constexpr double kAiryFirstZero = 3.8317059702075125;

// Power series near the origin; rational approximations (Hart's coefficient sets): |x| < 8 uses a ratio of
// polynomials in x^2; beyond that the Hankel asymptotic form with corrections.
// Absolute error stays below 1e-7 over the real line.

namespace detail {
inline double bessel_jn_series(int n, double x);
}

inline double bessel_j0(double x) {
    const double ax = std::fabs(x);
    if (ax < 2.0) return detail::bessel_jn_series(0, x);
    if (ax < 8.0) {
        const double y = x * x;
        const double num = 57568490574.0 +
            y * (-13362590354.0 + y * (651619640.7 + y * (-11214424.18 + y * (77392.33017 + y * (-184.9052456)))));
        const double den = 57568490411.0 +
            y * (1029532985.0 + y * (9494680.718 + y * (59272.64853 + y * (267.8532712 + y * 1.0))));
        return num / den;
    }
    const double z = 8.0 / ax;
    const double y = z * z;
    const double xx = ax - 0.785398164;
    const double p = 1.0 + y * (-0.1098628627e-2 + y * (0.2734510407e-4 + y * (-0.2073370639e-5 + y * 0.2093887211e-6)));
    const double q = -0.1562499995e-1 +
        y * (0.1430488765e-3 + y * (-0.6911147651e-5 + y * (0.7621095161e-6 - y * 0.934935152e-7)));
    return std::sqrt(0.636619772 / ax) * (std::cos(xx) * p - z * std::sin(xx) * q);
}

/// J1(x)/x, finite at the origin (limit 1/2).
inline double bessel_j1_over_x(double x) {
    const double ax = std::fabs(x);
    if (ax < 2.0) {
        // 1/2 * sum_k (-x²/4)^k / (k! (k+1)!)
        const double h2 = -0.25 * x * x;
        double term = 0.5, sum = 0.5;
        for (int k = 1; k < 30; ++k) {
            term *= h2 / (k * (k + 1));
            sum += term;
            if (std::fabs(term) < 1e-17) break;
        }
        return sum;
    }
    if (ax < 8.0) {
        const double y = x * x;
        const double num = 72362614232.0 +
            y * (-7895059235.0 + y * (242396853.1 + y * (-2972611.439 + y * (15704.48260 + y * (-30.16036606)))));
        const double den = 144725228442.0 +
            y * (2300535178.0 + y * (18583304.74 + y * (99447.43394 + y * (376.9991397 + y * 1.0))));
        return num / den;
    }
    const double z = 8.0 / ax;
    const double y = z * z;
    const double xx = ax - 2.356194491;
    const double p = 1.0 + y * (0.183105e-2 + y * (-0.3516396496e-4 + y * (0.2457520174e-5 + y * (-0.240337019e-6))));
    const double q = 0.04687499995 +
        y * (-0.2002690873e-3 + y * (0.8449199096e-5 + y * (-0.88228987e-6 + y * 0.105787412e-6)));
    return std::sqrt(0.636619772 / ax) * (std::cos(xx) * p - z * std::sin(xx) * q) / ax;
}

inline double bessel_j1(double x) { return x * bessel_j1_over_x(x); }

namespace detail {

/// Power series of J_n for small |x|; converges quickly for |x| < 2.
inline double bessel_jn_series(int n, double x) {
    const double h = 0.5 * x;
    double term = 1.0;
    for (int k = 1; k <= n; ++k) term *= h / k;
    double sum = term;
    const double h2 = h * h;
    for (int k = 1; k < 30; ++k) {
        term *= -h2 / (k * (k + n));
        sum += term;
        if (std::fabs(term) < 1e-17 * std::fabs(sum)) break;
    }
    return sum;
}

}  // namespace detail

inline double bessel_j2(double x) {
    if (std::fabs(x) < 2.0) return detail::bessel_jn_series(2, x);
    return 2.0 * bessel_j1_over_x(x) - bessel_j0(x);
}

/// Normalized Airy intensity [2 J1(rho)/rho]^2 as a function of rho = r/scale.
inline double airy_profile(double rho) {
    const double a = 2.0 * bessel_j1_over_x(rho);
    return a * a;
}

/// (d/d rho) airy_profile(rho) / rho = -8 J1 J2 / rho^3; equals -1/2 at the origin.
inline double airy_profile_slope_over_rho(double rho) {
    const double ar = std::fabs(rho);
    if (ar < 0.05) return -0.5 + 5.0 * rho * rho / 48.0;
    return -8.0 * bessel_j1_over_x(rho) * bessel_j2(rho) / (rho * rho);
}

/// Relative Airy intensity at radius r for a pattern of the given radial scale.
inline double airy_psf(double r, double scale) {
    if (!(scale > 0.0)) throw ContractError("airy_psf: scale must be positive");
    return airy_profile(r / scale);
}

/// Integral of airy_profile over the plane, in units of scale^2.
inline constexpr double kAiryArea = 4.0 * std::numbers::pi;

}  // namespace qdalign

#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "qdalign/fitcore.hpp"
#include "qdalign/image.hpp"
#include "qdalign/special.hpp"

// Model functions shared by the fitting modules. Every model exposes its
// parameters as a flat array (`params()` / `from_params()`), a pointwise value,
// and an analytic gradient with respect to those parameters.

namespace qdalign {

namespace detail {
inline constexpr double kTwoOverSqrtPi = 2.0 / 1.7724538509055160273;
inline double erf_slope(double u) { return kTwoOverSqrtPi * std::exp(-u * u); }
}  // namespace detail

/// How the blur parameter of the erf edge enters k = sqrt(1/(2·s)).
enum class BlurConvention {
    variance,  ///< s is used as written in g(x) = exp(-x²/2σ): σ acts as a variance (px²)
    std_dev,   ///< s is a standard deviation, k = 1/(sqrt(2)·σ)
};

/// Gaussian-blurred box of width d on a linear background:
///
///   y(x) = A·[erf(k(x_c−d/2−x)) − erf(k(x_c+d/2−x))] / [erf(−k·d/2) − erf(k·d/2)] + B·x + C
///
/// with k = sqrt(1/(2σ)). By default σ is a variance in px², exactly as the
/// convolution kernel exp(−x²/2σ) is written; `BlurConvention::std_dev` switches
/// to k = 1/(sqrt(2)·σ).
struct ErfEdgeModel {
    enum : int { kA, kCenter, kSigma, kWidth, kSlope, kOffset, kParams };
    static constexpr std::array<const char*, kParams> kNames{"A", "x_c", "sigma", "d", "B", "C"};

    double amplitude = 1.0;
    double center = 0.0;
    double sigma = 1.0;
    double width = 1.0;
    double slope = 0.0;
    double offset = 0.0;
    BlurConvention convention = BlurConvention::variance;

    std::array<double, kParams> params() const { return {amplitude, center, sigma, width, slope, offset}; }
    static ErfEdgeModel from_params(std::span<const double> p, BlurConvention conv = BlurConvention::variance) {
        return {p[kA], p[kCenter], p[kSigma], p[kWidth], p[kSlope], p[kOffset], conv};
    }

    static double k_of(double sigma, BlurConvention conv) {
        return conv == BlurConvention::variance ? std::sqrt(1.0 / (2.0 * sigma)) : 1.0 / (std::numbers::sqrt2 * sigma);
    }
    static double dk_dsigma(double sigma, BlurConvention conv) {
        const double k = k_of(sigma, conv);
        return conv == BlurConvention::variance ? -k / (2.0 * sigma) : -k / sigma;
    }

    double operator()(double x) const {
        const double k = k_of(sigma, convention);
        const double num = std::erf(k * (center - 0.5 * width - x)) - std::erf(k * (center + 0.5 * width - x));
        const double den = std::erf(-k * 0.5 * width) - std::erf(k * 0.5 * width);
        return amplitude * num / den + slope * x + offset;
    }

    void gradient(double x, std::span<double> g) const {
        const double k = k_of(sigma, convention);
        const double h = 0.5 * width;
        const double u1 = k * (center - h - x), u2 = k * (center + h - x);
        const double e1 = detail::erf_slope(u1), e2 = detail::erf_slope(u2), eh = detail::erf_slope(k * h);
        const double num = std::erf(u1) - std::erf(u2);
        const double den = -2.0 * std::erf(k * h);
        const double ratio = num / den;
        const double dnum_dk = (e1 * u1 - e2 * u2) / k;
        const double dden_dk = -2.0 * eh * h;
        const double dratio_dk = (dnum_dk * den - num * dden_dk) / (den * den);
        const double dnum_dd = -0.5 * k * (e1 + e2);
        const double dden_dd = -k * eh;
        g[kA] = ratio;
        g[kCenter] = amplitude * k * (e1 - e2) / den;
        g[kSigma] = amplitude * dratio_dk * dk_dsigma(sigma, convention);
        g[kWidth] = amplitude * (dnum_dd * den - num * dden_dd) / (den * den);
        g[kSlope] = x;
        g[kOffset] = 1.0;
    }
};

/// Axis-aligned 2D Gaussian: amp·exp(−(x−x0)²/2σx² − (y−y0)²/2σy²) + offset.
struct Gaussian2DModel {
    enum : int { kAmplitude, kX0, kY0, kSigmaX, kSigmaY, kOffset, kParams };
    static constexpr std::array<const char*, kParams> kNames{"amplitude", "x0", "y0", "sigma_x", "sigma_y", "offset"};

    double amplitude = 1.0;
    double x0 = 0.0;
    double y0 = 0.0;
    double sigma_x = 1.0;
    double sigma_y = 1.0;
    double offset = 0.0;

    std::array<double, kParams> params() const { return {amplitude, x0, y0, sigma_x, sigma_y, offset}; }
    static Gaussian2DModel from_params(std::span<const double> p) {
        return {p[kAmplitude], p[kX0], p[kY0], p[kSigmaX], p[kSigmaY], p[kOffset]};
    }

    double operator()(double x, double y) const {
        const double dx = (x - x0) / sigma_x, dy = (y - y0) / sigma_y;
        return amplitude * std::exp(-0.5 * (dx * dx + dy * dy)) + offset;
    }

    void gradient(double x, double y, std::span<double> g) const {
        const double dx = (x - x0) / sigma_x, dy = (y - y0) / sigma_y;
        const double e = std::exp(-0.5 * (dx * dx + dy * dy));
        g[kAmplitude] = e;
        g[kX0] = amplitude * e * dx / sigma_x;
        g[kY0] = amplitude * e * dy / sigma_y;
        g[kSigmaX] = amplitude * e * dx * dx / sigma_x;
        g[kSigmaY] = amplitude * e * dy * dy / sigma_y;
        g[kOffset] = 1.0;
    }

    /// Integrated volume above the offset.
    double volume() const { return 2.0 * std::numbers::pi * amplitude * sigma_x * sigma_y; }
};

/// Three 1D Gaussian peaks (left trench edge, guide, right trench edge) on a linear background.
struct TripleGaussianModel {
    enum : int { kSlope = 9, kOffset = 10, kParams = 11 };
    static constexpr std::array<const char*, kParams> kNames{"a_left", "c_left", "w_left",  "a_mid", "c_mid",  "w_mid",
                                                             "a_right", "c_right", "w_right", "slope", "offset"};
    static constexpr int amp_index(int peak) { return 3 * peak; }
    static constexpr int center_index(int peak) { return 3 * peak + 1; }
    static constexpr int width_index(int peak) { return 3 * peak + 2; }

    std::array<double, 3> amplitude{1.0, 1.0, 1.0};
    std::array<double, 3> center{-1.0, 0.0, 1.0};
    std::array<double, 3> width{1.0, 1.0, 1.0};
    double slope = 0.0;
    double offset = 0.0;

    std::array<double, kParams> params() const {
        std::array<double, kParams> p{};
        for (int i = 0; i < 3; ++i) {
            p[amp_index(i)] = amplitude[i];
            p[center_index(i)] = center[i];
            p[width_index(i)] = width[i];
        }
        p[kSlope] = slope;
        p[kOffset] = offset;
        return p;
    }
    static TripleGaussianModel from_params(std::span<const double> p) {
        TripleGaussianModel m;
        for (int i = 0; i < 3; ++i) {
            m.amplitude[i] = p[amp_index(i)];
            m.center[i] = p[center_index(i)];
            m.width[i] = p[width_index(i)];
        }
        m.slope = p[kSlope];
        m.offset = p[kOffset];
        return m;
    }

    bool ordered() const { return center[0] < center[1] && center[1] < center[2]; }

    double operator()(double x) const {
        double v = slope * x + offset;
        for (int i = 0; i < 3; ++i) {
            const double u = (x - center[i]) / width[i];
            v += amplitude[i] * std::exp(-0.5 * u * u);
        }
        return v;
    }

    void gradient(double x, std::span<double> g) const {
        for (int i = 0; i < 3; ++i) {
            const double u = (x - center[i]) / width[i];
            const double e = std::exp(-0.5 * u * u);
            g[amp_index(i)] = e;
            g[center_index(i)] = amplitude[i] * e * u / width[i];
            g[width_index(i)] = amplitude[i] * e * u * u / width[i];
        }
        g[kSlope] = x;
        g[kOffset] = 1.0;
    }
};

/// Airy pattern with an elliptical footprint:
/// amp·[2J1(ρ)/ρ]² + offset, ρ² = (u/s_major)² + (v/s_minor)², where (u, v) are the
/// offsets from the center rotated by `orientation_deg`.
struct EllipticalAiryModel {
    enum : int { kAmplitude, kX0, kY0, kScaleMajor, kScaleMinor, kOrientation, kOffset, kParams };
    static constexpr std::array<const char*, kParams> kNames{"amplitude",   "x0",          "y0",    "scale_major",
                                                             "scale_minor", "orientation", "offset"};

    double amplitude = 1.0;
    double x0 = 0.0;
    double y0 = 0.0;
    double scale_major = 1.0;
    double scale_minor = 1.0;
    double orientation_deg = 0.0;
    double offset = 0.0;

    std::array<double, kParams> params() const {
        return {amplitude, x0, y0, scale_major, scale_minor, orientation_deg, offset};
    }
    static EllipticalAiryModel from_params(std::span<const double> p) {
        return {p[kAmplitude], p[kX0], p[kY0], p[kScaleMajor], p[kScaleMinor], p[kOrientation], p[kOffset]};
    }

    double operator()(double x, double y) const {
        const double t = orientation_deg * std::numbers::pi / 180.0;
        const double c = std::cos(t), s = std::sin(t);
        const double dx = x - x0, dy = y - y0;
        const double u = (dx * c + dy * s) / scale_major, v = (-dx * s + dy * c) / scale_minor;
        return amplitude * airy_profile(std::sqrt(u * u + v * v)) + offset;
    }

    void gradient(double x, double y, std::span<double> g) const {
        const double t = orientation_deg * std::numbers::pi / 180.0;
        const double c = std::cos(t), s = std::sin(t);
        const double dx = x - x0, dy = y - y0;
        const double u = dx * c + dy * s, v = -dx * s + dy * c;
        const double a2 = scale_major * scale_major, b2 = scale_minor * scale_minor;
        const double rho = std::sqrt(u * u / a2 + v * v / b2);
        const double q = amplitude * airy_profile_slope_over_rho(rho);  // amp · P'(ρ)/ρ
        const double df_du = q * u / a2, df_dv = q * v / b2;
        g[kAmplitude] = airy_profile(rho);
        g[kX0] = -df_du * c + df_dv * s;
        g[kY0] = -df_du * s - df_dv * c;
        g[kScaleMajor] = -q * u * u / (a2 * scale_major);
        g[kScaleMinor] = -q * v * v / (b2 * scale_minor);
        g[kOrientation] = (df_du * v - df_dv * u) * std::numbers::pi / 180.0;
        g[kOffset] = 1.0;
    }

    /// Photons under the peak: amplitude times the Airy area 4π·s_major·s_minor.
    double volume() const { return kAiryArea * amplitude * scale_major * scale_minor; }

    /// Swaps axes if needed so that scale_major >= scale_minor, orientation in [-90, 90).
    EllipticalAiryModel normalized() const {
        EllipticalAiryModel m = *this;
        m.scale_major = std::fabs(m.scale_major);
        m.scale_minor = std::fabs(m.scale_minor);
        if (m.scale_minor > m.scale_major) {
            std::swap(m.scale_major, m.scale_minor);
            m.orientation_deg += 90.0;
        }
        m.orientation_deg = std::remainder(m.orientation_deg, 180.0);
        if (m.orientation_deg >= 90.0) m.orientation_deg -= 180.0;
        return m;
    }
};

/// Single spectral line: amp·exp(−(x−center)²/2w²) + slope·(x − reference) + offset.
struct GaussianLineModel {
    enum : int { kAmplitude, kCenter, kWidth, kSlope, kOffset, kParams };
    static constexpr std::array<const char*, kParams> kNames{"amplitude", "center", "width", "slope", "offset"};

    double amplitude = 1.0;
    double center = 0.0;
    double width = 1.0;
    double slope = 0.0;
    double offset = 0.0;
    double reference = 0.0;  ///< fixed abscissa of the background pivot (not fitted)

    std::array<double, kParams> params() const { return {amplitude, center, width, slope, offset}; }
    static GaussianLineModel from_params(std::span<const double> p, double reference = 0.0) {
        return {p[kAmplitude], p[kCenter], p[kWidth], p[kSlope], p[kOffset], reference};
    }

    double operator()(double x) const {
        const double u = (x - center) / width;
        return amplitude * std::exp(-0.5 * u * u) + slope * (x - reference) + offset;
    }

    void gradient(double x, std::span<double> g) const {
        const double u = (x - center) / width;
        const double e = std::exp(-0.5 * u * u);
        g[kAmplitude] = e;
        g[kCenter] = amplitude * e * u / width;
        g[kWidth] = amplitude * e * u * u / width;
        g[kSlope] = x - reference;
        g[kOffset] = 1.0;
    }
};

// --- pointwise evaluation -------------------------------------------------------------

inline double eval_model(const ErfEdgeModel& m, double x) { return m(x); }
inline double eval_model(const TripleGaussianModel& m, double x) { return m(x); }
inline double eval_model(const GaussianLineModel& m, double x) { return m(x); }
inline double eval_model(const Gaussian2DModel& m, double x, double y) { return m(x, y); }
inline double eval_model(const EllipticalAiryModel& m, double x, double y) { return m(x, y); }

template <class Model>
std::vector<double> eval_model(const Model& m, std::span<const double> xs) {
    std::vector<double> out;
    out.reserve(xs.size());
    for (double x : xs) out.push_back(m(x));
    return out;
}

// --- fit-problem builders -------------------------------------------------------------

namespace detail {

template <class Model, class Make>
FitProblem curve_problem(std::vector<double> xs, std::vector<double> ys, const Model& init, Make make) {
    if (xs.size() != ys.size()) throw ContractError("curve fit: x and y sizes differ");
    FitProblem pb;
    pb.residual_count = xs.size();
    const auto p0 = init.params();
    pb.initial = Eigen::Map<const Vector>(p0.data(), Model::kParams);
    pb.names.assign(Model::kNames.begin(), Model::kNames.end());
    auto data = std::make_shared<std::pair<std::vector<double>, std::vector<double>>>(std::move(xs), std::move(ys));
    pb.residuals = [data, make](const Vector& p, Vector& r) {
        const Model m = make(p);
        for (std::size_t i = 0; i < data->first.size(); ++i) r[static_cast<Eigen::Index>(i)] = m(data->first[i]) - data->second[i];
    };
    pb.jacobian = [data, make](const Vector& p, Matrix& jac) {
        const Model m = make(p);
        std::array<double, Model::kParams> g{};
        for (std::size_t i = 0; i < data->first.size(); ++i) {
            m.gradient(data->first[i], g);
            for (int j = 0; j < Model::kParams; ++j) jac(static_cast<Eigen::Index>(i), j) = g[j];
        }
    };
    return pb;
}

}  // namespace detail

/// Least-squares problem fitting a 1D model to samples (x_i, y_i).
template <class Model>
FitProblem curve_fit_problem(std::vector<double> xs, std::vector<double> ys, const Model& init) {
    return detail::curve_problem(std::move(xs), std::move(ys), init,
                                 [](const Vector& p) { return Model::from_params(std::span<const double>(p.data(), Model::kParams)); });
}

inline FitProblem curve_fit_problem(std::vector<double> xs, std::vector<double> ys, const ErfEdgeModel& init) {
    const auto conv = init.convention;
    return detail::curve_problem(std::move(xs), std::move(ys), init, [conv](const Vector& p) {
        return ErfEdgeModel::from_params(std::span<const double>(p.data(), ErfEdgeModel::kParams), conv);
    });
}

inline FitProblem curve_fit_problem(std::vector<double> xs, std::vector<double> ys, const GaussianLineModel& init) {
    const double ref = init.reference;
    return detail::curve_problem(std::move(xs), std::move(ys), init, [ref](const Vector& p) {
        return GaussianLineModel::from_params(std::span<const double>(p.data(), GaussianLineModel::kParams), ref);
    });
}

/// Least-squares problem fitting a 2D model to every pixel of `img` (pixel-index coordinates).
template <class Model>
FitProblem image_fit_problem(const Image& img, const Model& init) {
    FitProblem pb;
    const int w = img.width(), h = img.height();
    pb.residual_count = img.size();
    const auto p0 = init.params();
    pb.initial = Eigen::Map<const Vector>(p0.data(), Model::kParams);
    pb.names.assign(Model::kNames.begin(), Model::kNames.end());
    auto data = std::make_shared<std::vector<double>>(img.counts().begin(), img.counts().end());
    pb.residuals = [data, w, h](const Vector& p, Vector& r) {
        const Model m = Model::from_params(std::span<const double>(p.data(), Model::kParams));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const auto i = static_cast<std::size_t>(y) * w + x;
                r[static_cast<Eigen::Index>(i)] = m(x, y) - (*data)[i];
            }
    };
    pb.jacobian = [w, h](const Vector& p, Matrix& jac) {
        const Model m = Model::from_params(std::span<const double>(p.data(), Model::kParams));
        std::array<double, Model::kParams> g{};
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                m.gradient(x, y, g);
                const auto i = static_cast<Eigen::Index>(y) * w + x;
                for (int j = 0; j < Model::kParams; ++j) jac(i, j) = g[j];
            }
    };
    return pb;
}

}  // namespace qdalign

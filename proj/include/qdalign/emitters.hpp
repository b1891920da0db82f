#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "qdalign/error.hpp"
#include "qdalign/fitcore.hpp"
#include "qdalign/image.hpp"
#include "qdalign/imgproc.hpp"
#include "qdalign/models.hpp"

namespace qdalign {

enum class EmitterModelKind { gaussian2d, airy2d };

inline std::string to_string(EmitterModelKind k) { return k == EmitterModelKind::gaussian2d ? "gaussian2d" : "airy2d"; }

struct EmitterFit {
    double x_nm = 0.0;
    double y_nm = 0.0;
    EmitterModelKind model = EmitterModelKind::gaussian2d;
    double sigma_x = 0.0;  ///< px: Gaussian widths, or Airy major/minor scales
    double sigma_y = 0.0;
    double orientation_deg = 0.0;  ///< Airy major-axis direction
    double photons = 0.0;          ///< N, volume under the fitted peak
    double b2 = 0.0;               ///< background variance per pixel (counts²)
    double unc_x_nm = 0.0;
    double unc_y_nm = 0.0;
    double ci95_x_nm = 0.0;
    double ci95_y_nm = 0.0;
    int iterations = 0;
};

struct MortensenInputs {
    double sigma_x = 1.0;  ///< PSF standard deviation (px)
    double photons = 1.0;  ///< N
    double b2 = 0.0;       ///< background photons per pixel
    double a2 = 1.0;       ///< pixel area (px²)
};

/// Predicted variance (px²) of a least-squares Gaussian localization along one axis:
/// σa²/N · (16/9 + 8π·σa²·b²/(N·a²)) with σa² = σ² + a²/12.
inline double mortensen_variance(const MortensenInputs& m) {
    if (!(m.sigma_x > 0.0) || !(m.photons > 0.0) || !(m.b2 >= 0.0) || !(m.a2 > 0.0))
        throw ContractError("mortensen_variance: need sigma > 0, N > 0, b² >= 0, a² > 0");
    const double sa2 = m.sigma_x * m.sigma_x + m.a2 / 12.0;
    return sa2 / m.photons * (16.0 / 9.0 + 8.0 * std::numbers::pi * sa2 * m.b2 / (m.photons * m.a2));
}

struct SpotDetectOptions {
    double k = 8.0;          ///< threshold in robust standard deviations above the median
    int roi_side = 15;       ///< px
    double suppress_fraction = 0.2;  ///< maxima this much dimmer than a neighbour inside one ROI are dropped
};

/// Local maxima of the 3x3-smoothed image above median + k·(1.4826·MAD), each wrapped in a square
/// ROI; overlapping ROIs are merged into their bounding box and flagged.
inline std::vector<Roi> detect_spots(const Image& img, const SpotDetectOptions& opt = {}) {
    const int w = img.width(), h = img.height();
    if (w < 3 || h < 3) return {};
    Image sm(w, h, img.pitch_nm());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (img.contains(x + dx, y + dy)) acc += img(x + dx, y + dy), ++n;
            sm(x, y) = acc / n;
        }
    const std::vector<double> vals(sm.counts().begin(), sm.counts().end());
    const auto [med, mad] = detail::median_mad(vals);
    const double thr = med + opt.k * 1.4826 * mad;

    struct Peak {
        int x, y;
        double v;
    };
    std::vector<Peak> peaks;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = sm(x, y);
            if (!(v > thr)) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if ((dx == 0 && dy == 0) || !sm.contains(x + dx, y + dy)) continue;
                    const double u = sm(x + dx, y + dy);
                    // ties are resolved towards the first pixel in raster order
                    if (u > v || (u == v && (dy < 0 || (dy == 0 && dx < 0)))) {
                        is_max = false;
                        break;
                    }
                }
            if (is_max) peaks.push_back({x, y, v});
        }
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.v > b.v; });
    const int half = opt.roi_side / 2;
    std::vector<Peak> kept;
    for (const auto& p : peaks) {
        bool weak = false;
        for (const auto& q : kept)
            if (std::abs(q.x - p.x) <= half && std::abs(q.y - p.y) <= half && p.v - med < opt.suppress_fraction * (q.v - med))
                weak = true;
        if (!weak) kept.push_back(p);
    }

    struct Box {
        int x0, y0, x1, y1;  // inclusive
        bool merged;
    };
    std::vector<Box> boxes;
    for (const auto& p : kept)
        boxes.push_back({std::max(0, p.x - half), std::max(0, p.y - half), std::min(w - 1, p.x - half + opt.roi_side - 1),
                         std::min(h - 1, p.y - half + opt.roi_side - 1), false});
    for (bool changed = true; changed;) {
        changed = false;
        for (std::size_t i = 0; i < boxes.size() && !changed; ++i)
            for (std::size_t j = i + 1; j < boxes.size(); ++j) {
                const auto &a = boxes[i], &b = boxes[j];
                if (a.x0 > b.x1 || b.x0 > a.x1 || a.y0 > b.y1 || b.y0 > a.y1) continue;
                boxes[i] = {std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1), std::max(a.y1, b.y1), true};
                boxes.erase(boxes.begin() + static_cast<std::ptrdiff_t>(j));
                changed = true;
                break;
            }
    }
    std::sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) { return std::tie(a.y0, a.x0) < std::tie(b.y0, b.x0); });
    std::vector<Roi> out;
    for (const auto& b : boxes) out.push_back({b.x0, b.y0, b.x1 - b.x0 + 1, b.y1 - b.y0 + 1, b.merged});
    return out;
}

namespace detail {

struct SpotMoments {
    double offset, amplitude, cx, cy, vxx, vyy, vxy;
};

inline SpotMoments spot_moments(const Image& roi) {
    std::vector<double> v(roi.counts().begin(), roi.counts().end());
    const double base = quantile_of(v, 0.2);
    const double top = *std::max_element(v.begin(), v.end());
    double sw = 0, sx = 0, sy = 0;
    for (int y = 0; y < roi.height(); ++y)
        for (int x = 0; x < roi.width(); ++x) {
            const double wgt = std::max(roi(x, y) - base, 0.0);
            sw += wgt, sx += wgt * x, sy += wgt * y;
        }
    if (!(sw > 0.0)) throw FitError("emitter fit: ROI has no signal above its floor");
    const double cx = sx / sw, cy = sy / sw;
    double sxx = 0, syy = 0, sxy = 0;
    for (int y = 0; y < roi.height(); ++y)
        for (int x = 0; x < roi.width(); ++x) {
            const double wgt = std::max(roi(x, y) - base, 0.0);
            sxx += wgt * (x - cx) * (x - cx), syy += wgt * (y - cy) * (y - cy), sxy += wgt * (x - cx) * (y - cy);
        }
    return {base, top - base, cx, cy, sxx / sw, syy / sw, sxy / sw};
}

/// Mean squared residual over pixels outside the peak footprint; falls back to the fitted offset
/// when fewer than 8 pixels remain.
template <class Model, class Outside>
double background_variance(const Image& roi, const Model& m, Outside outside) {
    double s = 0;
    int n = 0;
    for (int y = 0; y < roi.height(); ++y)
        for (int x = 0; x < roi.width(); ++x) {
            if (!outside(x, y)) continue;
            const double r = roi(x, y) - m(x, y);
            s += r * r, ++n;
        }
    return n >= 8 ? s / n : std::max(m.offset, 0.0);
}

/// Half of the 95.4% interval from the sandwich covariance: shot noise makes the pixel variances
/// follow the spot, which the plain least-squares covariance ignores.
inline double robust_ci95(const FitResult& res, int j) {
    return 2.0 * std::sqrt(std::max(res.robust_covariance(j, j), 0.0));
}

inline Vector bounds_vector(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

}  // namespace detail

/// Fits an axis-aligned 2D Gaussian to the pixels of `roi`; the position comes back in nm in
/// the frame of `img`, with per-axis uncertainty from the Mortensen prediction.
inline EmitterFit fit_emitter_gaussian(const Image& img, const Roi& roi) {
    const Image data = img.crop(roi);
    const int w = data.width(), h = data.height();
    if (w < 5 || h < 5) throw ContractError("fit_emitter_gaussian: ROI smaller than 5x5");
    const auto mom = detail::spot_moments(data);
    const double side = std::max(w, h);
    Gaussian2DModel init{std::max(mom.amplitude, 1e-9), mom.cx, mom.cy,
                         std::clamp(std::sqrt(std::max(mom.vxx, 0.0)), 0.5, 0.5 * side),
                         std::clamp(std::sqrt(std::max(mom.vyy, 0.0)), 0.5, 0.5 * side), mom.offset};
    auto pb = image_fit_problem(data, init);
    const double inf = std::numeric_limits<double>::infinity();
    pb.lower = detail::bounds_vector({0.0, -0.5, -0.5, 0.2, 0.2, -inf});
    pb.upper = detail::bounds_vector({inf, w - 0.5, h - 0.5, side, side, inf});
    for (int j = 0; j < Gaussian2DModel::kParams; ++j) pb.initial[j] = std::clamp(pb.initial[j], pb.lower[j], pb.upper[j]);
    const FitResult res = lm_fit(pb);
    const auto m = Gaussian2DModel::from_params(std::span<const double>(res.params.data(), Gaussian2DModel::kParams));
    if (!res.converged) throw FitError("fit_emitter_gaussian: fit did not converge");
    for (int j : {int(Gaussian2DModel::kSigmaX), int(Gaussian2DModel::kSigmaY)})
        if (res.params[j] <= pb.lower[j] * 1.0001 || res.params[j] >= pb.upper[j] * 0.9999)
            throw FitError(fmt::format("fit_emitter_gaussian: {} at its bound ({})", Gaussian2DModel::kNames[j], res.params[j]));

    EmitterFit out;
    out.model = EmitterModelKind::gaussian2d;
    const double pitch = img.pitch_nm();
    out.x_nm = (roi.x0 + m.x0) * pitch;
    out.y_nm = (roi.y0 + m.y0) * pitch;
    out.sigma_x = m.sigma_x;
    out.sigma_y = m.sigma_y;
    out.photons = m.volume();
    if (!(out.photons > 0.0)) throw FitError("fit_emitter_gaussian: no photons under the fitted peak");
    out.b2 = detail::background_variance(data, m, [&](int x, int y) {
        const double u = (x - m.x0) / m.sigma_x, v = (y - m.y0) / m.sigma_y;
        return u * u + v * v > 9.0;
    });
    // the point-sampled model absorbs pixelation into its width: σ_fit² ≈ σ² + a²/12
    auto psf_sigma = [](double s) { return std::sqrt(std::max(s * s - 1.0 / 12.0, 0.01)); };
    out.unc_x_nm = std::sqrt(mortensen_variance({psf_sigma(m.sigma_x), out.photons, out.b2, 1.0})) * pitch;
    out.unc_y_nm = std::sqrt(mortensen_variance({psf_sigma(m.sigma_y), out.photons, out.b2, 1.0})) * pitch;
    out.ci95_x_nm = detail::robust_ci95(res, Gaussian2DModel::kX0) * pitch;
    out.ci95_y_nm = detail::robust_ci95(res, Gaussian2DModel::kY0) * pitch;
    out.iterations = res.iterations;
    return out;
}

inline EmitterFit fit_emitter_gaussian(const Image& roi_img) {
    return fit_emitter_gaussian(roi_img, Roi{0, 0, roi_img.width(), roi_img.height()});
}

struct AiryFitOptions {
    double ellipticity_threshold = 1.03;  ///< free the orientation only for spots at least this elongated
};

/// Fits an elliptical Airy pattern. A first fit keeps the axes aligned with the pixel grid; the
/// orientation is released only when the spot is clearly elliptical, since it is undefined for a
/// round spot. Uncertainty is half the 95.4% interval of the center parameters.
inline EmitterFit fit_emitter_airy(const Image& img, const Roi& roi, const AiryFitOptions& opt = {}) {
    const Image data = img.crop(roi);
    const int w = data.width(), h = data.height();
    if (w < 5 || h < 5) throw ContractError("fit_emitter_airy: ROI smaller than 5x5");
    const auto mom = detail::spot_moments(data);
    const double side = std::max(w, h);
    // near its center the Airy pattern follows exp(−ρ²/4), i.e. a Gaussian of width √2·scale
    const double s0 = std::clamp(std::sqrt(std::max(0.5 * (mom.vxx + mom.vyy), 0.0)) / std::numbers::sqrt2, 0.5, 0.5 * side);
    EllipticalAiryModel init{std::max(mom.amplitude, 1e-9), mom.cx, mom.cy, s0, s0, 0.0, mom.offset};
    const double inf = std::numeric_limits<double>::infinity();
    auto make_problem = [&](const EllipticalAiryModel& start, bool free_orientation) {
        auto pb = image_fit_problem(data, start);
        pb.lower = detail::bounds_vector({0.0, -0.5, -0.5, 0.2, 0.2, -inf, -inf});
        pb.upper = detail::bounds_vector({inf, w - 0.5, h - 0.5, side, side, inf, inf});
        pb.fixed = {false, false, false, false, false, !free_orientation, false};
        for (int j = 0; j < EllipticalAiryModel::kParams; ++j) pb.initial[j] = std::clamp(pb.initial[j], pb.lower[j], pb.upper[j]);
        return pb;
    };
    FitResult res = lm_fit(make_problem(init, false));
    auto m = EllipticalAiryModel::from_params(std::span<const double>(res.params.data(), EllipticalAiryModel::kParams));
    const double ratio = std::max(m.scale_major, m.scale_minor) / std::min(m.scale_major, m.scale_minor);
    if (res.converged && ratio > opt.ellipticity_threshold) {
        // seed the orientation from the second moments of the data
        auto start = m;
        const double theta = 0.5 * std::atan2(2.0 * mom.vxy, mom.vxx - mom.vyy) * 180.0 / std::numbers::pi;
        start.orientation_deg = theta;
        start.scale_major = std::max(m.scale_major, m.scale_minor);
        start.scale_minor = std::min(m.scale_major, m.scale_minor);
        try {
            FitResult freed = lm_fit(make_problem(start, true));
            if (freed.converged && freed.cost <= res.cost) {
                res = std::move(freed);
                m = EllipticalAiryModel::from_params(std::span<const double>(res.params.data(), EllipticalAiryModel::kParams));
            }
        } catch (const RankDeficientError&) {
        }
    }
    if (!res.converged) throw FitError("fit_emitter_airy: fit did not converge");
    for (int j : {int(EllipticalAiryModel::kScaleMajor), int(EllipticalAiryModel::kScaleMinor)})
        if (res.params[j] <= 0.2 * 1.0001 || res.params[j] >= side * 0.9999)
            throw FitError(fmt::format("fit_emitter_airy: {} at its bound ({})", EllipticalAiryModel::kNames[j], res.params[j]));

    const auto norm = m.normalized();
    EmitterFit out;
    out.model = EmitterModelKind::airy2d;
    const double pitch = img.pitch_nm();
    out.x_nm = (roi.x0 + m.x0) * pitch;
    out.y_nm = (roi.y0 + m.y0) * pitch;
    out.sigma_x = norm.scale_major;
    out.sigma_y = norm.scale_minor;
    out.orientation_deg = norm.orientation_deg;
    out.photons = m.volume();
    if (!(out.photons > 0.0)) throw FitError("fit_emitter_airy: no photons under the fitted peak");
    const double t = m.orientation_deg * std::numbers::pi / 180.0, c = std::cos(t), s = std::sin(t);
    out.b2 = detail::background_variance(data, m, [&](int x, int y) {
        const double dx = x - m.x0, dy = y - m.y0;
        const double u = (c * dx + s * dy) / m.scale_major, v = (-s * dx + c * dy) / m.scale_minor;
        return u * u + v * v > kAiryFirstZero * kAiryFirstZero;
    });
    out.ci95_x_nm = detail::robust_ci95(res, EllipticalAiryModel::kX0) * pitch;
    out.ci95_y_nm = detail::robust_ci95(res, EllipticalAiryModel::kY0) * pitch;
    out.unc_x_nm = out.ci95_x_nm;
    out.unc_y_nm = out.ci95_y_nm;
    out.iterations = res.iterations;
    return out;
}

inline EmitterFit fit_emitter_airy(const Image& roi_img, const AiryFitOptions& opt = {}) {
    return fit_emitter_airy(roi_img, Roi{0, 0, roi_img.width(), roi_img.height()}, opt);
}

}  // namespace qdalign

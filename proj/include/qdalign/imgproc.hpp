#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "qdalign/error.hpp"
#include "qdalign/fitcore.hpp"
#include "qdalign/image.hpp"
#include "qdalign/models.hpp"

namespace qdalign {

struct RotationEstimate {
    double angle_deg = 0.0;        ///< in [-45, 45)
    double uncertainty_deg = 0.0;  ///< >= 0
};

/// Smooth illumination envelope: amplitude·exp(−(x−cx)²/2σx² − (y−cy)²/2σy²) + offset (pixels).
/// A fallback constant model has infinite sigmas.
struct BackgroundModel {
    double amplitude = 0.0;
    double center_x = 0.0;
    double center_y = 0.0;
    double sigma_x = std::numeric_limits<double>::infinity();
    double sigma_y = std::numeric_limits<double>::infinity();
    double offset = 0.0;

    bool is_fallback() const { return !std::isfinite(sigma_x) || !std::isfinite(sigma_y); }

    double operator()(double x, double y) const {
        if (is_fallback()) return offset;
        const double dx = (x - center_x) / sigma_x, dy = (y - center_y) / sigma_y;
        return amplitude * std::exp(-0.5 * (dx * dx + dy * dy)) + offset;
    }
};

namespace detail {

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    double m = *mid;
    if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), mid));
    return m;
}

/// Median and (unscaled) median absolute deviation.
inline std::pair<double, double> median_mad(const std::vector<double>& v) {
    const double med = median_of(v);
    std::vector<double> dev(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) dev[i] = std::fabs(v[i] - med);
    return {med, median_of(std::move(dev))};
}

inline double quantile_of(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    const auto k = static_cast<std::ptrdiff_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1));
    std::nth_element(v.begin(), v.begin() + k, v.end());
    return v[static_cast<std::size_t>(k)];
}

/// Per-pixel white-noise variance from the MAD of horizontal neighbour differences.
inline double pixel_noise_variance(const Image& img) {
    std::vector<double> diffs;
    diffs.reserve(img.size());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 1; x < img.width(); ++x) diffs.push_back(img(x, y) - img(x - 1, y));
    if (diffs.empty()) return 0.0;
    const double sd = 1.4826 * median_mad(diffs).second;
    return 0.5 * sd * sd;
}

/// Zero-mean pixel samples inside the inscribed circle, with offsets from the image center.
struct ProjectionSamples {
    std::vector<float> dx, dy, value;
    int radius = 0;
};

inline ProjectionSamples projection_samples(const Image& img, int stride) {
    ProjectionSamples s;
    const double cx = 0.5 * (img.width() - 1), cy = 0.5 * (img.height() - 1);
    s.radius = std::max(1, std::min(img.width(), img.height()) / 2 - 1);
    const double r2 = static_cast<double>(s.radius) * s.radius;
    double sum = 0.0;
    for (int y = 0; y < img.height(); y += stride)
        for (int x = 0; x < img.width(); x += stride) {
            const double dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy > r2) continue;
            s.dx.push_back(static_cast<float>(dx));
            s.dy.push_back(static_cast<float>(dy));
            s.value.push_back(static_cast<float>(img(x, y)));
            sum += img(x, y);
        }
    const auto mean = static_cast<float>(s.value.empty() ? 0.0 : sum / static_cast<double>(s.value.size()));
    for (auto& v : s.value) v -= mean;
    return s;
}

/// Sum of squared row and column projections of the samples viewed at `angle_deg`.
/// Samples are split linearly between quarter-pixel bins and the profiles are smoothed with a
/// 1 px Gaussian, which keeps the score a smooth function of the angle.
inline double projection_score(const ProjectionSamples& s, double angle_deg, std::vector<double>& rows,
                               std::vector<double>& cols) {
    constexpr int kSub = 4;
    constexpr int kHalfKernel = 4 * kSub;
    static const std::array<double, 2 * kHalfKernel + 1> kernel = [] {
        std::array<double, 2 * kHalfKernel + 1> k{};
        for (int i = -kHalfKernel; i <= kHalfKernel; ++i) {
            const double u = static_cast<double>(i) / kSub;
            k[static_cast<std::size_t>(i + kHalfKernel)] = std::exp(-0.5 * u * u);
        }
        return k;
    }();

    const double t = angle_deg * std::numbers::pi / 180.0;
    const auto c = static_cast<float>(std::cos(t) * kSub), sn = static_cast<float>(std::sin(t) * kSub);
    const std::size_t bins = static_cast<std::size_t>(kSub * (2 * s.radius + 4) + 2 * kHalfKernel);
    rows.assign(bins, 0.0);
    cols.assign(bins, 0.0);
    const auto shift = static_cast<float>(kSub * (s.radius + 1) + kHalfKernel);
    for (std::size_t i = 0; i < s.value.size(); ++i) {
        const float v = -s.dx[i] * sn + s.dy[i] * c + shift;
        const float u = s.dx[i] * c + s.dy[i] * sn + shift;
        const auto iv = static_cast<std::size_t>(v), iu = static_cast<std::size_t>(u);
        const float fv = v - static_cast<float>(iv), fu = u - static_cast<float>(iu);
        const float val = s.value[i];
        rows[iv] += val * (1.0f - fv);
        rows[iv + 1] += val * fv;
        cols[iu] += val * (1.0f - fu);
        cols[iu + 1] += val * fu;
    }
    double score = 0.0;
    for (const auto* profile : {&rows, &cols}) {
        const auto& p = *profile;
        for (std::size_t b = kHalfKernel; b + kHalfKernel < bins; ++b) {
            double acc = 0.0;
            for (int k = -kHalfKernel; k <= kHalfKernel; ++k) acc += kernel[static_cast<std::size_t>(k + kHalfKernel)] * p[b + k];
            score += acc * acc;
        }
    }
    return score;
}

}  // namespace detail

struct RotationSearch {
    double range_deg = 5.0;
    double step_deg = 0.01;
    double coarse_step_deg = 0.1;
};

/// Angle by which straight horizontal/vertical features have been rotated (counter-clockwise
/// in pixel coordinates, x right, y down), found by maximizing the variance of the row and
/// column projection profiles. The scan runs coarse-to-fine; the maximum on the fine grid
/// is refined with a least-squares parabola whose vertex standard error, combined with the
/// grid resolution, is reported as the uncertainty.
inline RotationEstimate estimate_rotation(const Image& img, const RotationSearch& search = {}) {
    std::vector<double> rows, cols;
    const int coarse_stride = img.size() > 250'000 ? 2 : 1;
    const auto coarse = detail::projection_samples(img, coarse_stride);
    if (coarse.value.size() < 16) throw NoFeaturesError("estimate_rotation: image too small");

    const int n_coarse = static_cast<int>(std::lround(2.0 * search.range_deg / search.coarse_step_deg)) + 1;
    std::vector<double> scores(static_cast<std::size_t>(n_coarse));
    int best = 0;
    for (int i = 0; i < n_coarse; ++i) {
        scores[i] = detail::projection_score(coarse, -search.range_deg + i * search.coarse_step_deg, rows, cols);
        if (scores[i] > scores[best]) best = i;
    }
    // white noise alone scores about n·σ² times the score of one unit sample at every angle;
    // demand a peak well above that
    detail::ProjectionSamples unit;
    unit.dx = {0.0f}, unit.dy = {0.0f}, unit.value = {1.0f}, unit.radius = 1;
    const double noise_score = static_cast<double>(coarse.value.size()) * detail::pixel_noise_variance(img) *
                               detail::projection_score(unit, 0.0, rows, cols);
    const double prominence = scores[best] - detail::median_of(scores);
    if (!(prominence > 0.5 * noise_score))
        throw NoFeaturesError("estimate_rotation: projection variance is flat; no line features");

    const auto fine = coarse_stride == 1 ? coarse : detail::projection_samples(img, 1);
    const double centre = -search.range_deg + best * search.coarse_step_deg;
    const int half = static_cast<int>(std::lround(search.coarse_step_deg / search.step_deg));
    double best_angle = centre, best_score = -1.0;
    for (int k = -half; k <= half; ++k) {
        const double a = centre + k * search.step_deg;
        const double sc = detail::projection_score(fine, a, rows, cols);
        if (sc > best_score) best_score = sc, best_angle = a;
    }

    // parabola through the 11 fine-grid points around the maximum, in centred units of one step
    constexpr int kHalfWindow = 5;
    Eigen::Matrix<double, 2 * kHalfWindow + 1, 3> design;
    Eigen::Matrix<double, 2 * kHalfWindow + 1, 1> values;
    for (int k = -kHalfWindow; k <= kHalfWindow; ++k) {
        const int i = k + kHalfWindow;
        design(i, 0) = 1.0;
        design(i, 1) = k;
        design(i, 2) = static_cast<double>(k) * k;
        values(i) = k == 0 ? best_score : detail::projection_score(fine, best_angle + k * search.step_deg, rows, cols);
    }
    const double scale = values.cwiseAbs().maxCoeff();
    values /= scale;
    const Eigen::Matrix3d ata = design.transpose() * design;
    const Eigen::Vector3d coef = ata.ldlt().solve(design.transpose() * values);
    const double grid_unc = search.step_deg / std::sqrt(12.0);
    RotationEstimate est{best_angle, grid_unc};
    if (coef[2] < 0.0) {
        const double vertex = -coef[1] / (2.0 * coef[2]);
        if (std::fabs(vertex) <= kHalfWindow) {
            const double resid = (values - design * coef).squaredNorm() / (2 * kHalfWindow + 1 - 3);
            const Eigen::Matrix3d cov = ata.inverse() * resid;
            const double g1 = -1.0 / (2.0 * coef[2]), g2 = coef[1] / (2.0 * coef[2] * coef[2]);
            const double var = g1 * g1 * cov(1, 1) + 2.0 * g1 * g2 * cov(1, 2) + g2 * g2 * cov(2, 2);
            est.angle_deg = best_angle + vertex * search.step_deg;
            est.uncertainty_deg = std::hypot(std::sqrt(std::max(var, 0.0)) * search.step_deg, grid_unc);
        }
    }
    return est;
}

/// Rotates the image content by `angle_deg` (counter-clockwise in pixel coordinates) about the
/// image center, with bilinear resampling; samples falling outside the frame read as 0.
inline Image rotate(const Image& img, double angle_deg) {
    if (!(std::fabs(angle_deg) < 45.0)) throw ContractError("rotate: |angle| must be < 45 degrees");
    if (angle_deg == 0.0) return img;
    Image out(img.width(), img.height(), img.pitch_nm());
    for (const auto& [k, v] : img.metadata()) out.set_meta(k, v);
    const double t = angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(t), s = std::sin(t);
    const double cx = 0.5 * (img.width() - 1), cy = 0.5 * (img.height() - 1);
    auto sample = [&](int x, int y) { return img.contains(x, y) ? img(x, y) : 0.0; };
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const double dx = x - cx, dy = y - cy;
            // inverse map: source = center + R(-angle)(p - center)
            const double sx = cx + c * dx + s * dy;
            const double sy = cy - s * dx + c * dy;
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            if (x0 < -1 || y0 < -1 || x0 >= img.width() || y0 >= img.height()) continue;
            const double fx = sx - x0, fy = sy - y0;
            const double v = (1 - fx) * (1 - fy) * sample(x0, y0) + fx * (1 - fy) * sample(x0 + 1, y0) +
                             (1 - fx) * fy * sample(x0, y0 + 1) + fx * fy * sample(x0 + 1, y0 + 1);
            out(x, y) = std::max(v, 0.0);
        }
    }
    return out;
}

struct BackgroundOptions {
    double outlier_mads = 2.0;    ///< pixels further than this many MADs from the model are masked
    int refinement_passes = 2;    ///< re-masking rounds after the first fit
    std::size_t max_samples = 65'536;  ///< the envelope is fitted on a regular sub-grid of at most this many pixels
};

/// Fits a Gaussian illumination envelope to the image with outliers masked, and returns the
/// residual image (clamped at 0) together with the model. When the envelope fit fails the
/// model falls back to a constant median level with infinite sigmas.
inline std::pair<Image, BackgroundModel> subtract_background(const Image& img, const BackgroundOptions& opt = {}) {
    const auto counts = img.counts();
    std::vector<double> all(counts.begin(), counts.end());
    const auto [median, mad] = detail::median_mad(all);

    BackgroundModel model;
    model.offset = median;

    const double lo = *std::min_element(all.begin(), all.end()), hi = *std::max_element(all.begin(), all.end());
    if (hi - lo > 1e-12 * std::max(1.0, std::fabs(hi))) {
        const int stride = std::max<int>(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(img.size()) / opt.max_samples))));
        std::vector<double> xs, ys, vs;
        for (int y = stride / 2; y < img.height(); y += stride)
            for (int x = stride / 2; x < img.width(); x += stride) {
                xs.push_back(x);
                ys.push_back(y);
                vs.push_back(img(x, y));
            }

        std::vector<char> keep(vs.size());
        const double thr0 = opt.outlier_mads * mad;
        for (std::size_t i = 0; i < vs.size(); ++i) keep[i] = mad == 0.0 || std::fabs(vs[i] - median) <= thr0;

        // initial guess from moments of the kept samples
        std::vector<double> kept;
        for (std::size_t i = 0; i < vs.size(); ++i)
            if (keep[i]) kept.push_back(vs[i]);
        const double base = detail::quantile_of(kept, 0.02);
        const double top = detail::quantile_of(kept, 0.995);
        double sw = 0, sx = 0, sy = 0;
        for (std::size_t i = 0; i < vs.size(); ++i) {
            if (!keep[i]) continue;
            const double w = std::max(vs[i] - base, 0.0);
            sw += w, sx += w * xs[i], sy += w * ys[i];
        }
        Gaussian2DModel guess{std::max(top - base, 1e-9), sw > 0 ? sx / sw : 0.5 * (img.width() - 1),
                              sw > 0 ? sy / sw : 0.5 * (img.height() - 1), 0.0, 0.0, base};
        double sxx = 0, syy = 0;
        for (std::size_t i = 0; i < vs.size(); ++i) {
            if (!keep[i]) continue;
            const double w = std::max(vs[i] - base, 0.0);
            sxx += w * (xs[i] - guess.x0) * (xs[i] - guess.x0);
            syy += w * (ys[i] - guess.y0) * (ys[i] - guess.y0);
        }
        const double extent = std::max(img.width(), img.height());
        guess.sigma_x = std::clamp(sw > 0 ? std::sqrt(sxx / sw) : extent / 4, 1.0, 50.0 * extent);
        guess.sigma_y = std::clamp(sw > 0 ? std::sqrt(syy / sw) : extent / 4, 1.0, 50.0 * extent);

        bool ok = false;
        Gaussian2DModel fit = guess;
        try {
            for (int pass = 0; pass <= opt.refinement_passes; ++pass) {
                std::vector<double> fx, fy, fv;
                for (std::size_t i = 0; i < vs.size(); ++i)
                    if (keep[i]) fx.push_back(xs[i]), fy.push_back(ys[i]), fv.push_back(vs[i]);
                if (fv.size() < 12) break;
                FitProblem pb;
                pb.residual_count = fv.size();
                const auto p0 = fit.params();
                pb.initial = Eigen::Map<const Vector>(p0.data(), Gaussian2DModel::kParams);
                pb.names.assign(Gaussian2DModel::kNames.begin(), Gaussian2DModel::kNames.end());
                pb.lower = Vector::Constant(6, -std::numeric_limits<double>::infinity());
                pb.upper = Vector::Constant(6, std::numeric_limits<double>::infinity());
                pb.lower[Gaussian2DModel::kAmplitude] = 0.0;
                pb.lower[Gaussian2DModel::kSigmaX] = pb.lower[Gaussian2DModel::kSigmaY] = 0.5;
                pb.upper[Gaussian2DModel::kSigmaX] = pb.upper[Gaussian2DModel::kSigmaY] = 100.0 * extent;
                pb.lower[Gaussian2DModel::kX0] = pb.lower[Gaussian2DModel::kY0] = -2.0 * extent;
                pb.upper[Gaussian2DModel::kX0] = pb.upper[Gaussian2DModel::kY0] = 3.0 * extent;
                for (int j = 0; j < 6; ++j) pb.initial[j] = std::clamp(pb.initial[j], pb.lower[j], pb.upper[j]);
                pb.residuals = [&](const Vector& p, Vector& r) {
                    const auto m = Gaussian2DModel::from_params(std::span<const double>(p.data(), 6));
                    for (std::size_t i = 0; i < fv.size(); ++i) r[static_cast<Eigen::Index>(i)] = m(fx[i], fy[i]) - fv[i];
                };
                pb.jacobian = [&](const Vector& p, Matrix& jac) {
                    const auto m = Gaussian2DModel::from_params(std::span<const double>(p.data(), 6));
                    std::array<double, 6> g{};
                    for (std::size_t i = 0; i < fv.size(); ++i) {
                        m.gradient(fx[i], fy[i], g);
                        for (int j = 0; j < 6; ++j) jac(static_cast<Eigen::Index>(i), j) = g[j];
                    }
                };
                const FitResult res = lm_fit(pb);
                fit = Gaussian2DModel::from_params(std::span<const double>(res.params.data(), 6));
                ok = res.converged && fit.sigma_x < 0.99 * pb.upper[3] && fit.sigma_y < 0.99 * pb.upper[4];
                if (!ok || pass == opt.refinement_passes) break;

                std::vector<double> resid(vs.size());
                for (std::size_t i = 0; i < vs.size(); ++i) resid[i] = vs[i] - fit(xs[i], ys[i]);
                const auto [rmed, rmad] = detail::median_mad(resid);
                const double thr = std::max(opt.outlier_mads * rmad, 1e-9 * (fit.amplitude + std::fabs(fit.offset)));
                for (std::size_t i = 0; i < vs.size(); ++i) keep[i] = std::fabs(resid[i] - rmed) <= thr;
            }
        } catch (const Error&) {
            ok = false;
        }
        if (ok) model = {fit.amplitude, fit.x0, fit.y0, fit.sigma_x, fit.sigma_y, fit.offset};
    }

    Image residual(img.width(), img.height(), img.pitch_nm());
    for (const auto& [k, v] : img.metadata()) residual.set_meta(k, v);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) residual(x, y) = std::max(img(x, y) - model(x, y), 0.0);
    return {std::move(residual), model};
}

/// Depth of dark features below the background model, clamped at 0: max(model − img, 0).
/// Shadow markers become positive bumps on a zero floor.
inline Image invert_residual(const Image& img, const BackgroundModel& model) {
    Image out(img.width(), img.height(), img.pitch_nm());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) out(x, y) = std::max(model(x, y) - img(x, y), 0.0);
    return out;
}

}  // namespace qdalign

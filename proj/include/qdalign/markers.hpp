#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qdalign/error.hpp"
#include "qdalign/fitcore.hpp"
#include "qdalign/image.hpp"
#include "qdalign/imgproc.hpp"
#include "qdalign/models.hpp"

namespace qdalign {

/// Nominal layout of the marker grid in the (rotation-corrected) image frame.
struct GridGeometry {
    double pitch_nm = 40'000.0;   ///< side of one grid square
    double origin_x_nm = 0.0;     ///< approximate image-frame position of node (0, 0)
    double origin_y_nm = 0.0;
    double arm_length_nm = 10'000.0;
    double arm_width_nm = 500.0;
    double roi_margin_nm = 1'000.0;   ///< ROI extends this far beyond the arm tips
    double search_radius_nm = 1'500.0; ///< how far a cross may sit from its nominal node

    std::array<double, 2> node_nm(int i, int j) const { return {origin_x_nm + i * pitch_nm, origin_y_nm + j * pitch_nm}; }
};

struct CrossDetection {
    Roi roi;
    int node_i = 0;
    int node_j = 0;
    double nominal_x_nm = 0.0;  ///< grid-frame position of the node, relative to node (0, 0)
    double nominal_y_nm = 0.0;
};

/// Straight line c(s) = intercept + slope·(s − reference) fitted to arm section centers.
struct ArmLine {
    double slope = 0.0;
    double intercept = 0.0;
    double reference = 0.0;
    Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();  ///< of (intercept, slope)
};

struct CrossFit {
    double center_x_nm = 0.0;
    double center_y_nm = 0.0;
    double unc_x_nm = 0.0;  ///< one standard deviation
    double unc_y_nm = 0.0;
    std::array<int, 2> n_sections_used{0, 0};  ///< vertical arm, horizontal arm
    ArmLine vertical;    ///< x as a function of y (pixels)
    ArmLine horizontal;  ///< y as a function of x (pixels)
    std::vector<std::string> diagnostics;
};

struct SectionFit {
    double center = 0.0;  ///< pixels, in profile sample coordinates
    double unc = 0.0;     ///< half of the 95.4% interval (two standard deviations)
    bool converged = false;
};

struct GridLabel {
    int row = 0;
    int column = 0;
};

namespace detail {

inline std::vector<double> shadow_profile(const Image& img, const Roi& roi, bool columns) {
    std::vector<double> p(static_cast<std::size_t>(columns ? roi.width : roi.height), 0.0);
    for (int y = roi.y0; y < roi.y0 + roi.height; ++y)
        for (int x = roi.x0; x < roi.x0 + roi.width; ++x) {
            if (!img.contains(x, y)) continue;
            p[static_cast<std::size_t>(columns ? x - roi.x0 : y - roi.y0)] += img(x, y);
        }
    return p;
}

/// Index of the strongest peak within [lo, hi] of the smoothed profile and its height above the
/// profile median in units of the smoothed noise.
inline std::pair<int, double> profile_peak(const std::vector<double>& p, int lo, int hi, int smooth) {
    std::vector<double> s(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        double acc = 0.0;
        int cnt = 0;
        for (int k = -smooth; k <= smooth; ++k) {
            const auto j = static_cast<std::ptrdiff_t>(i) + k;
            if (j < 0 || j >= static_cast<std::ptrdiff_t>(p.size())) continue;
            acc += p[static_cast<std::size_t>(j)], ++cnt;
        }
        s[i] = acc / cnt;
    }
    lo = std::max(lo, 0);
    hi = std::min(hi, static_cast<int>(s.size()) - 1);
    int best = lo;
    for (int i = lo; i <= hi; ++i)
        if (s[static_cast<std::size_t>(i)] > s[static_cast<std::size_t>(best)]) best = i;
    const double prominence = s[static_cast<std::size_t>(best)] - median_mad(s).first;
    if (!(prominence > 0.0)) return {best, 0.0};
    // noise of the smoothed profile, from the spread of neighbour differences of the raw one
    std::vector<double> diffs;
    for (std::size_t i = 1; i < p.size(); ++i) diffs.push_back(p[i] - p[i - 1]);
    const double noise = 1.4826 * median_mad(diffs).second / std::sqrt(2.0 * (2 * smooth + 1));
    const double z = noise > 0.0 ? prominence / noise : std::numeric_limits<double>::infinity();
    return {best, z};
}

inline bool roi_inside(const Roi& r, const Image& img) {
    return r.x0 >= 0 && r.y0 >= 0 && r.x0 + r.width <= img.width() && r.y0 + r.height <= img.height();
}

}  // namespace detail

struct CrossDetectOptions {
    double min_z = 12.0;  ///< robust z-score both arm profiles must reach
};

/// Finds the crosses of the nominal grid in a shadow image (positive where gold blocks light,
/// e.g. from `invert_residual`). Returns one ROI per grid node whose cross is found within the
/// search radius, recentered on the cross; crosses whose ROI leaves the frame are skipped.
inline std::vector<CrossDetection> detect_crosses(const Image& shadow, const GridGeometry& grid,
                                                  const CrossDetectOptions& opt = {}) {
    std::vector<CrossDetection> out;
    const double pitch = shadow.pitch_nm();
    const int half = static_cast<int>(std::ceil((0.5 * grid.arm_length_nm + grid.roi_margin_nm) / pitch));
    const int search = static_cast<int>(std::ceil(grid.search_radius_nm / pitch));
    const int smooth = std::max(1, static_cast<int>(std::lround(0.25 * grid.arm_width_nm / pitch)));
    const double fov_x = shadow.width() * pitch, fov_y = shadow.height() * pitch;
    const int i_lo = static_cast<int>(std::floor(-grid.origin_x_nm / grid.pitch_nm)) - 1;
    const int i_hi = static_cast<int>(std::ceil((fov_x - grid.origin_x_nm) / grid.pitch_nm)) + 1;
    const int j_lo = static_cast<int>(std::floor(-grid.origin_y_nm / grid.pitch_nm)) - 1;
    const int j_hi = static_cast<int>(std::ceil((fov_y - grid.origin_y_nm) / grid.pitch_nm)) + 1;
    for (int j = j_lo; j <= j_hi; ++j) {
        for (int i = i_lo; i <= i_hi; ++i) {
            const auto node = grid.node_nm(i, j);
            const int nx = static_cast<int>(std::lround(node[0] / pitch)), ny = static_cast<int>(std::lround(node[1] / pitch));
            const Roi probe{nx - half, ny - half, 2 * half + 1, 2 * half + 1};
            if (probe.x0 + probe.width <= 0 || probe.y0 + probe.height <= 0 || probe.x0 >= shadow.width() ||
                probe.y0 >= shadow.height())
                continue;
            const auto cols = detail::shadow_profile(shadow, probe, true);
            const auto rows = detail::shadow_profile(shadow, probe, false);
            const auto [px, zx] = detail::profile_peak(cols, half - search, half + search, smooth);
            const auto [py, zy] = detail::profile_peak(rows, half - search, half + search, smooth);
            if (!(zx >= opt.min_z && zy >= opt.min_z)) continue;
            const Roi roi{probe.x0 + px - half, probe.y0 + py - half, 2 * half + 1, 2 * half + 1};
            if (!detail::roi_inside(roi, shadow)) continue;
            out.push_back({roi, i, j, i * grid.pitch_nm, j * grid.pitch_nm});
        }
    }
    return out;
}

struct SectionOptions {
    BlurConvention convention = BlurConvention::variance;
    int max_iterations = 100;
};

/// Fits the blurred-box edge model, arm width d held fixed, to one cross-section profile sampled at x = 0, 1, ….
/// Throws FitError when the fit does not converge or the center leaves the profile.
inline SectionFit fit_arm_section(std::span<const double> profile, double d, const SectionOptions& opt = {}) {
    if (!(d > 0.0)) throw ContractError("fit_arm_section: d must be positive");
    if (static_cast<double>(profile.size()) < 3.0 * d) throw ContractError("fit_arm_section: profile shorter than 3·d");
    const std::size_t n = profile.size();
    std::vector<double> xs(n), ys(profile.begin(), profile.end());
    for (std::size_t i = 0; i < n; ++i) xs[i] = static_cast<double>(i);

    const double lo = *std::min_element(ys.begin(), ys.end()), hi = *std::max_element(ys.begin(), ys.end());
    if (!(hi > lo)) throw FitError("fit_arm_section: flat profile");
    // initial guess: centroid and second moment of the part above the floor
    double sw = 0, sx = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = std::max(ys[i] - lo - 0.2 * (hi - lo), 0.0);
        sw += w, sx += w * xs[i];
    }
    const double c0 = sx / sw;
    double sxx = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = std::max(ys[i] - lo - 0.2 * (hi - lo), 0.0);
        sxx += w * (xs[i] - c0) * (xs[i] - c0);
    }
    const double blur_sd = std::clamp(std::sqrt(std::max(sxx / sw - d * d / 12.0, 0.0)), 0.5, static_cast<double>(n));
    ErfEdgeModel init{hi - lo, c0, opt.convention == BlurConvention::variance ? blur_sd * blur_sd : blur_sd, d, 0.0, lo,
                      opt.convention};

    auto pb = curve_fit_problem(std::move(xs), std::move(ys), init);
    pb.fixed = {false, false, false, true, false, false};
    pb.names = {"A", "x_c", "sigma", "d", "B", "C"};
    const double inf = std::numeric_limits<double>::infinity();
    pb.lower = Vector(6);
    pb.upper = Vector(6);
    pb.lower << 0.0, 0.0, 1e-4, d, -inf, -inf;
    pb.upper << inf, static_cast<double>(n - 1), static_cast<double>(n * n), d, inf, inf;
    pb.max_iterations = opt.max_iterations;
    for (int j = 0; j < 6; ++j) pb.initial[j] = std::clamp(pb.initial[j], pb.lower[j], pb.upper[j]);
    const FitResult res = lm_fit(pb);
    SectionFit out{res.params[ErfEdgeModel::kCenter], res.ci95[ErfEdgeModel::kCenter], res.converged};
    if (!res.converged) throw FitError("fit_arm_section: fit did not converge");
    if (!(out.unc > 0.0) || !std::isfinite(out.unc)) throw FitError("fit_arm_section: degenerate uncertainty");
    if (out.center <= 0.5 || out.center >= static_cast<double>(n) - 1.5) throw FitError("fit_arm_section: center at profile edge");
    return out;
}

namespace detail {

/// Weighted straight-line fit c = a + b·(s − ref) with weights 1/σ².
inline ArmLine fit_line(const std::vector<double>& s, const std::vector<double>& c, const std::vector<double>& sd,
                        double ref) {
    Eigen::Matrix2d ata = Eigen::Matrix2d::Zero();
    Eigen::Vector2d atb = Eigen::Vector2d::Zero();
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double w = 1.0 / (sd[i] * sd[i]);
        const Eigen::Vector2d row(1.0, s[i] - ref);
        ata += w * row * row.transpose();
        atb += w * row * c[i];
    }
    const Eigen::Matrix2d cov = ata.inverse();
    const Eigen::Vector2d p = cov * atb;
    return {p[1], p[0], ref, cov};
}

}  // namespace detail

struct ArmIntersection {
    double x = 0.0;  ///< pixels
    double y = 0.0;
    Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();
};

/// Intersection of the vertical arm line x = a_v + b_v·(y − y_v) with the horizontal arm line
/// y = a_h + b_h·(x − x_h), with first-order covariance from the two line fits.
inline ArmIntersection intersect_arms(const ArmLine& vertical, const ArmLine& horizontal) {
    const double alpha = vertical.intercept - horizontal.reference;
    const double beta = horizontal.intercept - vertical.reference;
    const double bv = vertical.slope, bh = horizontal.slope;
    const double D = 1.0 - bv * bh;
    if (!(std::fabs(D) > 1e-12)) throw DegenerateError("intersect_arms: arm lines are parallel");
    const double X = (alpha + bv * beta) / D;
    const double Y = beta + bh * X;
    // d(X, Y) / d(alpha, b_v, beta, b_h)
    Eigen::Matrix<double, 2, 4> J;
    J << 1.0 / D, Y / D, bv / D, X * bv / D,
         bh / D, bh * Y / D, 1.0 / D, X / D;
    Eigen::Matrix4d C = Eigen::Matrix4d::Zero();
    C.topLeftCorner<2, 2>() = vertical.covariance;
    C.bottomRightCorner<2, 2>() = horizontal.covariance;
    return {horizontal.reference + X, vertical.reference + Y, J * C * J.transpose()};
}

struct CrossFitOptions {
    int sections_per_arm = 9;
    double section_spacing_d = 1.0;   ///< spacing in units of d
    double profile_half_length_d = 2.0;
    SectionOptions section;
};

/// Locates one cross inside `roi` of a shadow image: each arm is cut by sections spaced d apart
/// and centered on the cross, every section fitted with the edge model, the section centers of each
/// arm fitted by a weighted straight line, and the center taken as the intersection of the two
/// lines. Coordinates are returned in nm in the frame of `img`.
inline CrossFit fit_cross(const Image& img, const Roi& roi, double d_px, const CrossFitOptions& opt = {}) {
    if (!(d_px > 0.0)) throw ContractError("fit_cross: d must be positive");
    if (opt.sections_per_arm < 3) throw ContractError("fit_cross: need at least 3 sections per arm");
    CrossFit fit;

    // coarse center from the arm profiles
    const int smooth = std::max(1, static_cast<int>(std::lround(0.25 * d_px)));
    const auto cols = detail::shadow_profile(img, roi, true);
    const auto rows = detail::shadow_profile(img, roi, false);
    const int x0 = roi.x0 + detail::profile_peak(cols, 0, roi.width - 1, smooth).first;
    const int y0 = roi.y0 + detail::profile_peak(rows, 0, roi.height - 1, smooth).first;

    const int half_len = static_cast<int>(std::ceil(opt.profile_half_length_d * d_px));
    std::vector<double> s_v, c_v, sd_v, s_h, c_h, sd_h;
    std::vector<double> profile(static_cast<std::size_t>(2 * half_len + 1));
    for (int arm = 0; arm < 2; ++arm) {
        const bool vertical = arm == 0;  // the vertical arm is cut by rows
        for (int k = 0; k < opt.sections_per_arm; ++k) {
            const double offset = (k - 0.5 * (opt.sections_per_arm - 1)) * opt.section_spacing_d * d_px;
            const int along = (vertical ? y0 : x0) + static_cast<int>(std::lround(offset));
            const int start = (vertical ? x0 : y0) - half_len;
            bool inside = true;
            for (int i = 0; i <= 2 * half_len; ++i) {
                const int x = vertical ? start + i : along, y = vertical ? along : start + i;
                if (!img.contains(x, y)) {
                    inside = false;
                    break;
                }
                profile[static_cast<std::size_t>(i)] = img(x, y);
            }
            if (!inside) {
                fit.diagnostics.push_back(fmt::format("{} arm section {} leaves the image", vertical ? "vertical" : "horizontal", k));
                continue;
            }
            try {
                const auto sec = fit_arm_section(profile, d_px, opt.section);
                auto& s = vertical ? s_v : s_h;
                auto& c = vertical ? c_v : c_h;
                auto& sd = vertical ? sd_v : sd_h;
                s.push_back(along);
                c.push_back(start + sec.center);
                sd.push_back(std::max(0.5 * sec.unc, 1e-9));
            } catch (const Error& e) {
                fit.diagnostics.push_back(fmt::format("{} arm section {} discarded: {}", vertical ? "vertical" : "horizontal", k, e.what()));
            }
        }
    }
    fit.n_sections_used = {static_cast<int>(s_v.size()), static_cast<int>(s_h.size())};
    if (s_v.size() < 3 || s_h.size() < 3)
        throw DegenerateError(fmt::format("fit_cross: only {} / {} valid sections on the vertical / horizontal arm",
                                          s_v.size(), s_h.size()));

    fit.vertical = detail::fit_line(s_v, c_v, sd_v, y0);
    fit.horizontal = detail::fit_line(s_h, c_h, sd_h, x0);

    const auto cut = intersect_arms(fit.vertical, fit.horizontal);
    const double pitch = img.pitch_nm();
    fit.center_x_nm = cut.x * pitch;
    fit.center_y_nm = cut.y * pitch;
    fit.unc_x_nm = std::sqrt(cut.covariance(0, 0)) * pitch;
    fit.unc_y_nm = std::sqrt(cut.covariance(1, 1)) * pitch;
    return fit;
}

/// Whole-image convenience overload: the image is the ROI.
inline CrossFit fit_cross(const Image& roi_img, double d_px, const CrossFitOptions& opt = {}) {
    return fit_cross(roi_img, Roi{0, 0, roi_img.width(), roi_img.height()}, d_px, opt);
}

/// Decodes a binary label from a shadow image of its rectangles (see LabelSpec for the layout):
/// rectangles are segmented at half the maximum shadow depth, each one's orientation read from its
/// second moments, and the bits assembled row-major, most significant first.
inline GridLabel decode_label(const Image& shadow, int bits_per_axis, double min_aspect = 1.2) {
    if (bits_per_axis < 1 || bits_per_axis > 15) throw ContractError("decode_label: bits_per_axis out of range");
    const int w = shadow.width(), h = shadow.height();
    double peak = 0.0;
    for (double v : shadow.counts()) peak = std::max(peak, v);
    if (!(peak > 0.0)) throw DecodeError("decode_label: no label rectangles visible");
    const double thr = 0.5 * peak;

    struct Blob {
        double n = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        double cx() const { return sx / n; }
        double cy() const { return sy / n; }
    };
    std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
    std::vector<Blob> blobs;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto idx = static_cast<std::size_t>(y) * w + x;
            if (label[idx] >= 0 || shadow(x, y) < thr) continue;
            Blob b;
            const int id = static_cast<int>(blobs.size());
            stack.push_back({x, y});
            label[idx] = id;
            while (!stack.empty()) {
                const auto [px, py] = stack.back();
                stack.pop_back();
                b.n += 1, b.sx += px, b.sy += py, b.sxx += double(px) * px, b.syy += double(py) * py, b.sxy += double(px) * py;
                for (const auto [dx, dy] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
                    const int qx = px + dx, qy = py + dy;
                    if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
                    const auto q = static_cast<std::size_t>(qy) * w + qx;
                    if (label[q] >= 0 || shadow(qx, qy) < thr) continue;
                    label[q] = id;
                    stack.push_back({qx, qy});
                }
            }
            blobs.push_back(b);
        }
    // drop specks
    double largest = 0;
    for (const auto& b : blobs) largest = std::max(largest, b.n);
    std::erase_if(blobs, [&](const Blob& b) { return b.n < 0.2 * largest; });
    const auto expected = static_cast<std::size_t>(2 * bits_per_axis);
    if (blobs.size() != expected)
        throw DecodeError(fmt::format("decode_label: found {} rectangles, expected {}", blobs.size(), expected));

    std::sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) { return a.cy() < b.cy(); });
    auto row_of = [&](std::size_t first) {
        std::vector<Blob> r(blobs.begin() + static_cast<std::ptrdiff_t>(first),
                            blobs.begin() + static_cast<std::ptrdiff_t>(first + bits_per_axis));
        std::sort(r.begin(), r.end(), [](const Blob& a, const Blob& b) { return a.cx() < b.cx(); });
        int value = 0;
        for (const auto& b : r) {
            const double vxx = b.sxx / b.n - b.cx() * b.cx(), vyy = b.syy / b.n - b.cy() * b.cy();
            const double vxy = b.sxy / b.n - b.cx() * b.cy();
            const double tr = 0.5 * (vxx + vyy), det = std::sqrt(0.25 * (vxx - vyy) * (vxx - vyy) + vxy * vxy);
            const double l1 = tr + det, l2 = std::max(tr - det, 1e-12);
            if (std::sqrt(l1 / l2) < min_aspect) throw DecodeError("decode_label: ambiguous rectangle (aspect ratio near 1)");
            const double angle = 0.5 * std::atan2(2.0 * vxy, vxx - vyy);  // major-axis direction
            const bool vertical_rect = std::fabs(angle) > std::numbers::pi / 4;
            value = (value << 1) | (vertical_rect ? 1 : 0);
        }
        return value;
    };
    return {row_of(0), row_of(static_cast<std::size_t>(bits_per_axis))};
}

}  // namespace qdalign

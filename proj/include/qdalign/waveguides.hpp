#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "qdalign/emitters.hpp"
#include "qdalign/error.hpp"
#include "qdalign/fitcore.hpp"
#include "qdalign/image.hpp"
#include "qdalign/models.hpp"
#include "qdalign/synth.hpp"

namespace qdalign {

struct GuideSection {
    double position_nm = 0.0;  ///< along the guide
    double center_nm = 0.0;    ///< across the guide
    double unc_nm = 0.0;       ///< half of the 95.4% interval
};

/// Central axis of a straight nanoguide. An along-x guide fixes only its y coordinate and vice versa.
struct WaveguideAxis {
    Orientation orientation = Orientation::along_x;
    double axis_nm = 0.0;
    double unc_nm = 0.0;  ///< standard error of the weighted mean, same interval convention as the sections
    std::vector<GuideSection> sections;
    std::vector<std::string> diagnostics;
};

struct GuideSectionFit {
    double center = 0.0;  ///< px, profile sample coordinates
    double unc = 0.0;     ///< half of the 95.4% interval
    TripleGaussianModel model;
    int attempts = 0;
};

struct GuideSectionOptions {
    double edge_offset_px = 0.0;  ///< nominal trench-edge distance from the middle peak; 0 = a quarter of the profile
    double width_px = 2.0;        ///< initial Gaussian width of every peak
    int max_iterations = 200;
};

/// Fits three Gaussians on a linear background to a profile across a guide and returns the middle
/// peak. The middle peak is seeded near the profile midline and the sides at the nominal trench
/// offsets; if the fitted peaks come out of order the fit is repeated from re-seeded centers.
inline GuideSectionFit fit_guide_section(std::span<const double> profile, const GuideSectionOptions& opt = {}) {
    const auto n = static_cast<int>(profile.size());
    if (n < 12) throw ContractError("fit_guide_section: profile needs at least 12 samples");
    const double mid = 0.5 * (n - 1);
    const double offset = opt.edge_offset_px > 0.0 ? opt.edge_offset_px : 0.25 * (n - 1);
    if (mid - offset < 0.0 || mid + offset > n - 1.0)
        throw ContractError("fit_guide_section: trench edges fall outside the profile");
    std::vector<double> xs(static_cast<std::size_t>(n)), ys(profile.begin(), profile.end());
    std::iota(xs.begin(), xs.end(), 0.0);
    const double floor = *std::min_element(ys.begin(), ys.end());
    auto at = [&](double x) { return ys[static_cast<std::size_t>(std::clamp<long>(std::lround(x), 0, n - 1))]; };

    // middle seed: the brightest sample within half a trench offset of the midline
    double c_mid = mid;
    for (int i = static_cast<int>(std::ceil(mid - 0.5 * offset)); i <= static_cast<int>(std::floor(mid + 0.5 * offset)); ++i)
        if (ys[static_cast<std::size_t>(i)] > at(c_mid)) c_mid = i;

    const double inf = std::numeric_limits<double>::infinity();
    auto solve = [&](std::array<double, 3> centers) {
        TripleGaussianModel init;
        for (int k = 0; k < 3; ++k) {
            init.center[k] = centers[k];
            init.width[k] = opt.width_px;
            init.amplitude[k] = std::max(at(centers[k]) - floor, 1e-6);
        }
        init.offset = floor;
        auto pb = curve_fit_problem(xs, ys, init);
        pb.lower = Vector::Constant(TripleGaussianModel::kParams, -inf);
        pb.upper = Vector::Constant(TripleGaussianModel::kParams, inf);
        for (int k = 0; k < 3; ++k) {
            pb.lower[TripleGaussianModel::amp_index(k)] = 0.0;
            pb.lower[TripleGaussianModel::center_index(k)] = -0.5;
            pb.upper[TripleGaussianModel::center_index(k)] = n - 0.5;
            pb.lower[TripleGaussianModel::width_index(k)] = 0.3;
            pb.upper[TripleGaussianModel::width_index(k)] = 0.5 * n;
        }
        pb.max_iterations = opt.max_iterations;
        for (int j = 0; j < TripleGaussianModel::kParams; ++j) pb.initial[j] = std::clamp(pb.initial[j], pb.lower[j], pb.upper[j]);
        return lm_fit(pb);
    };

    GuideSectionFit out;
    std::array<double, 3> seeds{c_mid - offset, c_mid, c_mid + offset};
    std::string last_error = "peaks out of order";
    for (int attempt = 1; attempt <= 3; ++attempt) {
        out.attempts = attempt;
        try {
            const FitResult res = solve(seeds);
            const auto m = TripleGaussianModel::from_params(std::span<const double>(res.params.data(), TripleGaussianModel::kParams));
            const double c = m.center[1];
            if (res.converged && m.ordered() && c > 0.5 && c < n - 1.5) {
                out.center = c;
                out.unc = res.ci95[TripleGaussianModel::center_index(1)];
                out.model = m;
                if (!(out.unc > 0.0) || !std::isfinite(out.unc)) throw FitError("degenerate uncertainty");
                return out;
            }
            last_error = res.converged ? "peaks out of order" : "fit did not converge";
            // re-seed: sides at the nominal offsets around the fitted middle, or around the midline
            const double base = (c > mid - offset && c < mid + offset) ? c : mid;
            seeds = attempt == 1 ? std::array<double, 3>{base - offset, base, base + offset}
                                 : std::array<double, 3>{mid - offset, mid, mid + offset};
        } catch (const FitError& e) {
            last_error = e.what();
            seeds = {mid - offset, mid, mid + offset};
        }
    }
    throw FitError("fit_guide_section: " + last_error);
}

struct WaveguideFitOptions {
    int sections = 9;
    double coverage = 0.6;  ///< fraction of the guide length (within the ROI) spanned by the sections
    GuideSectionOptions section;
};

/// Locates the axis of a straight guide inside `roi`: evenly spaced sections across the central part
/// of the guide, each fitted with `fit_guide_section`, combined by an inverse-variance weighted mean.
inline WaveguideAxis fit_waveguide(const Image& img, const Roi& roi, Orientation orientation, const WaveguideFitOptions& opt = {}) {
    if (opt.sections < 1 || !(opt.coverage > 0.0 && opt.coverage <= 1.0)) throw ContractError("fit_waveguide: invalid options");
    if (roi.x0 < 0 || roi.y0 < 0 || roi.x0 + roi.width > img.width() || roi.y0 + roi.height > img.height())
        throw ContractError("fit_waveguide: ROI outside the image");
    const bool along_x = orientation == Orientation::along_x;
    const int length = along_x ? roi.width : roi.height;
    const int across = along_x ? roi.height : roi.width;
    const double pitch = img.pitch_nm();

    WaveguideAxis axis;
    axis.orientation = orientation;
    std::vector<double> profile(static_cast<std::size_t>(across));
    double sw = 0.0, swc = 0.0;
    for (int k = 0; k < opt.sections; ++k) {
        const double frac = opt.sections == 1 ? 0.5 : 0.5 - 0.5 * opt.coverage + opt.coverage * k / (opt.sections - 1);
        const int along = static_cast<int>(std::lround(frac * (length - 1)));
        for (int i = 0; i < across; ++i)
            profile[static_cast<std::size_t>(i)] = along_x ? img(roi.x0 + along, roi.y0 + i) : img(roi.x0 + i, roi.y0 + along);
        try {
            const auto f = fit_guide_section(profile, opt.section);
            const double center_px = (along_x ? roi.y0 : roi.x0) + f.center;
            const double pos_px = (along_x ? roi.x0 : roi.y0) + along;
            axis.sections.push_back({pos_px * pitch, center_px * pitch, f.unc * pitch});
            const double w = 1.0 / (f.unc * f.unc);
            sw += w, swc += w * center_px;
        } catch (const Error& e) {
            axis.diagnostics.push_back(fmt::format("section {} discarded: {}", k, e.what()));
        }
    }
    if (axis.sections.size() < 3)
        throw DegenerateError(fmt::format("fit_waveguide: only {} valid sections", axis.sections.size()));
    if (axis.sections.size() < 7)
        axis.diagnostics.push_back(fmt::format("only {} of {} sections fitted", axis.sections.size(), opt.sections));
    axis.axis_nm = swc / sw * pitch;
    axis.unc_nm = pitch / std::sqrt(sw);
    return axis;
}

struct Misalignment {
    double delta_nm = 0.0;  ///< QD minus axis, positive towards increasing coordinate
    double unc_nm = 0.0;
};

/// Perpendicular offset of a QD from a guide axis (both in the same frame). An along-x guide is
/// compared with the QD's y coordinate, an along-y guide with its x coordinate.
inline Misalignment misalign(double qd_x_nm, double qd_y_nm, double qd_unc_x_nm, double qd_unc_y_nm, const WaveguideAxis& wg) {
    const bool along_x = wg.orientation == Orientation::along_x;
    const double q = along_x ? qd_y_nm : qd_x_nm;
    const double u = along_x ? qd_unc_y_nm : qd_unc_x_nm;
    return {q - wg.axis_nm, std::hypot(u, wg.unc_nm)};
}

/// `device` is the orientation the device was designed with; a guide fitted along the other
/// direction means the two do not belong together.
inline Misalignment misalign(const EmitterFit& qd, const WaveguideAxis& wg, std::optional<Orientation> device = {}) {
    if (device && *device != wg.orientation)
        throw ContractError(fmt::format("misalign: guide fitted {} but the device is {}", to_string(wg.orientation), to_string(*device)));
    return misalign(qd.x_nm, qd.y_nm, qd.unc_x_nm, qd.unc_y_nm, wg);
}

struct MisalignStats {
    std::size_t n = 0;
    double mean = 0.0;
    double std_dev = 0.0;  ///< with n − 1
    double anderson_darling = 0.0;  ///< A² against the fitted normal; NaN when std_dev = 0
    double ad_adjusted = 0.0;       ///< A²·(1 + 0.75/n + 2.25/n²)
    double ad_p_value = 0.0;        ///< approximate p-value for normality with estimated parameters
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline MisalignStats misalign_stats(std::span<const double> deltas) {
    if (deltas.size() < 5) throw ContractError("misalign_stats: need at least 5 samples");
    MisalignStats s;
    s.n = deltas.size();
    const double n = static_cast<double>(s.n);
    s.mean = std::accumulate(deltas.begin(), deltas.end(), 0.0) / n;
    double ss = 0.0;
    for (double d : deltas) ss += (d - s.mean) * (d - s.mean);
    s.std_dev = std::sqrt(ss / (n - 1.0));
    if (!(s.std_dev > 0.0)) {
        s.anderson_darling = s.ad_adjusted = s.ad_p_value = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    std::vector<double> z(deltas.begin(), deltas.end());
    std::sort(z.begin(), z.end());
    for (double& v : z) v = (v - s.mean) / s.std_dev;
    double acc = 0.0;
    for (std::size_t i = 0; i < s.n; ++i) {
        const double lo = std::max(normal_cdf(z[i]), 1e-300);
        const double hi = std::max(1.0 - normal_cdf(z[s.n - 1 - i]), 1e-300);
        acc += (2.0 * static_cast<double>(i) + 1.0) * (std::log(lo) + std::log(hi));
    }
    s.anderson_darling = -n - acc / n;
    const double a = s.ad_adjusted = s.anderson_darling * (1.0 + 0.75 / n + 2.25 / (n * n));
    // D'Agostino & Stephens piecewise approximation
    if (a < 0.2) s.ad_p_value = 1.0 - std::exp(-13.436 + 101.14 * a - 223.73 * a * a);
    else if (a < 0.34) s.ad_p_value = 1.0 - std::exp(-8.318 + 42.796 * a - 59.938 * a * a);
    else if (a < 0.6) s.ad_p_value = std::exp(0.9177 - 4.279 * a - 1.38 * a * a);
    else s.ad_p_value = std::exp(1.2937 - 5.709 * a + 0.0186 * a * a);
    s.ad_p_value = std::clamp(s.ad_p_value, 0.0, 1.0);
    return s;
}

struct HistogramBin {
    double center_nm = 0.0;
    std::size_t count = 0;
};

/// Fixed-width histogram with bins aligned to multiples of `bin_width_nm` (centers at (k + ½)·width).
inline std::vector<HistogramBin> histogram(std::span<const double> values, double bin_width_nm) {
    if (!(bin_width_nm > 0.0)) throw ContractError("histogram: bin width must be positive");
    if (values.empty()) return {};
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const long first = static_cast<long>(std::floor(*lo_it / bin_width_nm));
    const long last = static_cast<long>(std::floor(*hi_it / bin_width_nm));
    std::vector<HistogramBin> bins(static_cast<std::size_t>(last - first + 1));
    for (std::size_t k = 0; k < bins.size(); ++k) bins[k].center_nm = (first + static_cast<long>(k) + 0.5) * bin_width_nm;
    for (double v : values) ++bins[static_cast<std::size_t>(static_cast<long>(std::floor(v / bin_width_nm)) - first)].count;
    return bins;
}

inline std::string histogram_csv(const std::vector<HistogramBin>& bins) {
    std::string out = "bin_center_nm,count\n";
    for (const auto& b : bins) out += fmt::format("{},{}\n", b.center_nm, b.count);
    return out;
}

/// Bar chart of the histogram with the fitted normal density (scaled to counts) overlaid.
inline std::string histogram_svg(const std::vector<HistogramBin>& bins, const MisalignStats& fit, double bin_width_nm) {
    constexpr double W = 480, H = 300, M = 40;
    std::string svg = fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">)"
                                  "\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n", W, H, W, H);
    if (bins.empty()) return svg + "</svg>\n";
    const double x0 = bins.front().center_nm - 0.5 * bin_width_nm, x1 = bins.back().center_nm + 0.5 * bin_width_nm;
    const double total = static_cast<double>(fit.n);
    auto density = [&](double x) {
        if (!(fit.std_dev > 0.0)) return 0.0;
        const double z = (x - fit.mean) / fit.std_dev;
        return total * bin_width_nm * std::exp(-0.5 * z * z) / (fit.std_dev * std::sqrt(2.0 * std::numbers::pi));
    };
    double ymax = 1.0;
    for (const auto& b : bins) ymax = std::max(ymax, static_cast<double>(b.count));
    ymax = std::max(ymax, density(fit.mean)) * 1.1;
    auto sx = [&](double x) { return M + (x - x0) / (x1 - x0) * (W - 2 * M); };
    auto sy = [&](double y) { return H - M - y / ymax * (H - 2 * M); };
    for (const auto& b : bins) {
        const double l = sx(b.center_nm - 0.5 * bin_width_nm), r = sx(b.center_nm + 0.5 * bin_width_nm);
        svg += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"#9ab\" stroke=\"#345\"/>\n", l,
                           sy(static_cast<double>(b.count)), r - l, sy(0) - sy(static_cast<double>(b.count)));
    }
    std::string path;
    for (int i = 0; i <= 200; ++i) {
        const double x = x0 + (x1 - x0) * i / 200.0;
        path += fmt::format("{}{:.2f},{:.2f}", i == 0 ? "M" : " L", sx(x), sy(density(x)));
    }
    svg += fmt::format("<path d=\"{}\" fill=\"none\" stroke=\"#c33\" stroke-width=\"2\"/>\n", path);
    svg += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", M, H - M, W - M, H - M);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">Δ (nm)   mean {:.1f}, std {:.1f}, n = {}</text>\n",
                       W / 2, H - 10, fit.mean, fit.std_dev, fit.n);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{:.0f}</text>\n", sx(x0), H - M + 14, x0);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{:.0f}</text>\n", sx(x1), H - M + 14, x1);
    return svg + "</svg>\n";
}

}  // namespace qdalign
